//! Linearised peak-mass operator, its evolution, the pure fragmentation
//! cascade, and the weighted Poincaré inequality.
//!
//! On a finite window the operator is closed by copying `y_{n_lo}` into the
//! ghost site below (so constants stay in the kernel) and by `sigma = 0` at
//! the top index.

use crate::kernels::KernelModel;
use crate::ode::{self, OdeOptions, OdeStats, System};
use crate::stationary::{m_bar, IndexWindow, ShiftSequence, StationaryProfile};
use crate::{PeakError, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

/// Sequence on a window with weight exponent `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSeq {
    pub window: IndexWindow,
    pub values: Vec<f64>,
    pub theta: f64,
}

impl WeightedSeq {
    pub fn new(window: IndexWindow, values: Vec<f64>, theta: f64) -> Result<Self> {
        if values.len() != window.len() {
            return Err(PeakError::Parameter(format!(
                "{} values for a window of {}",
                values.len(),
                window.len()
            )));
        }
        Ok(Self { window, values, theta })
    }

    pub fn zeros(window: IndexWindow, theta: f64) -> Self {
        Self { window, values: vec![0.0; window.len()], theta }
    }

    pub fn from_fn(window: IndexWindow, theta: f64, f: impl Fn(i32) -> f64) -> Self {
        Self { window, values: window.indices().map(f).collect(), theta }
    }

    /// `y_n`, zero outside the window.
    pub fn get(&self, n: i32) -> f64 {
        if self.window.contains(n) {
            self.values[self.window.idx(n)]
        } else {
            0.0
        }
    }

    /// `sup_{n<=0} 2^n |y_n| + sup_{n>0} 2^(theta n) |y_n|`.
    pub fn norm_with(&self, theta: f64) -> f64 {
        let mut left = 0.0f64;
        let mut right = 0.0f64;
        for (n, &v) in self.window.indices().zip(&self.values) {
            if n <= 0 {
                left = left.max((n as f64).exp2() * v.abs());
            } else {
                right = right.max((theta * n as f64).exp2() * v.abs());
            }
        }
        left + right
    }

    pub fn norm(&self) -> f64 {
        self.norm_with(self.theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Plus,
    Minus,
}

/// `D+_n y = y_{n+1} - y_n` (zero at the top index) or
/// `D-_n y = y_n - y_{n-1}` (zero at the bottom index, the reflecting closure).
pub fn discrete_derivative(y: &WeightedSeq, side: Side) -> WeightedSeq {
    let v = &y.values;
    let l = v.len();
    let values = (0..l)
        .map(|i| match side {
            Side::Plus if i + 1 < l => v[i + 1] - v[i],
            Side::Minus if i > 0 => v[i] - v[i - 1],
            _ => 0.0,
        })
        .collect();
    WeightedSeq { window: y.window, values, theta: y.theta }
}

type ShiftPath = Arc<dyn Fn(f64) -> ShiftSequence<f64> + Send + Sync>;

#[derive(Clone)]
enum SigmaSource {
    /// Rates `gamma(2^(n+rho))/4` and coefficients fixed in time.
    Frozen { rate: Vec<f64>, sigma: Vec<f64> },
    /// Coefficients built from `mu_bar_n(A_M, p(t))` along a shift path.
    Moving { model: KernelModel<f64>, a_m: f64, path: ShiftPath },
}

/// Coefficients of `L_n(y; t) = r_n (y_{n-1} - y_n - sigma_n (y_n - y_{n+1}))`.
#[derive(Clone)]
pub struct SigmaCoeffs {
    pub window: IndexWindow,
    /// Entries above this index are held at zero.
    pub n_trunc: i32,
    /// Multiplies every `sigma_n`; `1/2` gives the operator of the shift equation.
    pub sigma_scale: f64,
    source: SigmaSource,
}

impl std::fmt::Debug for SigmaCoeffs {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.source {
            SigmaSource::Frozen { .. } => "frozen",
            SigmaSource::Moving { .. } => "moving",
        };
        f.debug_struct("SigmaCoeffs")
            .field("window", &self.window)
            .field("n_trunc", &self.n_trunc)
            .field("sigma_scale", &self.sigma_scale)
            .field("kind", &kind)
            .finish()
    }
}

fn sigma_from_profile(model: &KernelModel<f64>, prof: &StationaryProfile<f64>, p: &ShiftSequence<f64>, window: IndexWindow) -> (Vec<f64>, Vec<f64>) {
    let rate = window.indices().map(|n| model.gamma((n as f64 + p.get(n)).exp2()) / 4.0).collect();
    let sigma = window
        .indices()
        .map(|n| {
            8.0 * prof.mu_bar(n) * model.gamma((n as f64 + 1.0 + p.get(n + 1)).exp2())
                / model.gamma((n as f64 + p.get(n)).exp2())
        })
        .collect();
    (rate, sigma)
}

impl SigmaCoeffs {
    /// `sigma_n = 4 zeta_{n,rho} a_n(A, rho) gamma(2^(n+1+rho)) / gamma(2^(n+rho))`.
    pub fn constant_shift(model: &KernelModel<f64>, a: f64, rho: f64, window: IndexWindow) -> Result<Self> {
        let p = ShiftSequence::constant(window, rho);
        let prof = m_bar(model, a, &p)?;
        let (rate, sigma) = sigma_from_profile(model, &prof, &p, window);
        Ok(Self { window, n_trunc: window.n_hi, sigma_scale: 1.0, source: SigmaSource::Frozen { rate, sigma } })
    }

    /// `sigma_n(t) = 8 mu_bar_n(A_M, p(t)) gamma(2^(n+1+p_{n+1})) / gamma(2^(n+p_n))`.
    pub fn time_dependent(
        model: &KernelModel<f64>,
        a_m: f64,
        window: IndexWindow,
        path: impl Fn(f64) -> ShiftSequence<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            window,
            n_trunc: window.n_hi,
            sigma_scale: 1.0,
            source: SigmaSource::Moving { model: model.clone(), a_m, path: Arc::new(path) },
        }
    }

    /// Explicit rates and coefficients.
    pub fn custom(window: IndexWindow, rate: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if rate.len() != window.len() || sigma.len() != window.len() {
            return Err(PeakError::Parameter("coefficient lengths differ from the window".into()));
        }
        if rate.iter().chain(&sigma).any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(PeakError::Parameter("rates and sigma must be finite and nonnegative".into()));
        }
        Ok(Self { window, n_trunc: window.n_hi, sigma_scale: 1.0, source: SigmaSource::Frozen { rate, sigma } })
    }

    /// Truncates at `n`: `sigma_n = 0` and everything above is frozen at zero.
    pub fn truncated(mut self, n: i32) -> Result<Self> {
        if !self.window.contains(n) || n == self.window.n_lo {
            return Err(PeakError::Parameter(format!("truncation index {n} outside the window")));
        }
        self.n_trunc = n;
        Ok(self)
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.sigma_scale = factor;
        self
    }

    pub fn is_autonomous(&self) -> bool {
        matches!(self.source, SigmaSource::Frozen { .. })
    }

    /// Rates `r_n` and coefficients `sigma_n` at time `t`, truncation applied.
    pub fn at(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (rate, mut sigma) = match &self.source {
            SigmaSource::Frozen { rate, sigma } => (rate.clone(), sigma.clone()),
            SigmaSource::Moving { model, a_m, path } => {
                let p = path(t);
                let prof = m_bar(model, *a_m, &p)?;
                sigma_from_profile(model, &prof, &p, self.window)
            }
        };
        let top = self.window.idx(self.n_trunc);
        for (i, s) in sigma.iter_mut().enumerate() {
            *s = if i >= top { 0.0 } else { *s * self.sigma_scale };
        }
        Ok((rate, sigma))
    }
}

fn apply_with(rate: &[f64], sigma: &[f64], top: usize, y: &[f64], out: &mut [f64]) {
    let l = y.len();
    for i in 0..l {
        if i > top {
            out[i] = 0.0;
            continue;
        }
        let below = if i == 0 { y[0] } else { y[i - 1] };
        let above = if i + 1 < l { y[i + 1] } else { 0.0 };
        let right = if sigma[i] == 0.0 { 0.0 } else { sigma[i] * (y[i] - above) };
        out[i] = rate[i] * (below - y[i] - right);
    }
}

/// `L(y; t)` componentwise.
pub fn apply_l(coeffs: &SigmaCoeffs, y: &WeightedSeq, t: f64) -> Result<WeightedSeq> {
    if y.window != coeffs.window {
        return Err(PeakError::Parameter("sequence and coefficients live on different windows".into()));
    }
    let (rate, sigma) = coeffs.at(t)?;
    let mut out = vec![0.0; y.values.len()];
    apply_with(&rate, &sigma, coeffs.window.idx(coeffs.n_trunc), &y.values, &mut out);
    Ok(WeightedSeq { window: y.window, values: out, theta: y.theta })
}

struct LinearSystem<'a> {
    coeffs: &'a SigmaCoeffs,
    top: usize,
    cache: Option<(f64, Vec<f64>, Vec<f64>)>,
    failure: Option<PeakError>,
}

impl LinearSystem<'_> {
    fn coeffs_at(&mut self, t: f64) -> (Vec<f64>, Vec<f64>) {
        if let Some((tc, r, s)) = &self.cache {
            if *tc == t || self.coeffs.is_autonomous() {
                return (r.clone(), s.clone());
            }
        }
        match self.coeffs.at(t) {
            Ok((r, s)) => {
                self.cache = Some((t, r.clone(), s.clone()));
                (r, s)
            }
            Err(e) => {
                self.failure.get_or_insert(e);
                let l = self.coeffs.window.len();
                (vec![0.0; l], vec![0.0; l])
            }
        }
    }
}

impl System for LinearSystem<'_> {
    fn dim(&self) -> usize {
        self.coeffs.window.len()
    }

    fn rhs(&mut self, t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
        let (r, s) = self.coeffs_at(t);
        apply_with(&r, &s, self.top, y.as_slice(), dy.as_mut_slice());
    }

    fn jacobian(&mut self, t: f64, _y: &DVector<f64>, _f0: &DVector<f64>, jac: &mut DMatrix<f64>) {
        let (r, s) = self.coeffs_at(t);
        let l = self.dim();
        jac.fill(0.0);
        for i in 0..=self.top.min(l - 1) {
            if i > 0 {
                jac[(i, i - 1)] += r[i];
            } else {
                jac[(i, i)] += r[i];
            }
            jac[(i, i)] -= r[i] * (1.0 + s[i]);
            if i + 1 < l {
                jac[(i, i + 1)] += r[i] * s[i];
            }
        }
    }

    fn autonomous(&self) -> bool {
        self.coeffs.is_autonomous()
    }
}

/// Solves `dy/dt = L(y; t)` from `y0` at `t0` and returns `y` at every
/// time in `times`.
pub fn evolve_trace(coeffs: &SigmaCoeffs, y0: &WeightedSeq, t0: f64, times: &[f64], tol: f64) -> Result<Vec<WeightedSeq>> {
    if y0.window != coeffs.window {
        return Err(PeakError::Parameter("sequence and coefficients live on different windows".into()));
    }
    let top = coeffs.window.idx(coeffs.n_trunc);
    let mut start = y0.values.clone();
    start.iter_mut().skip(top + 1).for_each(|v| *v = 0.0);
    let mut sys = LinearSystem { coeffs, top, cache: None, failure: None };
    let scale = y0.values.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-300);
    let opts = OdeOptions { rtol: tol, atol: tol * scale, h_init: 1e-8, ..Default::default() };
    let mut stats = OdeStats::default();
    let ys = ode::integrate(&mut sys, t0, DVector::from_vec(start), times, &opts, &mut stats)?;
    if let Some(e) = sys.failure {
        return Err(e);
    }
    Ok(ys
        .into_iter()
        .map(|v| WeightedSeq { window: y0.window, values: v.as_slice().to_vec(), theta: y0.theta })
        .collect())
}

/// `T(t1; t0) y0`.
pub fn evolve_t(coeffs: &SigmaCoeffs, y0: &WeightedSeq, t0: f64, t1: f64, tol: f64) -> Result<WeightedSeq> {
    if t1 < t0 {
        return Err(PeakError::Parameter("t1 precedes t0".into()));
    }
    Ok(evolve_trace(coeffs, y0, t0, &[t1], tol)?.pop().expect("one sample"))
}

/// Least-squares fit of `C t^(-a) e^(-nu t)` in log space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub c: f64,
    pub a: f64,
    pub nu: f64,
    /// Largest absolute deviation in log space.
    pub residual: f64,
    pub samples: usize,
}

/// Which parameters of the envelope are fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Envelope {
    /// `C t^(-a) e^(-nu t)`.
    PowerExp,
    /// `C e^(-nu t)`, `a = 0`.
    Exp,
    /// `C t^(-a)`, `nu = 0`.
    Power,
}

pub const DEFAULT_BURN_IN: f64 = 0.5;

/// Fits the envelope to `(times, values)` using the samples with `t >= t_burn`.
pub fn fit_decay(times: &[f64], values: &[f64], envelope: Envelope, t_burn: f64) -> Result<DecayFit> {
    if times.len() != values.len() {
        return Err(PeakError::Parameter("times and values differ in length".into()));
    }
    let pts: Vec<(f64, f64)> = times.iter().zip(values).filter(|(t, _)| **t >= t_burn).map(|(&t, &v)| (t, v)).collect();
    if pts.len() < 20 {
        return Err(PeakError::Parameter(format!("{} samples after burn-in, at least 20 needed", pts.len())));
    }
    if pts.iter().any(|&(t, v)| !(v > 0.0 && v.is_finite()) || (envelope != Envelope::Exp && t <= 0.0)) {
        return Err(PeakError::Domain("decay fit needs positive samples (and positive times for power laws)".into()));
    }
    let cols = match envelope {
        Envelope::PowerExp => 3,
        _ => 2,
    };
    let mut a = DMatrix::zeros(pts.len(), cols);
    let mut b = DVector::zeros(pts.len());
    for (r, &(t, v)) in pts.iter().enumerate() {
        a[(r, 0)] = 1.0;
        match envelope {
            Envelope::PowerExp => {
                a[(r, 1)] = -t.ln();
                a[(r, 2)] = -t;
            }
            Envelope::Exp => a[(r, 1)] = -t,
            Envelope::Power => a[(r, 1)] = -t.ln(),
        }
        b[r] = v.ln();
    }
    let sol = a.clone().svd(true, true).solve(&b, 1e-14).map_err(|e| PeakError::Domain(e.to_string()))?;
    let (pa, pnu) = match envelope {
        Envelope::PowerExp => (sol[1], sol[2]),
        Envelope::Exp => (0.0, sol[1]),
        Envelope::Power => (sol[1], 0.0),
    };
    let resid = (&a * &sol - &b).amax();
    Ok(DecayFit { c: sol[0].exp(), a: pa, nu: pnu, residual: resid, samples: pts.len() })
}

/// Fundamental solution of `dPsi_n/dt = (2^(beta n)/4)(Psi_{n-1} - Psi_n)`
/// with `Psi_n(0) = [n = ell]`, as a sum of exponentials.
pub fn fundamental_psi(beta: f64, ell: i32, n: i32, t: f64) -> f64 {
    if n < ell {
        return 0.0;
    }
    psi_terms(beta, ell, n)
        .into_iter()
        .fold(Neumaier::default(), |mut acc, (c, lam)| {
            acc.add(c * (-lam * t).exp());
            acc
        })
        .sum()
}

/// Coefficients `(c_m, lambda_m)` of `Psi_n = sum c_m exp(-lambda_m t)`.
pub fn psi_terms(beta: f64, ell: i32, n: i32) -> Vec<(f64, f64)> {
    if n < ell {
        return Vec::new();
    }
    let lam: Vec<f64> = (ell..=n).map(|m| (beta * m as f64).exp2() / 4.0).collect();
    let prod_ln: f64 = lam[1..].iter().map(|l| l.ln()).sum();
    (0..lam.len())
        .map(|i| {
            let mut ln = prod_ln;
            let mut sign = 1.0;
            for (j, &lj) in lam.iter().enumerate() {
                if j != i {
                    let d = lj - lam[i];
                    ln -= d.abs().ln();
                    if d < 0.0 {
                        sign = -sign;
                    }
                }
            }
            (sign * ln.exp(), lam[i])
        })
        .collect()
}

/// `(2^(beta ell)/4) * integral_0^inf Psi_n`, from the closed form.
pub fn psi_mass(beta: f64, ell: i32, n: i32) -> f64 {
    let l0 = (beta * ell as f64).exp2() / 4.0;
    psi_terms(beta, ell, n)
        .into_iter()
        .fold(Neumaier::default(), |mut acc, (c, lam)| {
            acc.add(l0 * c / lam);
            acc
        })
        .sum()
}

/// Largest `|Psi_n - Psi_{n+1}| / (2^(-beta (n - ell)) e^(-(2^(beta ell)/4) t))`
/// over `n in [ell, ell + depth]` and the given times.
pub fn psi_difference_constant(beta: f64, ell: i32, depth: i32, times: &[f64]) -> f64 {
    let l0 = (beta * ell as f64).exp2() / 4.0;
    let mut c = 0.0f64;
    for n in ell..=ell + depth {
        for &t in times {
            let d = (fundamental_psi(beta, ell, n, t) - fundamental_psi(beta, ell, n + 1, t)).abs();
            let env = (-beta * (n - ell) as f64).exp2() * (-l0 * t).exp();
            if env > 0.0 {
                c = c.max(d / env);
            }
        }
    }
    c
}

#[derive(Debug, Default, Clone, Copy)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn sum(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Weights of the Poincaré quotient on a profile window.
#[derive(Debug, Clone)]
pub struct PoincareWeights {
    pub window: IndexWindow,
    /// `2^(2n) m_bar_n`.
    pub mass: Vec<f64>,
    /// `2^(2n) gamma(2^(n+1+p_{n+1})) m_bar_{n+1}`, one per link `(n, n+1)`.
    pub link: Vec<f64>,
}

impl PoincareWeights {
    pub fn new(model: &KernelModel<f64>, profile: &StationaryProfile<f64>) -> Self {
        let window = profile.window();
        let mass = window.indices().map(|n| (2.0 * n as f64).exp2() * profile.ln_m_bar_at(n).exp()).collect();
        let link = window
            .indices()
            .take(window.len() - 1)
            .map(|n| {
                let p1 = profile.shift.get(n + 1);
                (2.0 * n as f64).exp2() * model.gamma((n as f64 + 1.0 + p1).exp2()) * profile.ln_m_bar_at(n + 1).exp()
            })
            .collect();
        Self { window, mass, link }
    }

    /// Numerator and denominator of the quotient.
    pub fn parts(&self, y: &[f64]) -> (f64, f64) {
        let w: f64 = self.mass.iter().sum();
        let mean = self.mass.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / w;
        let num = self.mass.iter().zip(y).map(|(a, b)| a * (b - mean).powi(2)).sum();
        let den = self.link.iter().zip(y.windows(2)).map(|(a, p)| a * (p[1] - p[0]).powi(2)).sum();
        (num, den)
    }

    pub fn ratio(&self, y: &[f64]) -> f64 {
        let (num, den) = self.parts(y);
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    /// Quotient matrix in the difference variables `z = D+ y`, scaled so its
    /// largest eigenvalue is the best constant.
    fn difference_operator(&self) -> DMatrix<f64> {
        let l = self.mass.len();
        let k = l - 1;
        // y = y_0 + S z with S_{i,j} = [j < i]; the centred numerator S^T P S
        // has entries head_j tail_k / total for j <= k, free of cancellation
        let mut head = vec![0.0; k];
        let mut acc = 0.0;
        for j in 0..k {
            acc += self.mass[j];
            head[j] = acc;
        }
        let mut tail = vec![0.0; k];
        let mut acc = 0.0;
        for j in (0..k).rev() {
            acc += self.mass[j + 1];
            tail[j] = acc;
        }
        let w = head[k - 1] + tail[k - 1];
        let num = DMatrix::from_fn(k, k, |a, b| head[a.min(b)] * tail[a.max(b)] / w);
        let inv_sqrt = DVector::from_iterator(k, self.link.iter().map(|v| 1.0 / v.sqrt()));
        let d = DMatrix::from_diagonal(&inv_sqrt);
        &d * num * &d
    }

    /// Best constant, from the symmetric eigenproblem.
    pub fn exact_constant(&self) -> f64 {
        let m = self.difference_operator();
        SymmetricEigen::new(m).eigenvalues.max()
    }

    /// Sequence attaining the best constant.
    pub fn extremal(&self) -> Vec<f64> {
        let m = self.difference_operator();
        let e = SymmetricEigen::new(m);
        let imax = e.eigenvalues.imax();
        let v = e.eigenvectors.column(imax);
        let mut y = vec![0.0; self.mass.len()];
        for i in 1..y.len() {
            y[i] = y[i - 1] + v[i - 1] / self.link[i - 1].sqrt();
        }
        y
    }
}

/// `sum 2^(2n) m_bar_n (y_n - mean)^2 / sum 2^(2n) gamma(2^(n+1+p_{n+1})) m_bar_{n+1} (D+_n y)^2`,
/// with `0/0 = 0`.
pub fn poincare_rayleigh(model: &KernelModel<f64>, profile: &StationaryProfile<f64>, y: &WeightedSeq) -> Result<f64> {
    if y.window != profile.window() {
        return Err(PeakError::Parameter("sequence and profile live on different windows".into()));
    }
    Ok(PoincareWeights::new(model, profile).ratio(&y.values))
}

/// Random test sequence: a Gaussian random walk with random step sizes.
pub fn random_sequence<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(len);
    let mut v = 0.0;
    let spread: f64 = rng.gen_range(0.1..3.0);
    for _ in 0..len {
        let z: f64 = rng.sample(StandardNormal);
        v += spread * z;
        y.push(v);
    }
    y
}

/// Empirical Poincaré constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoincareEstimate {
    /// Supremum over the random samples.
    pub sample_sup: f64,
    /// Sample supremum refined by power iteration from the best sample.
    pub c0: f64,
    /// Largest eigenvalue of the quotient, for comparison.
    pub exact: f64,
}

pub fn poincare_constant<R: Rng>(weights: &PoincareWeights, samples: usize, rng: &mut R) -> PoincareEstimate {
    let l = weights.mass.len();
    let mut best = vec![0.0; l];
    let mut sup = 0.0f64;
    for _ in 0..samples {
        let y = random_sequence(rng, l);
        let r = weights.ratio(&y);
        if r > sup {
            sup = r;
            best = y;
        }
    }
    // power iteration on the quotient operator in difference variables
    let m = weights.difference_operator();
    // started from the best sample plus a flat vector, so no eigendirection
    // is missing from the start (the link weights span many decades)
    let mut z = DVector::from_iterator(l - 1, (0..l - 1).map(|i| (best[i + 1] - best[i]) * weights.link[i].sqrt()));
    if z.norm() > 0.0 {
        z /= z.norm();
    }
    z.add_scalar_mut(1.0 / ((l - 1) as f64).sqrt());
    let mut c0 = sup;
    if z.norm() > 0.0 {
        z /= z.norm();
        for _ in 0..20_000 {
            let mz = &m * &z;
            let rq = z.dot(&mz);
            let nz = mz.norm();
            if nz == 0.0 {
                break;
            }
            let znew = mz / nz;
            let done = (&znew - &z).norm() < 1e-13;
            z = znew;
            c0 = c0.max(rq);
            if done {
                break;
            }
        }
    }
    PoincareEstimate { sample_sup: sup, c0, exact: weights.exact_constant() }
}

/// Solution of the variance super-solution cascade and its sandwich check.
#[derive(Debug, Clone, PartialEq)]
pub struct HatQ {
    pub n0: i32,
    pub times: Vec<f64>,
    /// `values[k][j]` is `q_hat_{n0 + 1 + k}(times[j])`.
    pub values: Vec<Vec<f64>>,
    /// Exponent `theta_2` of the weight `2^(theta_2 n)`.
    pub theta2: f64,
    /// Smallest `2^(theta_2 n) q_hat_n e^(nu t) / delta0^(3/2)`.
    pub c1: f64,
    /// Largest `2^(theta_2 n) q_hat_n e^(nu t) t^(theta_2/beta) / delta0^(3/2)`.
    pub c2: f64,
    /// Whether both bounds hold with `0 < c1 <= c2 < inf`.
    pub holds: bool,
    /// First `(n, t)` at which a bound failed.
    pub failure: Option<(i32, f64)>,
}

/// `dq_n/dt = (gamma(2^n)/4)((1+delta1)/2 q_{n-1} - (1-delta1) q_n)` for
/// `n0 < n <= n0 + depth`, data `q_n(0) = 4 delta0^(3/2)`,
/// `q_{n0}(t) = 4 delta0^(3/2) e^(-nu t)`, solved as sums of exponentials.
#[allow(clippy::too_many_arguments)]
pub fn hatq_supersolution(
    model: &KernelModel<f64>,
    n0: i32,
    depth: i32,
    delta0: f64,
    delta1: f64,
    nu: f64,
    theta2: f64,
    times: &[f64],
) -> Result<HatQ> {
    if !(delta1 >= 0.0 && delta1 < 1.0) || !(nu > 0.0) || depth < 1 {
        return Err(PeakError::Parameter("need 0 <= delta1 < 1, nu > 0 and depth >= 1".into()));
    }
    let q0 = 4.0 * delta0.powf(1.5);
    let rows = hatq_terms(model, n0, depth, q0, delta1, nu)?;
    let scale = delta0.powf(1.5);
    let mut values = Vec::with_capacity(rows.len());
    let mut c1 = f64::INFINITY;
    let mut c2 = 0.0f64;
    let mut failure = None;
    for (k, terms) in rows.iter().enumerate() {
        let n = n0 + 1 + k as i32;
        let row: Vec<f64> = times
            .iter()
            .map(|&t| {
                terms
                    .iter()
                    .fold(Neumaier::default(), |mut acc, &(c, rate)| {
                        acc.add(c * (-rate * t).exp());
                        acc
                    })
                    .sum()
            })
            .collect();
        for (&t, &v) in times.iter().zip(&row) {
            let w = (theta2 * n as f64).exp2() * v * (nu * t).exp() / scale;
            if !(w > 0.0 && w.is_finite()) && failure.is_none() {
                failure = Some((n, t));
            }
            c1 = c1.min(w);
            if t > 0.0 {
                c2 = c2.max(w * t.powf(theta2 / model.beta));
            }
        }
        values.push(row);
    }
    // the weighted solution must not outgrow e^(-nu t): slowest cascade rate above nu
    let slowest = (1..=depth).map(|k| (1.0 - delta1) * model.gamma(((n0 + k) as f64).exp2()) / 4.0).fold(f64::INFINITY, f64::min);
    if slowest <= nu && failure.is_none() {
        failure = Some((n0 + 1, *times.last().unwrap_or(&0.0)));
    }
    let holds = failure.is_none() && c1 > 0.0 && c2.is_finite() && c1 <= c2.max(c1);
    Ok(HatQ { n0, times: times.to_vec(), values, theta2, c1, c2, holds, failure })
}

/// Exponential-sum coefficients per row.
fn hatq_terms(model: &KernelModel<f64>, n0: i32, depth: i32, q0: f64, delta1: f64, nu: f64) -> Result<Vec<Vec<(f64, f64)>>> {
    let mut prev: Vec<(f64, f64)> = vec![(q0, nu)];
    let mut rows = Vec::with_capacity(depth as usize);
    for k in 1..=depth {
        let n = n0 + k;
        let g = model.gamma((n as f64).exp2()) / 4.0;
        let lam = (1.0 - delta1) * g;
        let b = 0.5 * (1.0 + delta1) * g;
        let mut terms = Vec::with_capacity(prev.len() + 1);
        let mut sum = 0.0;
        for &(c, rate) in &prev {
            let d = lam - rate;
            if d.abs() < 1e-12 * lam {
                return Err(PeakError::Domain(format!("resonant rate at n = {n}")));
            }
            let a = b * c / d;
            sum += a;
            terms.push((a, rate));
        }
        terms.push((q0 - sum, lam));
        rows.push(terms.clone());
        prev = terms;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn win(lo: i32, hi: i32) -> IndexWindow {
        IndexWindow::new(lo, hi).unwrap()
    }

    fn coeffs() -> SigmaCoeffs {
        SigmaCoeffs::constant_shift(&KernelModel::default_canonical(), 1.0, 0.0, win(-12, 8)).unwrap()
    }

    #[test]
    fn norms_and_derivatives() {
        let w = win(-4, 4);
        let y = WeightedSeq::from_fn(w, 1.0, |n| n as f64);
        // left sup of 2^n |n| is 2^-1, right sup of 2^n n is 64
        assert!((y.norm() - (0.5 + 64.0)).abs() < 1e-12);
        let d = discrete_derivative(&y, Side::Plus);
        assert!(d.values[..8].iter().all(|&v| v == 1.0));
        let c = WeightedSeq::from_fn(w, 0.0, |_| 3.0);
        assert!(discrete_derivative(&c, Side::Plus).values.iter().all(|&v| v == 0.0));
        let z = WeightedSeq::from_fn(w, 0.0, |n| (n * n) as f64);
        let dp = discrete_derivative(&z, Side::Plus);
        let dm = discrete_derivative(&z, Side::Minus);
        for i in 0..8 {
            assert_eq!(dm.values[i + 1], dp.values[i]);
        }
    }

    #[test]
    fn constants_are_in_the_kernel() {
        let c = coeffs();
        let y = WeightedSeq::from_fn(c.window, 0.0, |_| 2.5);
        let ly = apply_l(&c, &y, 0.0).unwrap();
        assert!(ly.values.iter().all(|&v| v == 0.0));
        let half = coeffs().scaled(0.5);
        assert!(apply_l(&half, &y, 0.0).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_site_bump() {
        let c = coeffs();
        let (r, s) = c.at(0.0).unwrap();
        let n0 = 0;
        let i = c.window.idx(n0);
        let y = WeightedSeq::from_fn(c.window, 0.0, |n| if n == n0 { 1.0 } else { 0.0 });
        let ly = apply_l(&c, &y, 0.0).unwrap();
        for (j, &v) in ly.values.iter().enumerate() {
            let expected = if j == i {
                -r[i] * (1.0 + s[i])
            } else if j == i + 1 {
                r[i + 1]
            } else if j + 1 == i {
                r[i - 1] * s[i - 1]
            } else {
                0.0
            };
            assert_eq!(v, expected, "j={j}");
        }
    }

    #[test]
    fn sigma_limits() {
        let c = SigmaCoeffs::constant_shift(&KernelModel::default_canonical(), 1.0, 0.0, win(-30, 8)).unwrap();
        let (_, s) = c.at(0.0).unwrap();
        assert!((s[0] - 8.0).abs() < 1e-6, "{}", s[0]);
        assert!(s[s.len() - 2] < 1e-20);
        assert_eq!(s[s.len() - 1], 0.0);
    }

    #[test]
    fn evolution_keeps_constants_and_truncation() {
        let c = coeffs();
        let y0 = WeightedSeq::from_fn(c.window, 0.0, |_| -1.5);
        let y = evolve_t(&c, &y0, 0.0, 3.0, 1e-9).unwrap();
        assert!(y.values.iter().all(|&v| (v + 1.5).abs() < 1e-12));
        let tr = coeffs().truncated(4).unwrap();
        let y0 = WeightedSeq::from_fn(tr.window, 0.0, |n| (n as f64 * 0.9).sin());
        let y = evolve_t(&tr, &y0, 0.0, 2.0, 1e-9).unwrap();
        for n in 5..=8 {
            assert_eq!(y.get(n), 0.0);
        }
    }

    #[test]
    fn time_dependent_coefficients_with_constant_path_match_frozen() {
        let model = KernelModel::default_canonical();
        let w = win(-12, 8);
        let td = SigmaCoeffs::time_dependent(&model, 1.0, w, move |_| ShiftSequence::constant(w, 0.0));
        let fr = coeffs();
        let y0 = WeightedSeq::from_fn(w, 0.0, |n| (n as f64).cos());
        let a = evolve_t(&td, &y0, 0.0, 1.0, 1e-9).unwrap();
        let b = evolve_t(&fr, &y0, 0.0, 1.0, 1e-9).unwrap();
        for i in 0..a.values.len() {
            assert!((a.values[i] - b.values[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn decay_fits_recover_synthetic_parameters() {
        let t: Vec<f64> = (0..60).map(|i| 0.5 + 0.1 * i as f64).collect();
        let v: Vec<f64> = t.iter().map(|&t| 3.0 * (-0.7 * t).exp()).collect();
        let f = fit_decay(&t, &v, Envelope::PowerExp, 0.5).unwrap();
        assert!((f.c - 3.0).abs() < 1e-8 && f.a.abs() < 1e-8 && (f.nu - 0.7).abs() < 1e-8);
        let v: Vec<f64> = t.iter().map(|&t| t.powf(-0.5) * (-t).exp()).collect();
        let f = fit_decay(&t, &v, Envelope::PowerExp, 0.5).unwrap();
        assert!((f.a - 0.5).abs() < 1e-6 && (f.nu - 1.0).abs() < 1e-6);
        assert!(fit_decay(&t[..10], &v[..10], Envelope::Exp, 0.0).is_err());
        let mut bad = v.clone();
        bad[30] = 0.0;
        assert!(fit_decay(&t, &bad, Envelope::Exp, 0.0).is_err());
    }

    #[test]
    fn psi_closed_forms() {
        let beta = 1.5;
        for ell in 0..3 {
            let a = (beta * ell as f64).exp2() / 4.0;
            let b = (beta * (ell + 1) as f64).exp2() / 4.0;
            for &t in &[0.0, 0.1, 1.0, 3.0] {
                assert!((fundamental_psi(beta, ell, ell, t) - (-a * t).exp()).abs() < 1e-14);
                let two = b / (b - a) * ((-a * t).exp() - (-b * t).exp());
                assert!((fundamental_psi(beta, ell, ell + 1, t) - two).abs() < 1e-12);
            }
        }
        assert_eq!(fundamental_psi(beta, 2, 1, 1.0), 0.0);
        assert_eq!(fundamental_psi(beta, 1, 1, 0.0), 1.0);
        assert!(fundamental_psi(beta, 1, 4, 0.0).abs() < 1e-12);
    }

    #[test]
    fn psi_normalisation_closed_form() {
        for ell in 0..=4 {
            for n in ell..=ell + 6 {
                assert!((psi_mass(1.5, ell, n) - 1.0).abs() < 1e-10, "ell={ell} n={n}");
            }
        }
    }

    #[test]
    fn psi_matches_direct_integration() {
        // explicit Euler on the cascade with a tiny step as oracle
        let beta = 1.5;
        let ell = 0;
        let depth = 4;
        let dt = 1e-6;
        let mut y = vec![0.0; depth + 1];
        y[0] = 1.0;
        let rates: Vec<f64> = (0..=depth).map(|m| (beta * m as f64).exp2() / 4.0).collect();
        let steps = 500_000;
        for _ in 0..steps {
            let old = y.clone();
            // RK2 midpoint
            let f = |v: &[f64]| -> Vec<f64> {
                (0..v.len()).map(|i| rates[i] * (if i == 0 { 0.0 } else { v[i - 1] } - v[i])).collect()
            };
            let k1 = f(&old);
            let mid: Vec<f64> = old.iter().zip(&k1).map(|(a, b)| a + 0.5 * dt * b).collect();
            let k2 = f(&mid);
            for i in 0..y.len() {
                y[i] = old[i] + dt * k2[i];
            }
        }
        let t = steps as f64 * dt;
        for n in 0..=depth {
            assert!((fundamental_psi(beta, ell, n as i32, t) - y[n]).abs() < 1e-9, "n={n}");
        }
    }

    #[test]
    fn hatq_boundary_and_initial_rows() {
        let model = KernelModel::default_canonical();
        let times: Vec<f64> = (0..50).map(|i| 0.2 * i as f64).collect();
        let h = hatq_supersolution(&model, 0, 10, 0.05, 0.1, 0.3, 0.8, &times).unwrap();
        let q0 = 4.0 * 0.05f64.powf(1.5);
        for row in &h.values {
            assert!((row[0] - q0).abs() < 1e-12 * q0);
        }
        assert!(h.holds, "{:?}", h.failure);
        assert!(h.c1 > 0.0 && h.c2 < f64::INFINITY);
    }

    #[test]
    fn hatq_matches_fine_step_integration() {
        let model = KernelModel::default_canonical();
        let (n0, depth, d0, d1, nu) = (-1, 5, 0.05, 0.2, 0.35);
        let q0 = 4.0 * f64::powf(d0, 1.5);
        let h = hatq_supersolution(&model, n0, depth, d0, d1, nu, 0.8, &[0.0, 0.5, 2.0]).unwrap();
        let g: Vec<f64> = (1..=depth).map(|k| model.gamma(((n0 + k) as f64).exp2()) / 4.0).collect();
        let f = |t: f64, v: &[f64]| -> Vec<f64> {
            (0..v.len())
                .map(|i| {
                    let below = if i == 0 { q0 * (-nu * t).exp() } else { v[i - 1] };
                    g[i] * (0.5 * (1.0 + d1) * below - (1.0 - d1) * v[i])
                })
                .collect()
        };
        let mut v = vec![q0; depth as usize];
        let dt = 2e-5;
        let mut t = 0.0;
        let check = |t: f64, v: &[f64], j: usize| {
            if (t - h.times[j]).abs() < 1e-9 {
                for i in 0..v.len() {
                    assert!((v[i] - h.values[i][j]).abs() < 1e-8, "row {i} t {t}");
                }
            }
        };
        for step in 0..100_000 {
            let k1 = f(t, &v);
            let a: Vec<f64> = v.iter().zip(&k1).map(|(x, k)| x + 0.5 * dt * k).collect();
            let k2 = f(t + 0.5 * dt, &a);
            let b: Vec<f64> = v.iter().zip(&k2).map(|(x, k)| x + 0.5 * dt * k).collect();
            let k3 = f(t + 0.5 * dt, &b);
            let c: Vec<f64> = v.iter().zip(&k3).map(|(x, k)| x + dt * k).collect();
            let k4 = f(t + dt, &c);
            for i in 0..v.len() {
                v[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            t = (step + 1) as f64 * dt;
            check(t, &v, 1);
            check(t, &v, 2);
        }
    }

    #[test]
    fn poincare_quotient_basics() {
        let model = KernelModel::default_canonical();
        let p = ShiftSequence::constant(win(-20, 8), 0.0);
        let prof = m_bar(&model, 1.0, &p).unwrap();
        let c = WeightedSeq::from_fn(prof.window(), 0.0, |_| 4.0);
        assert_eq!(poincare_rayleigh(&model, &prof, &c).unwrap(), 0.0);
        let bump = WeightedSeq::from_fn(prof.window(), 0.0, |n| if n == 0 { 1.0 } else { 0.0 });
        let r = poincare_rayleigh(&model, &prof, &bump).unwrap();
        assert!(r > 0.0 && r.is_finite());
        let w = PoincareWeights::new(&model, &prof);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let est = poincare_constant(&w, 200, &mut rng);
        assert!(est.sample_sup <= est.c0 * (1.0 + 1e-12));
        assert!((est.c0 / est.exact - 1.0).abs() < 1e-6, "{est:?}");
        let ext = w.extremal();
        assert!((w.ratio(&ext) / est.exact - 1.0).abs() < 1e-8);
    }
}
