//! Stationary peak coefficients.
//!
//! For a shift sequence `p` the profile `m_bar_n(A, p)` solves
//! `m_bar_{n+1} = zeta_n(p) m_bar_n^2` and is bounded as `n -> -inf`. With the
//! reduced variables `mu_bar_n = zeta_n m_bar_n / 2` this becomes
//! `mu_bar_{n+1} = theta_n mu_bar_n^2` with the explicit solution
//! `mu_bar_n = exp(-A 2^n - S_n)`, `S_n = sum_{j>n} 2^(n-j) ln theta_{j-1}`.
//! A constant shift `p = rho` gives the coefficients `a_n(A, rho)` of the
//! stationary Dirac combs.
//!
//! Everything is stored as logarithms: `m_bar_n` decays like `exp(-A 2^n)`.

use crate::kernels::KernelModel;
use crate::{PeakError, Real, Result};

/// Number of explicit series terms evaluated past the right end of a window.
pub const TAIL_TERMS: usize = 64;

/// Finite stand-in for the index set `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexWindow {
    pub n_lo: i32,
    pub n_hi: i32,
}

impl IndexWindow {
    pub fn new(n_lo: i32, n_hi: i32) -> Result<Self> {
        if !(n_lo < 0 && n_hi > 0 && n_hi - n_lo >= 8) {
            return Err(PeakError::Parameter(format!(
                "window [{n_lo}, {n_hi}] must satisfy n_lo < 0 < n_hi and n_hi - n_lo >= 8"
            )));
        }
        Ok(Self { n_lo, n_hi })
    }

    pub fn len(&self) -> usize {
        (self.n_hi - self.n_lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, n: i32) -> bool {
        n >= self.n_lo && n <= self.n_hi
    }

    /// Position of `n` in per-index vectors.
    pub fn idx(&self, n: i32) -> usize {
        debug_assert!(self.contains(n), "index {n} outside window");
        (n - self.n_lo) as usize
    }

    pub fn indices(&self) -> impl Iterator<Item = i32> + Clone {
        self.n_lo..=self.n_hi
    }
}

/// Per-peak offsets `p_n` with constant extensions outside the window.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSequence<T> {
    pub window: IndexWindow,
    pub p: Vec<T>,
    /// Value used for `n > n_hi`.
    pub p_inf: T,
    /// Value used for `n < n_lo`.
    pub p_lo_ext: T,
}

impl<T: Real> ShiftSequence<T> {
    pub fn new(window: IndexWindow, p: Vec<T>, p_inf: T, p_lo_ext: T) -> Result<Self> {
        if p.len() != window.len() {
            return Err(PeakError::Parameter(format!(
                "shift sequence has {} entries for a window of {}",
                p.len(),
                window.len()
            )));
        }
        if !(p.iter().all(|v| v.is_finite()) && p_inf.is_finite() && p_lo_ext.is_finite()) {
            return Err(PeakError::Parameter("shifts must be finite".into()));
        }
        Ok(Self { window, p, p_inf, p_lo_ext })
    }

    /// `p_n = rho` for every `n`.
    pub fn constant(window: IndexWindow, rho: T) -> Self {
        Self { window, p: vec![rho; window.len()], p_inf: rho, p_lo_ext: rho }
    }

    pub fn get(&self, n: i32) -> T {
        if n > self.window.n_hi {
            self.p_inf
        } else if n < self.window.n_lo {
            self.p_lo_ext
        } else {
            self.p[self.window.idx(n)]
        }
    }

    /// Some `rho` if every entry, including both extensions, equals it.
    pub fn constant_value(&self) -> Option<T> {
        let rho = self.p_inf;
        (self.p_lo_ext == rho && self.p.iter().all(|&v| v == rho)).then_some(rho)
    }

    /// Checks `|p_n| <= delta0 < (1 - epsilon0)/2`.
    pub fn check_admissible(&self, model: &KernelModel<T>, delta0: T) -> Result<()> {
        let half = T::lit(0.5);
        if !(delta0 > T::zero() && delta0 < half * (T::one() - model.epsilon0)) {
            return Err(PeakError::Parameter(format!(
                "delta0 = {delta0} must lie in (0, (1 - epsilon0)/2)"
            )));
        }
        let worst = self
            .p
            .iter()
            .chain([self.p_inf, self.p_lo_ext].iter())
            .fold(T::zero(), |acc, v| acc.max(v.abs()));
        if worst > delta0 {
            return Err(PeakError::Parameter(format!("shift {worst} exceeds delta0 = {delta0}")));
        }
        Ok(())
    }
}

/// `ln zeta_n(p)`.
pub fn ln_zeta<T: Real>(model: &KernelModel<T>, n: i32, p: &ShiftSequence<T>) -> T {
    let x = T::lit(n as f64) + p.get(n);
    let x1 = T::lit((n + 1) as f64) + p.get(n + 1);
    T::LN_2().ln() - x * T::LN_2() + model.ln_k_log2(x) - model.ln_gamma_log2(x1)
}

/// `zeta_n(p) = ln2 k(2^(n+p_n)) / (2^(n+p_n) gamma(2^(n+1+p_{n+1})))`.
pub fn zeta<T: Real>(model: &KernelModel<T>, n: i32, p: &ShiftSequence<T>) -> Result<T> {
    finite_exp(ln_zeta(model, n, p), "zeta")
}

/// `ln theta_n(p)`.
pub fn ln_theta<T: Real>(model: &KernelModel<T>, n: i32, p: &ShiftSequence<T>) -> T {
    T::LN_2() + ln_zeta(model, n + 1, p) - ln_zeta(model, n, p)
}

/// `theta_n(p) = 2 zeta_{n+1}(p) / zeta_n(p)`.
pub fn theta<T: Real>(model: &KernelModel<T>, n: i32, p: &ShiftSequence<T>) -> Result<T> {
    finite_exp(ln_theta(model, n, p), "theta")
}

fn finite_exp<T: Real>(v: T, what: &str) -> Result<T> {
    let e = v.exp();
    if e.is_finite() && e > T::zero() {
        Ok(e)
    } else {
        Err(PeakError::Domain(format!("{what} = exp({v}) not representable")))
    }
}

/// `S_n` for every `n` in `[n_from, window.n_hi]`, by backward recursion
/// `S_n = (ln theta_n + S_{n+1}) / 2` started `TAIL_TERMS` past the window,
/// where `ln theta` has settled to its limit.
fn series_tail<T: Real>(model: &KernelModel<T>, p: &ShiftSequence<T>, n_from: i32) -> Result<Vec<T>> {
    let start = p.window.n_hi + TAIL_TERMS as i32;
    let mut s = ln_theta(model, start, p);
    let mut out = vec![T::zero(); (p.window.n_hi - n_from + 1).max(0) as usize];
    let half = T::lit(0.5);
    for n in (n_from..start).rev() {
        let lt = ln_theta(model, n, p);
        if !lt.is_finite() {
            return Err(PeakError::Construction(format!("ln theta_{n} not finite")));
        }
        s = half * (lt + s);
        if n <= p.window.n_hi {
            out[(n - n_from) as usize] = s;
        }
    }
    Ok(out)
}

/// `mu_bar_n(A, p)` for a single index.
pub fn mu_bar<T: Real>(model: &KernelModel<T>, a: T, p: &ShiftSequence<T>, n: i32) -> Result<T> {
    check_a(a)?;
    if n > p.window.n_hi {
        return Err(PeakError::Domain(format!("index {n} beyond the window")));
    }
    let s = series_tail(model, p, n)?[0];
    Ok((-(a * T::pow2(T::lit(n as f64))) - s).exp())
}

fn check_a<T: Real>(a: T) -> Result<()> {
    if a > T::zero() && a.is_finite() {
        Ok(())
    } else {
        Err(PeakError::Domain(format!("A = {a} must be positive and finite")))
    }
}

/// Coefficients `m_bar_n(A, p)` on a window.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryProfile<T> {
    pub a: T,
    pub shift: ShiftSequence<T>,
    pub ln_m_bar: Vec<T>,
    pub ln_mu_bar: Vec<T>,
    pub ln_zeta: Vec<T>,
    /// Series terms evaluated explicitly past `n_hi`.
    pub tail_terms: usize,
}

/// Logarithms below this are reported as underflow.
fn ln_underflow<T: Real>() -> T {
    T::min_positive_value().ln().max(T::lit(1e-300f64.ln()))
}

impl<T: Real> StationaryProfile<T> {
    pub fn window(&self) -> IndexWindow {
        self.shift.window
    }

    /// `m_bar_n`, flushed to the smallest positive normal value on underflow.
    pub fn m_bar(&self, n: i32) -> T {
        let l = self.ln_m_bar[self.window().idx(n)];
        if l < ln_underflow::<T>() {
            T::min_positive_value()
        } else {
            l.exp()
        }
    }

    pub fn ln_m_bar_at(&self, n: i32) -> T {
        self.ln_m_bar[self.window().idx(n)]
    }

    pub fn is_underflow(&self, n: i32) -> bool {
        self.ln_m_bar_at(n) < ln_underflow::<T>()
    }

    pub fn mu_bar(&self, n: i32) -> T {
        self.ln_mu_bar[self.window().idx(n)].exp()
    }

    pub fn zeta(&self, n: i32) -> T {
        self.ln_zeta[self.window().idx(n)].exp()
    }

    /// Mass carried by peak `n`, `2^(n+p_n) m_bar_n`.
    pub fn peak_mass(&self, n: i32) -> T {
        let x = T::lit(n as f64) + self.shift.get(n);
        (x * T::LN_2() + self.ln_m_bar_at(n)).exp()
    }

    /// Largest `|1 - zeta_n m_bar_n^2 / m_bar_{n+1}|` over the window.
    pub fn recurrence_residual(&self) -> T {
        let w = self.window();
        (w.n_lo..w.n_hi)
            .map(|n| {
                let i = w.idx(n);
                let l = self.ln_zeta[i] + T::lit(2.0) * self.ln_m_bar[i] - self.ln_m_bar[i + 1];
                l.exp_m1().abs()
            })
            .fold(T::zero(), T::max)
    }

    /// Largest `|1 - theta_n mu_bar_n^2 / mu_bar_{n+1}|` over the window.
    pub fn mu_recurrence_residual(&self, model: &KernelModel<T>) -> T {
        let w = self.window();
        (w.n_lo..w.n_hi)
            .map(|n| {
                let i = w.idx(n);
                let l = ln_theta(model, n, &self.shift) + T::lit(2.0) * self.ln_mu_bar[i]
                    - self.ln_mu_bar[i + 1];
                l.exp_m1().abs()
            })
            .fold(T::zero(), T::max)
    }

    /// `d m_bar_n / dA = -2^n m_bar_n`.
    pub fn d_mbar_da(&self, n: i32) -> T {
        -T::pow2(T::lit(n as f64)) * self.m_bar(n)
    }

    /// `(d m_bar_n / d p_k) / m_bar_n`.
    pub fn dln_mbar_dpk(&self, model: &KernelModel<T>, n: i32, k: i32) -> T {
        if k < n {
            return T::zero();
        }
        let xk = T::lit(k as f64) + self.shift.get(k);
        let half = T::lit(0.5);
        let w = T::pow2(T::lit((n - k) as f64));
        let k_term = -half * w * T::LN_2() * (model.k_elasticity_log2(xk) - T::one());
        if k == n {
            k_term
        } else {
            k_term + w * T::LN_2() * model.gamma_elasticity_log2(xk)
        }
    }

    /// `d m_bar_n / d p_k`.
    pub fn d_mbar_dpk(&self, model: &KernelModel<T>, n: i32, k: i32) -> T {
        self.dln_mbar_dpk(model, n, k) * self.m_bar(n)
    }

    /// Mass of the peaks inside the window, without tail corrections.
    pub fn windowed_mass(&self) -> T {
        self.window().indices().map(|n| self.peak_mass(n)).sum()
    }
}

/// Builds `m_bar(A, p)` on the window of `p`.
pub fn m_bar<T: Real>(model: &KernelModel<T>, a: T, p: &ShiftSequence<T>) -> Result<StationaryProfile<T>> {
    check_a(a)?;
    let w = p.window;
    let s = series_tail(model, p, w.n_lo)?;
    let mut ln_m = Vec::with_capacity(w.len());
    let mut ln_mu = Vec::with_capacity(w.len());
    let mut ln_z = Vec::with_capacity(w.len());
    for n in w.indices() {
        let lz = ln_zeta(model, n, p);
        let lmu = -(a * T::pow2(T::lit(n as f64))) - s[w.idx(n)];
        let lm = T::LN_2() + lmu - lz;
        if !(lz.is_finite() && lm.is_finite()) {
            return Err(PeakError::Construction(format!("non-finite coefficient at n = {n}")));
        }
        ln_z.push(lz);
        ln_mu.push(lmu);
        ln_m.push(lm);
    }
    Ok(StationaryProfile {
        a,
        shift: p.clone(),
        ln_m_bar: ln_m,
        ln_mu_bar: ln_mu,
        ln_zeta: ln_z,
        tail_terms: TAIL_TERMS,
    })
}

/// Coefficients `a_n(A, rho)` of the stationary comb with constant shift.
pub fn a_coeffs<T: Real>(
    model: &KernelModel<T>,
    a: T,
    rho: T,
    window: IndexWindow,
) -> Result<StationaryProfile<T>> {
    m_bar(model, a, &ShiftSequence::constant(window, rho))
}

/// Left asymptote `a_n ~ a_minus_inf 2^n`.
pub fn a_minus_inf<T: Real>(model: &KernelModel<T>, rho: T) -> T {
    model.gamma0 * T::pow2(rho + T::one()) / (model.k0 * T::LN_2())
}

/// `ln a_inf` of the right asymptote
/// `a_n ~ a_inf 2^((beta-alpha) n) exp(-A 2^n)`.
pub fn ln_a_inf<T: Real>(model: &KernelModel<T>, rho: T) -> T {
    let d = model.beta - model.alpha;
    (model.beta + d * (rho + T::one())) * T::LN_2() - T::LN_2().ln()
}

/// Relative size of the mass outside the window that is tolerated.
pub const MASS_TAIL_TOL: f64 = 1e-12;

/// `M(A, rho) = sum_n 2^(n+rho) a_n(A, rho)` including the tails outside the
/// window, which must stay below `MASS_TAIL_TOL` relative.
pub fn total_mass<T: Real>(profile: &StationaryProfile<T>) -> Result<T> {
    if profile.shift.constant_value().is_none() {
        return Err(PeakError::Parameter("total mass needs a constant shift".into()));
    }
    let w = profile.window();
    let inner = profile.windowed_mass();
    // left: a_n ~ a_{n_lo} 2^(n - n_lo), so the terms shrink by 4 per step
    let left = profile.peak_mass(w.n_lo) / T::lit(3.0);
    // right: consecutive terms shrink by 4 mu_bar_n, and mu_bar keeps decreasing
    let ratio = T::lit(4.0) * profile.mu_bar(w.n_hi);
    let right = if ratio < T::lit(0.5) {
        profile.peak_mass(w.n_hi) * ratio / (T::one() - ratio)
    } else {
        T::infinity()
    };
    let tails = left + right;
    if !(tails <= T::lit(MASS_TAIL_TOL) * inner) {
        return Err(PeakError::WindowTooSmall(format!(
            "mass outside [{}, {}] estimated at {} of {}",
            w.n_lo, w.n_hi, tails, inner
        )));
    }
    Ok(inner + tails)
}

/// Window large enough for [`total_mass`] at the given `A`.
pub fn mass_window<T: Real>(a: T) -> IndexWindow {
    let reach = (T::lit(100.0) / a).log2().ceil().as_f64() as i32 + 2;
    // the bulk of the mass sits near 2^n ~ 1/A
    let bulk = -(a.log2().ceil().as_f64() as i32);
    IndexWindow { n_lo: (bulk - 30).min(-40), n_hi: reach.max(8) }
}

/// `M(A, rho)` on an automatically sized window.
pub fn mass_of<T: Real>(model: &KernelModel<T>, a: T, rho: T) -> Result<T> {
    let prof = a_coeffs(model, a, rho, mass_window(a))?;
    total_mass(&prof)
}

/// The unique `A` with `M(A, rho) = mass`, by bisection in `ln A` over
/// `[1e-8, 1e8]`.
pub fn solve_a_for_mass<T: Real>(model: &KernelModel<T>, mass: T, rho: T) -> Result<T> {
    solve_a_for_mass_in(model, mass, rho, T::lit(1e-8), T::lit(1e8))
}

/// As [`solve_a_for_mass`] with an explicit bracket.
pub fn solve_a_for_mass_in<T: Real>(model: &KernelModel<T>, mass: T, rho: T, lo: T, hi: T) -> Result<T> {
    if !(mass > T::zero() && mass.is_finite()) {
        return Err(PeakError::Domain(format!("mass {mass} must be positive")));
    }
    if !(rho.abs() < T::one()) {
        return Err(PeakError::Domain(format!("rho = {rho} outside (-1, 1)")));
    }
    if !(lo > T::zero() && hi > lo) {
        return Err(PeakError::Bracketing(format!("bad bracket [{lo}, {hi}]")));
    }
    let f = |a: T| -> Result<T> { Ok(mass_of(model, a, rho)?.ln() - mass.ln()) };
    let (mut l, mut h) = (lo.ln(), hi.ln());
    let fl = f(lo)?;
    let fh = f(hi)?;
    // M decreases in A
    if !(fl >= T::zero() && fh <= T::zero()) {
        return Err(PeakError::Bracketing(format!(
            "mass {mass} not attained for A in [{lo}, {hi}]"
        )));
    }
    let tol = T::lit(1e-13).max(T::epsilon() * T::lit(4.0));
    for _ in 0..400 {
        let mid = T::lit(0.5) * (l + h);
        let fm = f(mid.exp())?;
        if fm == T::zero() {
            return Ok(mid.exp());
        }
        if fm > T::zero() {
            l = mid;
        } else {
            h = mid;
        }
        if h - l < tol {
            break;
        }
    }
    Ok((T::lit(0.5) * (l + h)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn model() -> KernelModel<f64> {
        KernelModel::default_canonical()
    }

    fn win(lo: i32, hi: i32) -> IndexWindow {
        IndexWindow::new(lo, hi).unwrap()
    }

    #[test]
    fn window_invariants() {
        assert!(IndexWindow::new(-3, 3).is_err());
        assert!(IndexWindow::new(1, 12).is_err());
        assert_eq!(win(-4, 4).len(), 9);
    }

    #[test]
    fn zeta_values() {
        let m = model();
        let p = ShiftSequence::constant(win(-10, 10), 0.0);
        // ln2 k(1) / gamma(2) with k(1) = 2, gamma(2) = 1 + 2 sqrt 2
        let expected = 2f64.ln() * 2.0 / (1.0 + 2.0 * 2f64.sqrt());
        assert_relative_eq!(zeta(&m, 0, &p).unwrap(), expected, max_relative = 1e-14);
        assert_relative_eq!(zeta(&m, 0, &p).unwrap(), 0.362_105, max_relative = 1e-5);
        let far = zeta(&m, -40, &p).unwrap() * 2f64.powi(-40);
        assert_relative_eq!(far, 2f64.ln(), max_relative = 1e-10);
    }

    #[test]
    fn flat_kernel_coefficients() {
        let m = KernelModel::<f64>::flat(1.5, 0.5, 0.25).unwrap();
        let p = ShiftSequence::constant(win(-10, 10), 0.0);
        for n in -10..10 {
            let z = zeta(&m, n, &p).unwrap();
            assert_relative_eq!(z, 2f64.ln() * 1.5 / (0.5 * 2f64.powi(n)), max_relative = 1e-14);
            // the zeta ratio gives 2 * 2^-1 = 1 for flat kernels
            assert_relative_eq!(theta(&m, n, &p).unwrap(), 1.0, max_relative = 1e-14);
        }
        let a = 0.7;
        let prof = m_bar(&m, a, &p).unwrap();
        for n in -10..=10 {
            assert_relative_eq!(prof.mu_bar(n), (-a * 2f64.powi(n)).exp(), max_relative = 1e-13);
        }
        assert!(prof.mu_recurrence_residual(&m) < 1e-12);
    }

    #[test]
    fn theta_limits() {
        let m = model();
        let p = ShiftSequence::new(
            win(-60, 60),
            (-60..=60).map(|n: i32| 0.02 * ((n as f64) * 0.7).sin()).collect(),
            0.0,
            0.0,
        )
        .unwrap();
        let n = -55;
        let lim = 2f64.powf(p.get(n) - p.get(n + 1));
        assert_relative_eq!(theta(&m, n, &p).unwrap(), lim, max_relative = 1e-9);
        let n = 55;
        let lim = 2f64.powf(m.alpha - m.beta + 1.0)
            * 2f64.powf(m.alpha * (p.get(n + 1) - p.get(n)))
            * 2f64.powf(-m.beta * (p.get(n + 2) - p.get(n + 1)));
        assert_relative_eq!(theta(&m, n, &p).unwrap(), lim, max_relative = 1e-9);
    }

    /// Direct forward summation of the series with plain powers and a
    /// compensated sum, independent of the log-space recursion.
    fn mu_bar_oracle(m: &KernelModel<f64>, a: f64, rho: f64, n: i32, terms: i32) -> f64 {
        let zeta_direct = |j: i32| {
            let xi = 2f64.powf(j as f64 + rho);
            let xi1 = 2f64.powf((j + 1) as f64 + rho);
            2f64.ln() * m.k(xi) / (xi * m.gamma(xi1))
        };
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for j in (n + 1)..=(n + terms) {
            let lt = (2.0 * zeta_direct(j) / zeta_direct(j - 1)).ln();
            let term = 2f64.powi(n - j) * lt;
            let y = term - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        (-a * 2f64.powi(n) - sum).exp()
    }

    #[test]
    fn mu_bar_against_series_oracle() {
        let m = model();
        let p = ShiftSequence::constant(win(-20, 12), 0.0);
        let v = mu_bar(&m, 1.0, &p, -5).unwrap();
        assert_relative_eq!(v, mu_bar_oracle(&m, 1.0, 0.0, -5, 60), max_relative = 1e-12);
        let p = ShiftSequence::constant(win(-20, 12), 0.3);
        let prof = m_bar(&m, 3.0, &p).unwrap();
        assert_relative_eq!(prof.mu_bar(2), mu_bar_oracle(&m, 3.0, 0.3, 2, 60), max_relative = 1e-12);
    }

    #[test]
    fn recurrence_on_acceptance_grid() {
        let m = model();
        for &a in &[1.0, 3.0] {
            for &rho in &[0.0, 0.3] {
                let prof = a_coeffs(&m, a, rho, win(-20, 12)).unwrap();
                assert!(prof.recurrence_residual() < 1e-10);
                assert!(prof.mu_recurrence_residual(&m) < 1e-10);
                for n in -20..=12 {
                    let i = prof.window().idx(n);
                    let lhs = prof.ln_mu_bar[i];
                    let rhs = prof.ln_zeta[i] + prof.ln_m_bar[i] - 2f64.ln();
                    assert!((lhs - rhs).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn asymptotes() {
        let m = model();
        for &rho in &[0.0, 0.3] {
            let prof = a_coeffs(&m, 1.0, rho, win(-15, 12)).unwrap();
            let r = prof.m_bar(-15) / (a_minus_inf(&m, rho) * 2f64.powi(-15));
            assert!((0.99..=1.01).contains(&r), "left ratio {r}");
            let tail = |n: i32| prof.ln_m_bar_at(n) + 2f64.powi(n) - (m.beta - m.alpha) * n as f64 * 2f64.ln();
            for n in 9..12 {
                assert!((tail(n + 1) - tail(n)).abs() < 1e-3);
            }
            assert!((tail(12) - ln_a_inf(&m, rho)).abs() < 1e-3);
            assert!(prof.is_underflow(12));
        }
    }

    #[test]
    fn derivative_in_a_matches_finite_difference() {
        let m = model();
        let p = ShiftSequence::constant(win(-10, 6), 0.1);
        let a = 0.8;
        let h = 1e-6 * a;
        let prof = m_bar(&m, a, &p).unwrap();
        let up = m_bar(&m, a + h, &p).unwrap();
        let dn = m_bar(&m, a - h, &p).unwrap();
        for n in -10..=6 {
            let fd = (up.m_bar(n) - dn.m_bar(n)) / (2.0 * h);
            assert_relative_eq!(prof.d_mbar_da(n), fd, max_relative = 1e-6);
            assert!(prof.d_mbar_da(n) < 0.0);
        }
    }

    #[test]
    fn derivative_in_shift_matches_finite_difference() {
        let m = model();
        let w = win(-8, 8);
        let base: Vec<f64> = w.indices().map(|n| 0.03 * ((n as f64) * 1.3).cos()).collect();
        let p = ShiftSequence::new(w, base.clone(), 0.0, 0.0).unwrap();
        let a = 0.5;
        let prof = m_bar(&m, a, &p).unwrap();
        let h = 1e-6;
        for k in -8..=8 {
            let mut up = base.clone();
            let mut dn = base.clone();
            up[w.idx(k)] += h;
            dn[w.idx(k)] -= h;
            let pu = m_bar(&m, a, &ShiftSequence::new(w, up, 0.0, 0.0).unwrap()).unwrap();
            let pd = m_bar(&m, a, &ShiftSequence::new(w, dn, 0.0, 0.0).unwrap()).unwrap();
            for n in -8..=8 {
                let fd = (pu.ln_m_bar_at(n) - pd.ln_m_bar_at(n)) / (2.0 * h);
                let an = prof.dln_mbar_dpk(&m, n, k);
                if k < n {
                    assert_eq!(an, 0.0);
                }
                assert!((an - fd).abs() <= 1e-6 * an.abs().max(1e-3), "n={n} k={k}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn window_extension_is_stable() {
        let m = model();
        let small = a_coeffs(&m, 1.0, 0.2, win(-10, 8)).unwrap();
        let big = a_coeffs(&m, 1.0, 0.2, win(-20, 14)).unwrap();
        for n in -10..=8 {
            let d = (small.ln_m_bar_at(n) - big.ln_m_bar_at(n)).abs();
            assert!(d < 1e-12, "n = {n}: {d}");
        }
    }

    #[test]
    fn mass_is_stable_under_window_growth() {
        let m = model();
        let a = a_coeffs(&m, 1.0, 0.0, win(-40, 15)).unwrap();
        let b = a_coeffs(&m, 1.0, 0.0, win(-40, 20)).unwrap();
        let ma = total_mass(&a).unwrap();
        let mb = total_mass(&b).unwrap();
        assert_relative_eq!(ma, mb, max_relative = 1e-10);
        assert!(total_mass(&a_coeffs(&m, 1.0, 0.0, win(-40, 3)).unwrap()).is_err());
    }

    #[test]
    fn mass_round_trip() {
        let m = model();
        for &mass in &[0.1, 1.0, 10.0] {
            for &rho in &[0.0, 0.3] {
                let a = solve_a_for_mass(&m, mass, rho).unwrap();
                let back = mass_of(&m, a, rho).unwrap();
                assert!(((back - mass) / mass).abs() < 1e-10);
                let a2 = solve_a_for_mass_in(&m, mass, rho, 1e-4, 1e4).unwrap();
                assert!((a - a2).abs() < 1e-9 * a.max(1.0));
            }
        }
    }

    #[test]
    fn mass_solve_matches_golden_section() {
        let m = model();
        let target = 10.0;
        let a = solve_a_for_mass(&m, target, 0.0).unwrap();
        let obj = |la: f64| (mass_of(&m, la.exp(), 0.0).unwrap().ln() - target.ln()).powi(2);
        let (mut lo, mut hi) = ((1e-8f64).ln(), (1e8f64).ln());
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = hi - g * (hi - lo);
            let d = lo + g * (hi - lo);
            if obj(c) < obj(d) {
                hi = d;
            } else {
                lo = c;
            }
        }
        let golden = (0.5 * (lo + hi)).exp();
        assert_relative_eq!(a, golden, max_relative = 1e-6);
    }

    #[test]
    fn unattainable_mass_is_reported() {
        let m = model();
        assert!(matches!(
            solve_a_for_mass_in(&m, 1.0, 0.0, 10.0, 20.0),
            Err(PeakError::Bracketing(_))
        ));
        assert!(solve_a_for_mass(&m, -1.0, 0.0).is_err());
    }

    #[test]
    fn single_precision_profile() {
        let m = KernelModel::<f32>::default_canonical();
        let prof = a_coeffs(&m, 1.0f32, 0.0, IndexWindow::new(-10, 6).unwrap()).unwrap();
        assert!(prof.recurrence_residual() < 1e-4);
    }
}
