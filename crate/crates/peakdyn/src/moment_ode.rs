//! Moment equations for the peak masses, centres and variances.
//!
//! Every peak exchanges material only with its neighbours: pairs inside
//! peak `n` coagulate into peak `n+1`, and fragments of peak `n+1` land in
//! peak `n`. The equations below track the zeroth, first and second moments
//! of each peak. The intra-peak integrals are closed either at leading order
//! in the variance or by a three-node Gaussian rule.
//!
//! The window is closed like the grid simulation: nothing fragments out of
//! the lowest peak and nothing coagulates out of the top peak `N`.

use crate::grid_sim::GridMeasure;
use crate::kernels::KernelModel;
use crate::ode::{self, Check, OdeOptions, OdeStats, System};
use crate::representation::Decomposition;
use crate::{PeakError, Result};
use nalgebra::DVector;
use std::f64::consts::LN_2;

/// Moments `(m_n, p_n, q_n)` of the peaks `n_lo..=n_top` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub t: f64,
    pub n_lo: i32,
    pub m: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// `false` for peaks whose mass is below the absence threshold.
    pub present: Vec<bool>,
}

impl MomentState {
    pub fn new(t: f64, n_lo: i32, m: Vec<f64>, p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if m.len() != p.len() || m.len() != q.len() || m.is_empty() {
            return Err(PeakError::Parameter("moment sequences differ in length".into()));
        }
        let present = m.iter().map(|&v| v > ABSENT_MASS).collect();
        Ok(Self { t, n_lo, m, p, q, present })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Highest index carried, the truncation index.
    pub fn n_top(&self) -> i32 {
        self.n_lo + self.m.len() as i32 - 1
    }

    pub fn idx(&self, n: i32) -> usize {
        (n - self.n_lo) as usize
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<i32> {
        self.n_lo..=self.n_top()
    }

    /// Total mass `sum 2^(n+p_n) m_n`, exact for point masses.
    pub fn comb_mass(&self) -> f64 {
        self.indices()
            .map(|n| {
                let i = self.idx(n);
                (n as f64 + self.p[i]).exp2() * self.m[i]
            })
            .sum()
    }

    /// Checks the bounds `|p_n| <= delta0` and `0 <= q_n <= 4 delta0^2`.
    pub fn check_bounds(&self, delta0: f64) -> Result<()> {
        for (i, n) in self.indices().enumerate() {
            if !self.m[i].is_finite() || self.m[i] < 0.0 {
                return Err(PeakError::Construction(format!("mass of peak {n} is {}", self.m[i])));
            }
            if !self.present[i] {
                continue;
            }
            if self.p[i].abs() > delta0 {
                return Err(PeakError::Construction(format!("p_{n} = {} outside [-delta0, delta0]", self.p[i])));
            }
            if !(self.q[i] >= 0.0 && self.q[i] <= 4.0 * delta0 * delta0) {
                return Err(PeakError::Construction(format!("q_{n} = {} outside [0, 4 delta0^2]", self.q[i])));
            }
        }
        Ok(())
    }
}

/// Peaks lighter than this are treated as absent.
pub const ABSENT_MASS: f64 = 1e-250;

/// How the intra-peak integrals are closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClosureOptions {
    /// Keep only the terms of leading order in `q`.
    pub drop_oq_terms: bool,
    /// Evaluate the integrals with a Gaussian profile of the same mean and
    /// variance (three-node Gauss-Hermite rule per peak).
    pub oq_gaussian: bool,
}

impl Default for ClosureOptions {
    fn default() -> Self {
        Self::leading_order()
    }
}

impl ClosureOptions {
    pub fn leading_order() -> Self {
        Self { drop_oq_terms: true, oq_gaussian: false }
    }

    pub fn gaussian() -> Self {
        Self { drop_oq_terms: false, oq_gaussian: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.drop_oq_terms == self.oq_gaussian {
            return Err(PeakError::Parameter("exactly one closure must be active".into()));
        }
        Ok(())
    }
}

/// Time derivatives of the moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentRates {
    pub dm: Vec<f64>,
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
}

impl MomentRates {
    /// Largest rate relative to the natural scale of each moment.
    pub fn scaled_norm(&self, state: &MomentState, delta0: f64) -> f64 {
        let mut r = 0.0f64;
        for i in 0..state.len() {
            if state.m[i] > 0.0 {
                r = r.max((self.dm[i] / state.m[i]).abs());
            }
            r = r.max((self.dp[i] / delta0).abs());
            r = r.max((self.dq[i] / (delta0 * delta0)).abs());
        }
        r
    }
}

/// Components `(weight, mean offset, variance)` of an exchange, offsets
/// relative to the integer site of the receiving or emitting peak. Moments
/// are taken about the receiving peak's mean only when the balance is
/// formed, so equal shifts cancel exactly.
#[derive(Debug, Clone, Default)]
struct Flux(Vec<(f64, f64, f64)>);

impl Flux {
    fn add(&mut self, w: f64, u: f64, var: f64) {
        self.0.push((w, u, var));
    }

    /// `(number, first, second)` moments about `centre`.
    fn centred(&self, centre: f64) -> [f64; 3] {
        let mut d = [0.0; 3];
        for &(w, u, v) in &self.0 {
            let du = u - centre;
            d[0] += w;
            d[1] += w * du;
            d[2] += w * (v + du * du);
        }
        d
    }
}

/// Per-peak exchanges.
struct Exchange {
    coag_loss: Flux,
    /// Products, offsets relative to the target peak.
    coag_gain: Flux,
    frag_loss: Flux,
    /// Fragments, offsets relative to the target peak.
    frag_gain: Flux,
}

/// Gauss-Hermite nodes and weights for a unit normal, three points.
const GH_NODES: [f64; 3] = [-1.732_050_807_568_877_2, 0.0, 1.732_050_807_568_877_2];
const GH_WEIGHTS: [f64; 3] = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0];

/// Offset of the product of sizes `2^(n+u)` and `2^(n+v)` relative to `n+1`.
fn product_offset(u: f64, v: f64) -> f64 {
    let hi = u.max(v);
    hi + ((-(u - v).abs() * LN_2).exp().ln_1p() / LN_2 - 1.0)
}

/// Closed moment system on a truncated window.
#[derive(Debug, Clone)]
pub struct MomentModel {
    pub model: KernelModel<f64>,
    pub delta0: f64,
    pub closure: ClosureOptions,
}

/// Integrated trajectory with the variance clipping log.
#[derive(Debug, Clone)]
pub struct MomentTrajectory {
    pub states: Vec<MomentState>,
    /// `(t, n, clipped value)` for every negative variance set to zero.
    pub clipped: Vec<(f64, i32, f64)>,
    pub steps: u64,
    pub rejected: u64,
}

impl MomentModel {
    pub fn new(model: KernelModel<f64>, delta0: f64, closure: ClosureOptions) -> Result<Self> {
        closure.validate()?;
        if !(delta0 > 0.0 && delta0 < 0.5 * (1.0 - model.epsilon0)) {
            return Err(PeakError::Parameter(format!("delta0 = {delta0} outside (0, (1 - epsilon0)/2)")));
        }
        Ok(Self { model, delta0, closure })
    }

    fn exchange(&self, n: i32, m: f64, p: f64, q: f64, coag_on: bool, frag_on: bool) -> Exchange {
        let mut ex = Exchange {
            coag_loss: Flux::default(),
            coag_gain: Flux::default(),
            frag_loss: Flux::default(),
            frag_gain: Flux::default(),
        };
        let x = n as f64;
        if self.closure.drop_oq_terms {
            if coag_on {
                let c = 0.5 * LN_2 * self.model.coag_log(x + p, x + p) * m * m;
                ex.coag_loss.add(2.0 * c, p, q);
                ex.coag_gain.add(c, p, 0.5 * q);
            }
            if frag_on {
                let f = self.model.gamma((x + p).exp2()) * m / 4.0;
                ex.frag_loss.add(f, p, q);
                ex.frag_gain.add(2.0 * f, p, q);
            }
        } else {
            let s = q.max(0.0).sqrt();
            let u: Vec<f64> = GH_NODES.iter().map(|&z| p + s * z).collect();
            if coag_on {
                for a in 0..3 {
                    for b in 0..3 {
                        let r = LN_2 * self.model.coag_log(x + u[a], x + u[b]) * m * m * GH_WEIGHTS[a] * GH_WEIGHTS[b];
                        ex.coag_loss.add(r, u[a], 0.0);
                        ex.coag_gain.add(0.5 * r, product_offset(u[a], u[b]), 0.0);
                    }
                }
            }
            if frag_on {
                for a in 0..3 {
                    let f = self.model.gamma((x + u[a]).exp2()) * m / 4.0 * GH_WEIGHTS[a];
                    ex.frag_loss.add(f, u[a], 0.0);
                    ex.frag_gain.add(2.0 * f, u[a], 0.0);
                }
            }
        }
        ex
    }

    fn exchanges(&self, state: &MomentState) -> Vec<Exchange> {
        let len = state.len();
        (0..len)
            .map(|i| {
                let n = state.n_lo + i as i32;
                let present = state.m[i] > ABSENT_MASS;
                self.exchange(n, state.m[i], state.p[i], state.q[i].max(0.0), present && i + 1 < len, i > 0)
            })
            .collect()
    }

    /// All three rates from the raw moment balances.
    pub fn rhs(&self, state: &MomentState) -> MomentRates {
        let ex = self.exchanges(state);
        let len = state.len();
        let mut r = MomentRates { dm: vec![0.0; len], dp: vec![0.0; len], dq: vec![0.0; len] };
        for i in 0..len {
            let centre = state.p[i];
            let mut d = [0.0; 3];
            let mut acc = |f: &Flux, sign: f64| {
                let c = f.centred(centre);
                for k in 0..3 {
                    d[k] += sign * c[k];
                }
            };
            acc(&ex[i].coag_loss, -1.0);
            acc(&ex[i].frag_loss, -1.0);
            if i > 0 {
                acc(&ex[i - 1].coag_gain, 1.0);
            }
            if i + 1 < len {
                acc(&ex[i + 1].frag_gain, 1.0);
            }
            r.dm[i] = d[0];
            let m = state.m[i];
            if m > ABSENT_MASS {
                // moments about the current mean: d(m p) and d(m q) reduce to these
                r.dp[i] = d[1] / m;
                r.dq[i] = (d[2] - state.q[i] * d[0]) / m;
            }
        }
        r
    }

    pub fn rhs_m(&self, state: &MomentState) -> Vec<f64> {
        self.rhs(state).dm
    }

    /// Rates of `p_n`. With a decomposition the mass ratios are taken from
    /// the representation `m_n = m_bar_n(A, p) (1 + 2^n y_n)` instead of the
    /// masses; the two agree when the decomposition is exact.
    pub fn rhs_p(&self, state: &MomentState, decomposition: Option<&Decomposition>) -> Vec<f64> {
        match decomposition {
            None => self.rhs(state).dp,
            Some(dec) => self.rhs_pq_decomposed(state, dec).0,
        }
    }

    pub fn rhs_q(&self, state: &MomentState, decomposition: Option<&Decomposition>) -> Vec<f64> {
        match decomposition {
            None => self.rhs(state).dq,
            Some(dec) => self.rhs_pq_decomposed(state, dec).1,
        }
    }

    /// Leading-order `p` and `q` rates written with the factors
    /// `(1 + 2^n y_n)` and `mu_bar_n(A, p)`.
    fn rhs_pq_decomposed(&self, state: &MomentState, dec: &Decomposition) -> (Vec<f64>, Vec<f64>) {
        let len = state.len();
        let mut dp = vec![0.0; len];
        let mut dq = vec![0.0; len];
        let gam = |n: i32, p: f64| self.model.gamma((n as f64 + p).exp2());
        for i in 0..len {
            if state.m[i] <= ABSENT_MASS {
                continue;
            }
            let n = state.n_lo + i as i32;
            let (p, q) = (state.p[i], state.q[i]);
            let fac = dec.factor(n);
            let g_n = gam(n, p);
            if i > 0 {
                let (pl, ql) = (state.p[i - 1], state.q[i - 1]);
                let w = g_n / 4.0 * dec.factor(n - 1).powi(2) / fac;
                dp[i] += w * (pl - p);
                dq[i] += w * (0.5 * ql - q + (pl - p).powi(2));
            }
            if i + 1 < len {
                let (pr, qr) = (state.p[i + 1], state.q[i + 1]);
                let w = gam(n + 1, pr) * dec.profile.mu_bar(n) * dec.factor(n + 1) / fac;
                dp[i] += w * (pr - p);
                dq[i] += w * (qr - q + (pr - p).powi(2));
            }
        }
        (dp, dq)
    }

    /// Integrates to every time in `sample_times` (ascending, `> state0.t`).
    /// `tol` is the relative tolerance of the step control.
    pub fn integrate(&self, state0: &MomentState, sample_times: &[f64], tol: f64) -> Result<MomentTrajectory> {
        state0.check_bounds(self.delta0)?;
        if sample_times.iter().any(|&t| t < state0.t) {
            return Err(PeakError::Parameter("sample times precede the initial state".into()));
        }
        let mut sys = MomentSystem { model: self, n_lo: state0.n_lo, len: state0.len(), clipped: Vec::new(), tol };
        let y0 = sys.pack(state0);
        let opts = OdeOptions { rtol: tol, atol: tol, h_init: 1e-5, ..Default::default() };
        let mut stats = OdeStats::default();
        let ys = ode::integrate(&mut sys, state0.t, y0, sample_times, &opts, &mut stats)?;
        let states = ys.iter().zip(sample_times).map(|(y, &t)| sys.unpack(t, y)).collect();
        Ok(MomentTrajectory { states, clipped: sys.clipped, steps: stats.steps, rejected: stats.rejected })
    }

    /// Evaluates both sides of the intra-peak Taylor identities on a grid
    /// state and reports the remainders divided by their `O(q)` scale.
    pub fn taylor_identity_check(&self, state: &GridMeasure) -> TaylorReport {
        taylor_identity_check(&self.model, state)
    }
}

/// State vector: `(ln m, p, q)` per peak, blocked.
struct MomentSystem<'a> {
    model: &'a MomentModel,
    n_lo: i32,
    len: usize,
    clipped: Vec<(f64, i32, f64)>,
    tol: f64,
}

impl MomentSystem<'_> {
    fn pack(&self, s: &MomentState) -> DVector<f64> {
        let l = self.len;
        let mut y = DVector::zeros(3 * l);
        for i in 0..l {
            y[i] = s.m[i].max(f64::MIN_POSITIVE).ln();
            y[l + i] = s.p[i];
            y[2 * l + i] = s.q[i];
        }
        y
    }

    fn unpack(&self, t: f64, y: &DVector<f64>) -> MomentState {
        let l = self.len;
        let m = (0..l).map(|i| y[i].exp()).collect();
        let p = (0..l).map(|i| y[l + i]).collect();
        let q = (0..l).map(|i| y[2 * l + i]).collect();
        MomentState::new(t, self.n_lo, m, p, q).expect("lengths agree")
    }
}

impl System for MomentSystem<'_> {
    fn dim(&self) -> usize {
        3 * self.len
    }

    fn rhs(&mut self, t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
        let s = self.unpack(t, y);
        let r = self.model.rhs(&s);
        let l = self.len;
        for i in 0..l {
            dy[i] = if s.m[i] > 0.0 { r.dm[i] / s.m[i] } else { 0.0 };
            dy[l + i] = r.dp[i];
            dy[2 * l + i] = r.dq[i];
        }
    }

    fn check(&mut self, t: f64, y: &mut DVector<f64>) -> Result<Check> {
        let l = self.len;
        let d0 = self.model.delta0;
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Ok(Check::Retry(format!("non-finite component {i}")));
        }
        for i in 0..l {
            let n = self.n_lo + i as i32;
            if y[i] < ABSENT_MASS.ln() {
                continue;
            }
            if y[l + i].abs() > d0 {
                return Err(PeakError::Breakdown { t, reason: format!("p_{n} = {} left [-delta0, delta0]", y[l + i]) });
            }
            if y[2 * l + i] < 0.0 {
                self.clipped.push((t, n, y[2 * l + i]));
                y[2 * l + i] = 0.0;
            }
        }
        Ok(Check::Accept)
    }

    fn atol(&self, i: usize, _default: f64) -> f64 {
        let d0 = self.model.delta0;
        match i / self.len {
            0 => self.tol,
            1 => self.tol * d0,
            _ => self.tol * d0 * d0 * 1e-3,
        }
    }
}

/// Remainder ratios of the intra-peak identities, per peak.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorRow {
    pub n: i32,
    pub q: f64,
    /// Coagulation integral: `(lhs / leading - 1) / q`.
    pub coag_zeroth: f64,
    /// Fragmentation integral: `(lhs / leading - 1) / q`.
    pub frag_zeroth: f64,
    /// First centred moments divided by `leading * q`.
    pub coag_first: f64,
    pub frag_first: f64,
    /// Second centred moments minus `q`, divided by `leading * delta0 * q`.
    pub coag_second: f64,
    pub frag_second: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorReport {
    pub rows: Vec<TaylorRow>,
    /// Largest absolute ratio over all rows and identities.
    pub max_ratio: f64,
    /// Largest absolute zeroth-order ratio, the constant in
    /// `M = sum 2^(n+p_n) m_n + O(sum 2^n m_n q_n)` for the size moment.
    pub max_zeroth: f64,
}

/// Evaluates the intra-peak identities by direct quadrature over the cells.
/// Peaks with `q_n = 0` are reported with zero remainders.
pub fn taylor_identity_check(model: &KernelModel<f64>, state: &GridMeasure) -> TaylorReport {
    let d = state.config.offsets();
    let d0 = state.config.delta0;
    let mut rows = Vec::new();
    let mut max_ratio = 0.0f64;
    let mut max_zeroth = 0.0f64;
    for n in state.indices() {
        let cells = state.peak(n);
        let m: f64 = cells.iter().sum();
        if m <= ABSENT_MASS {
            continue;
        }
        let p: f64 = cells.iter().zip(&d).map(|(&v, &o)| v * o).sum::<f64>() / m;
        let q: f64 = cells.iter().zip(&d).map(|(&v, &o)| v * (o - p).powi(2)).sum::<f64>() / m;
        let x = n as f64;
        let lead_k = model.k((x + p).exp2()) / (x + p + 1.0).exp2() * m * m;
        let lead_g = model.gamma((x + p).exp2()) * m;
        let (mut c0, mut c1, mut c2) = (0.0, 0.0, 0.0);
        let (mut f0, mut f1, mut f2) = (0.0, 0.0, 0.0);
        for (a, &va) in cells.iter().enumerate() {
            if va == 0.0 {
                continue;
            }
            let ua = d[a] - p;
            let gm = model.gamma((x + d[a]).exp2()) * va;
            f0 += gm;
            f1 += gm * ua;
            f2 += gm * (ua * ua - q);
            for (b, &vb) in cells.iter().enumerate() {
                if vb == 0.0 {
                    continue;
                }
                let kk = model.coag_log(x + d[a], x + d[b]) * va * vb;
                c0 += kk;
                c1 += kk * ua;
                c2 += kk * (ua * ua - q);
            }
        }
        let row = if q > 0.0 {
            TaylorRow {
                n,
                q,
                coag_zeroth: (c0 / lead_k - 1.0) / q,
                frag_zeroth: (f0 / lead_g - 1.0) / q,
                coag_first: c1 / (lead_k * q),
                frag_first: f1 / (lead_g * q),
                coag_second: c2 / (lead_k * d0 * q),
                frag_second: f2 / (lead_g * d0 * q),
            }
        } else {
            TaylorRow { n, q, coag_zeroth: 0.0, frag_zeroth: 0.0, coag_first: 0.0, frag_first: 0.0, coag_second: 0.0, frag_second: 0.0 }
        };
        for v in [row.coag_zeroth, row.frag_zeroth, row.coag_first, row.frag_first, row.coag_second, row.frag_second] {
            max_ratio = max_ratio.max(v.abs());
        }
        max_zeroth = max_zeroth.max(row.coag_zeroth.abs()).max(row.frag_zeroth.abs());
        rows.push(row);
    }
    TaylorReport { rows, max_ratio, max_zeroth }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stationary::{m_bar, IndexWindow, ShiftSequence};

    fn stationary_state(a: f64, rho: f64, lo: i32, hi: i32) -> MomentState {
        let model = KernelModel::default_canonical();
        let w = IndexWindow::new(lo - 4, hi + 4).unwrap();
        let prof = m_bar(&model, a, &ShiftSequence::constant(w, rho)).unwrap();
        let len = (hi - lo + 1) as usize;
        let m = (lo..=hi).map(|n| prof.ln_m_bar_at(n).exp()).collect();
        MomentState::new(0.0, lo, m, vec![rho; len], vec![0.0; len]).unwrap()
    }

    fn mm(closure: ClosureOptions) -> MomentModel {
        MomentModel::new(KernelModel::default_canonical(), 0.05, closure).unwrap()
    }

    #[test]
    fn closure_options_exclusive() {
        assert!(ClosureOptions { drop_oq_terms: true, oq_gaussian: true }.validate().is_err());
        assert!(ClosureOptions { drop_oq_terms: false, oq_gaussian: false }.validate().is_err());
        assert!(ClosureOptions::gaussian().validate().is_ok());
    }

    #[test]
    fn stationary_comb_is_an_equilibrium() {
        for closure in [ClosureOptions::leading_order(), ClosureOptions::gaussian()] {
            let s = stationary_state(1.0, 0.03, -8, 6);
            let r = mm(closure).rhs(&s);
            // interior peaks; the two ends see the window closure
            for i in 1..s.len() - 1 {
                let scale = s.m[i] * KernelModel::<f64>::default_canonical().gamma((i as f64 - 8.0 + 1.0).exp2());
                assert!(r.dm[i].abs() < 1e-10 * scale, "i={i} dm={} m={}", r.dm[i], s.m[i]);
                assert_eq!(r.dp[i], 0.0);
                assert_eq!(r.dq[i], 0.0);
            }
        }
    }

    #[test]
    fn matches_written_out_leading_terms() {
        let model = KernelModel::default_canonical();
        let mut s = stationary_state(1.0, 0.0, -6, 5);
        s.p = (0..s.len()).map(|i| 0.02 * (i as f64 * 1.3).sin()).collect();
        s.q = (0..s.len()).map(|i| 1e-4 * (1.0 + 0.5 * (i as f64).cos())).collect();
        let r = mm(ClosureOptions::leading_order()).rhs(&s);
        let gam = |n: i32, p: f64| model.gamma((n as f64 + p).exp2());
        for i in 1..s.len() - 1 {
            let n = s.n_lo + i as i32;
            let (m, p, q) = (s.m[i], s.p[i], s.q[i]);
            let lc = LN_2 / 2.0 * model.k((n as f64 - 1.0 + s.p[i - 1]).exp2()) / (n as f64 + s.p[i - 1]).exp2()
                * s.m[i - 1].powi(2)
                / m;
            let fr = gam(n + 1, s.p[i + 1]) / 2.0 * s.m[i + 1] / m;
            let dp = lc * (s.p[i - 1] - p) + fr * (s.p[i + 1] - p);
            let dq = lc * (0.5 * s.q[i - 1] - q + (s.p[i - 1] - p).powi(2)) + fr * (s.q[i + 1] - q + (s.p[i + 1] - p).powi(2));
            assert!((r.dp[i] - dp).abs() < 1e-10 * (1.0 + dp.abs()), "n={n}");
            assert!((r.dq[i] - dq).abs() < 1e-10 * (1.0 + dq.abs()), "n={n}");
            let lm = LN_2 * model.k((n as f64 + p).exp2()) / (n as f64 + p + 1.0).exp2() * m * m;
            let dm = lc * m - lm - gam(n, p) * m / 4.0 + fr * m;
            assert!((r.dm[i] - dm).abs() < 1e-10 * dm.abs().max(m * gam(n, p)), "n={n}");
        }
    }

    #[test]
    fn coagulation_free_toy() {
        // masses so small that coagulation is negligible
        let model = KernelModel::default_canonical();
        let s = MomentState::new(0.0, -3, vec![1e-200, 2e-200, 3e-200, 4e-200], vec![0.01, -0.02, 0.0, 0.03], vec![0.0; 4]).unwrap();
        let r = mm(ClosureOptions::leading_order()).rhs(&s);
        for i in 1..3 {
            let n = -3 + i as i32;
            let exp = -model.gamma((n as f64 + s.p[i]).exp2()) * s.m[i] / 4.0
                + model.gamma((n as f64 + 1.0 + s.p[i + 1]).exp2()) * s.m[i + 1] / 2.0;
            assert!((r.dm[i] - exp).abs() < 1e-12 * exp.abs());
        }
    }

    #[test]
    fn isolated_peak_variance_contracts() {
        // peak 0 fed by coagulation of peak -1, nothing above, coagulation of peak 0 off
        let s = MomentState::new(0.0, -1, vec![0.5, 0.3], vec![0.0, 0.0], vec![4e-4, 1e-4]).unwrap();
        let model = KernelModel::default_canonical();
        let r = mm(ClosureOptions::leading_order()).rhs(&s);
        let lc = LN_2 / 2.0 * model.coag_log(-1.0, -1.0) * 0.25 / 0.3;
        assert!((r.dq[1] - lc * (2e-4 - 1e-4)).abs() < 1e-15);
        assert!(r.dq[1] > 0.0);
    }

    #[test]
    fn alignment_pull() {
        let s = MomentState::new(0.0, -1, vec![0.5, 0.3], vec![0.02, 0.0], vec![0.0, 0.0]).unwrap();
        let r = mm(ClosureOptions::leading_order()).rhs(&s);
        assert!(r.dp[1] > 0.0);
        // the lower peak is pulled towards the upper one by its fragments
        assert!(r.dp[0] < 0.0);
    }

    #[test]
    fn constant_shift_gives_zero_pq_rates() {
        let mut s = stationary_state(2.0, 0.0, -6, 6);
        s.m.iter_mut().enumerate().for_each(|(i, m)| *m *= 1.0 + 0.1 * (i as f64).sin());
        s.p = vec![-0.01; s.len()];
        let r = mm(ClosureOptions::leading_order()).rhs(&s);
        assert!(r.dp.iter().all(|&v| v == 0.0));
        assert!(r.dq.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_closure_reduces_to_leading_order_at_zero_variance() {
        let mut s = stationary_state(1.0, 0.0, -6, 5);
        s.p = (0..s.len()).map(|i| 0.02 * (i as f64 * 0.7).cos()).collect();
        let a = mm(ClosureOptions::leading_order()).rhs(&s);
        let b = mm(ClosureOptions::gaussian()).rhs(&s);
        for i in 0..s.len() {
            assert!((a.dm[i] - b.dm[i]).abs() <= 1e-12 * a.dm[i].abs().max(s.m[i]));
            assert!((a.dp[i] - b.dp[i]).abs() <= 1e-12 * (1.0 + a.dp[i].abs()));
        }
    }

    #[test]
    fn stationary_state_stays_put() {
        let s = stationary_state(1.0, 0.02, -8, 6);
        let traj = mm(ClosureOptions::leading_order()).integrate(&s, &[10.0], 1e-9).unwrap();
        let e = &traj.states[0];
        for i in 1..s.len() - 1 {
            assert!((e.m[i] / s.m[i] - 1.0).abs() < 1e-8, "i={i}: {}", e.m[i] / s.m[i] - 1.0);
        }
    }

    #[test]
    fn step_hook_clips_variance_and_flags_breakdown() {
        let s = stationary_state(1.0, 0.0, -6, 4);
        let model = mm(ClosureOptions::leading_order());
        let mut sys = MomentSystem { model: &model, n_lo: s.n_lo, len: s.len(), clipped: Vec::new(), tol: 1e-8 };
        let l = s.len();
        let mut y = sys.pack(&s);
        y[2 * l + 3] = -1e-12;
        assert!(matches!(sys.check(0.5, &mut y), Ok(Check::Accept)));
        assert_eq!(y[2 * l + 3], 0.0);
        assert_eq!(sys.clipped, vec![(0.5, -3, -1e-12)]);
        y[l + 2] = 0.051;
        assert!(matches!(sys.check(0.6, &mut y), Err(PeakError::Breakdown { .. })));
    }
}
