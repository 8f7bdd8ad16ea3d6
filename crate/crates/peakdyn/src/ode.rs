//! Adaptive second-order Rosenbrock integrator (the `ode23s` pair) for stiff
//! systems of moderate size, with dense LU solves.

use crate::{PeakError, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub(crate) struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub max_steps: u64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-6, atol: 1e-10, h_init: 1e-4, h_min: 1e-14, max_steps: 2_000_000 }
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub(crate) struct OdeStats {
    pub steps: u64,
    pub rejected: u64,
    pub jacobians: u64,
}

/// Outcome of the post-step hook.
pub(crate) enum Check {
    Accept,
    /// Retry with a smaller step.
    Retry(String),
}

pub(crate) trait System {
    fn dim(&self) -> usize;
    fn rhs(&mut self, t: f64, y: &DVector<f64>, dy: &mut DVector<f64>);
    /// Jacobian `df/dy`; the default uses forward differences.
    fn jacobian(&mut self, t: f64, y: &DVector<f64>, f0: &DVector<f64>, jac: &mut DMatrix<f64>) {
        let n = self.dim();
        let mut yp = y.clone();
        let mut fp = DVector::zeros(n);
        for j in 0..n {
            let del = f64::EPSILON.sqrt() * y[j].abs().max(1e-6);
            yp[j] = y[j] + del;
            self.rhs(t, &yp, &mut fp);
            for i in 0..n {
                jac[(i, j)] = (fp[i] - f0[i]) / del;
            }
            yp[j] = y[j];
        }
    }
    /// Whether the right-hand side depends on time explicitly.
    fn autonomous(&self) -> bool {
        true
    }
    /// Inspects (and may repair) an accepted candidate state.
    fn check(&mut self, _t: f64, _y: &mut DVector<f64>) -> Result<Check> {
        Ok(Check::Accept)
    }
    /// Per-component absolute tolerance.
    fn atol(&self, _i: usize, default: f64) -> f64 {
        default
    }
}

/// Integrates from `(t0, y0)` and returns the states at `t_out` (ascending,
/// all `>= t0`).
pub(crate) fn integrate<S: System>(
    sys: &mut S,
    t0: f64,
    y0: DVector<f64>,
    t_out: &[f64],
    opts: &OdeOptions,
    stats: &mut OdeStats,
) -> Result<Vec<DVector<f64>>> {
    let n = sys.dim();
    let d = 1.0 / (2.0 + std::f64::consts::SQRT_2);
    let e32 = 6.0 + std::f64::consts::SQRT_2;
    let mut out = Vec::with_capacity(t_out.len());
    if t_out.windows(2).any(|w| w[1] < w[0]) || t_out.first().map_or(false, |&s| s < t0) {
        return Err(PeakError::Parameter("output times must be ascending and after t0".into()));
    }
    let t_end = match t_out.last() {
        Some(&t) => t,
        None => return Ok(out),
    };
    let mut next = 0;
    while next < t_out.len() && t_out[next] <= t0 {
        out.push(y0.clone());
        next += 1;
    }
    let mut t = t0;
    let mut y = y0;
    let mut h = opts.h_init.min((t_end - t0).max(opts.h_min));
    let mut f0 = DVector::zeros(n);
    let mut f1 = DVector::zeros(n);
    let mut f2 = DVector::zeros(n);
    let mut ft = DVector::zeros(n);
    let mut jac = DMatrix::zeros(n, n);
    let mut need_jac = true;
    sys.rhs(t, &y, &mut f0);
    while next < t_out.len() {
        if stats.steps + stats.rejected > opts.max_steps {
            return Err(PeakError::Integration { t, reason: "step budget exhausted".into() });
        }
        if need_jac {
            sys.jacobian(t, &y, &f0, &mut jac);
            stats.jacobians += 1;
            need_jac = false;
        }
        let dfdt = if sys.autonomous() {
            None
        } else {
            let dt = f64::EPSILON.sqrt() * t.abs().max(1.0);
            sys.rhs(t + dt, &y, &mut ft);
            Some((&ft - &f0) / dt)
        };
        h = h.min(t_end - t);
        let w = DMatrix::identity(n, n) - &jac * (h * d);
        let lu = w.lu();
        let solve = |b: DVector<f64>| -> Result<DVector<f64>> {
            lu.solve(&b).ok_or_else(|| PeakError::Integration { t, reason: "singular iteration matrix".into() })
        };
        let mut b1 = f0.clone();
        if let Some(tt) = &dfdt {
            b1 += tt * (h * d);
        }
        let k1 = solve(b1)?;
        let y1 = &y + &k1 * (0.5 * h);
        sys.rhs(t + 0.5 * h, &y1, &mut f1);
        let k2 = solve(&f1 - &k1)? + &k1;
        let mut ynew = &y + &k2 * h;
        sys.rhs(t + h, &ynew, &mut f2);
        let mut b3 = &f2 - (&k2 - &f1) * e32 - (&k1 - &f0) * 2.0;
        if let Some(tt) = &dfdt {
            b3 += tt * (h * d);
        }
        let k3 = solve(b3)?;
        let mut err = 0.0f64;
        for i in 0..n {
            let e = h / 6.0 * (k1[i] - 2.0 * k2[i] + k3[i]);
            let sc = sys.atol(i, opts.atol) + opts.rtol * y[i].abs().max(ynew[i].abs());
            err = err.max((e / sc).abs());
        }
        if !err.is_finite() {
            err = 1e10;
        }
        if err > 1.0 {
            stats.rejected += 1;
            h *= (0.8 * err.powf(-1.0 / 3.0)).max(0.1);
            if h < opts.h_min {
                return Err(PeakError::Integration { t, reason: format!("step size underflow (error ratio {err:.3e})") });
            }
            continue;
        }
        match sys.check(t + h, &mut ynew)? {
            Check::Accept => {}
            Check::Retry(reason) => {
                stats.rejected += 1;
                h *= 0.5;
                if h < opts.h_min {
                    return Err(PeakError::StepRejected { t, reason });
                }
                continue;
            }
        }
        // dense output between t and t + h
        while next < t_out.len() && t_out[next] <= t + h {
            let s = (t_out[next] - t) / h;
            let a1 = s * (1.0 - s) / (1.0 - 2.0 * d);
            let a2 = s * (s - 2.0 * d) / (1.0 - 2.0 * d);
            let mut ys = if s >= 1.0 { ynew.clone() } else { &y + (&k1 * a1 + &k2 * a2) * h };
            if s < 1.0 {
                sys.check(t_out[next], &mut ys)?;
            }
            out.push(ys);
            next += 1;
        }
        stats.steps += 1;
        t += h;
        y = ynew;
        // the hook may have repaired the state, so f2 is not reused
        sys.rhs(t, &y, &mut f0);
        need_jac = true;
        let fac = if err > 0.0 { (0.8 * err.powf(-1.0 / 3.0)).min(5.0) } else { 5.0 };
        h *= fac;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay {
        rates: Vec<f64>,
    }

    impl System for Decay {
        fn dim(&self) -> usize {
            self.rates.len()
        }
        fn rhs(&mut self, _t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
            for i in 0..y.len() {
                dy[i] = -self.rates[i] * y[i];
            }
        }
    }

    #[test]
    fn stiff_decay_matches_exponentials() {
        let mut sys = Decay { rates: vec![1.0, 1e4] };
        let opts = OdeOptions { rtol: 1e-8, atol: 1e-14, ..Default::default() };
        let mut st = OdeStats::default();
        let y0 = DVector::from_vec(vec![1.0, 1.0]);
        let ys = integrate(&mut sys, 0.0, y0, &[0.5, 1.0], &opts, &mut st).unwrap();
        assert!((ys[0][0] - (-0.5f64).exp()).abs() < 1e-6);
        assert!((ys[1][0] - (-1.0f64).exp()).abs() < 1e-6);
        assert!(ys[1][1].abs() < 1e-8);
        assert!(st.steps < 20_000);
    }

    struct Forced;

    impl System for Forced {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&mut self, t: f64, y: &DVector<f64>, dy: &mut DVector<f64>) {
            dy[0] = -50.0 * (y[0] - t.cos());
        }
        fn autonomous(&self) -> bool {
            false
        }
    }

    #[test]
    fn non_autonomous_tracks_forcing() {
        // exact: y = (2500 cos t + 50 sin t)/2501 + c e^{-50t}
        let mut st = OdeStats::default();
        let opts = OdeOptions { rtol: 1e-9, atol: 1e-12, ..Default::default() };
        let ys = integrate(&mut Forced, 0.0, DVector::from_vec(vec![0.0]), &[2.0], &opts, &mut st).unwrap();
        let c = -2500.0 / 2501.0;
        let exact = (2500.0 * 2f64.cos() + 50.0 * 2f64.sin()) / 2501.0 + c * (-100.0f64).exp();
        assert!((ys[0][0] - exact).abs() < 1e-6, "{} vs {}", ys[0][0], exact);
    }
}
