//! Stationary profile, its asymptotes, and a finite-difference check of the
//! parameter derivatives.

use super::resolve_a;
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::RunDir;
use peakdyn::kernels::KernelModel;
use peakdyn::stationary::{a_minus_inf, ln_a_inf, m_bar, mass_of, IndexWindow, ShiftSequence, StationaryProfile};
use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct ProfileRow {
    pub n: i32,
    pub p: f64,
    pub m_bar: f64,
    pub ln_m_bar: f64,
    pub mu_bar: f64,
    pub peak_mass: f64,
    /// `|m_{n+1} - zeta_n m_n^2| / m_{n+1}`, from the logarithms.
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Asymptotes {
    /// `m_bar_n / (a_minus_inf 2^n)` at the bottom of the window.
    pub left_ratio: f64,
    pub left_n: i32,
    /// `ln m_bar_n + A 2^n - (beta - alpha) n ln 2` at the top of the window.
    pub right_tail: f64,
    pub ln_a_inf: f64,
    /// Largest change of the tail quantity over the top four peaks.
    pub right_cauchy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeCheck {
    pub samples: usize,
    pub max_rel_err_a: f64,
    pub max_rel_err_p: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StationarySummary {
    pub a: f64,
    pub rho: f64,
    pub mass: Option<f64>,
    /// `|M(A) - M| / M` when the mass was prescribed.
    pub mass_round_trip: Option<f64>,
    pub max_residual: f64,
    pub asymptotes: Asymptotes,
    pub derivatives: DerivativeCheck,
}

#[derive(Debug, Clone)]
pub struct StationaryReport {
    pub summary: StationarySummary,
    pub rows: Vec<ProfileRow>,
}

pub fn profile_rows(model: &KernelModel<f64>, prof: &StationaryProfile<f64>, window: IndexWindow) -> Vec<ProfileRow> {
    window
        .indices()
        .map(|n| {
            let i = prof.window().idx(n);
            let residual = if n < prof.window().n_hi {
                let z = peakdyn::stationary::ln_zeta(model, n, &prof.shift);
                (z + 2.0 * prof.ln_m_bar[i] - prof.ln_m_bar[i + 1]).exp_m1().abs()
            } else {
                0.0
            };
            ProfileRow {
                n,
                p: prof.shift.get(n),
                m_bar: prof.m_bar(n),
                ln_m_bar: prof.ln_m_bar[i],
                mu_bar: prof.mu_bar(n),
                peak_mass: prof.peak_mass(n),
                residual,
            }
        })
        .collect()
}

pub fn asymptotes(model: &KernelModel<f64>, prof: &StationaryProfile<f64>, a: f64, rho: f64) -> Asymptotes {
    let w = prof.window();
    let tail = |n: i32| prof.ln_m_bar_at(n) + a * (n as f64).exp2() - (model.beta - model.alpha) * n as f64 * std::f64::consts::LN_2;
    let top = w.n_hi;
    let right_cauchy = (top - 4..top).map(|n| (tail(n + 1) - tail(n)).abs()).fold(0.0, f64::max);
    Asymptotes {
        left_ratio: prof.m_bar(w.n_lo) / (a_minus_inf(model, rho) * (w.n_lo as f64).exp2()),
        left_n: w.n_lo,
        right_tail: tail(top),
        ln_a_inf: ln_a_inf(model, rho),
        right_cauchy,
    }
}

/// Central differences of `ln m_bar`, refined by one Richardson step,
/// against `d m_bar / dA` and `d m_bar / dp_k` divided by `m_bar`, at random
/// `(n, k, A, p)` with `|p_n| <= delta0`. Logarithms avoid the underflow of
/// `m_bar` on the right.
pub fn derivative_check<R: Rng>(model: &KernelModel<f64>, window: IndexWindow, a: f64, delta0: f64, samples: usize, rng: &mut R) -> Result<DerivativeCheck, CliError> {
    let rel = |an: f64, fd: f64| if fd == 0.0 && an == 0.0 { 0.0 } else { (an - fd).abs() / fd.abs().max(an.abs()) };
    let richardson = |f: &dyn Fn(f64) -> Result<f64, CliError>, h: f64| -> Result<f64, CliError> {
        let d = |h: f64| -> Result<f64, CliError> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
        Ok((4.0 * d(0.5 * h)? - d(h)?) / 3.0)
    };
    let mut ea = 0.0f64;
    let mut ep = 0.0f64;
    for _ in 0..samples {
        let aa = a * rng.gen_range(0.5..2.0);
        let p: Vec<f64> = (0..window.len()).map(|_| rng.gen_range(-delta0..delta0)).collect();
        let shift = ShiftSequence::new(window, p.clone(), 0.0, 0.0)?;
        let prof = m_bar(model, aa, &shift)?;
        // interior indices where every quantity is resolved
        let n = rng.gen_range(window.n_lo + 1..window.n_hi - 1);
        let k = rng.gen_range(n..window.n_hi - 1);
        if prof.is_underflow(n) {
            continue;
        }
        let m = prof.m_bar(n);
        let fd = richardson(&|h| Ok(m_bar(model, aa + h, &shift)?.ln_m_bar_at(n)), 1e-3 * aa)?;
        ea = ea.max(rel(prof.d_mbar_da(n) / m, fd));
        let fd = richardson(
            &|h| {
                let mut q = p.clone();
                q[window.idx(k)] += h;
                Ok(m_bar(model, aa, &ShiftSequence::new(window, q, 0.0, 0.0)?)?.ln_m_bar_at(n))
            },
            1e-3,
        )?;
        ep = ep.max(rel(prof.d_mbar_dpk(model, n, k) / m, fd));
    }
    Ok(DerivativeCheck { samples, max_rel_err_a: ea, max_rel_err_p: ep })
}

pub fn analyse(config: &ExperimentConfig) -> Result<StationaryReport, CliError> {
    config.validate()?;
    let model = config.kernel_model()?;
    let w = config.index_window()?;
    let rho = config.peaks.rho;
    let (a, mass) = match config.peaks.p_profile {
        None => {
            let (a, m) = resolve_a(config, &model, rho)?;
            (a, Some(m))
        }
        // the total mass needs a constant shift
        Some(_) => (config.peaks.a.ok_or_else(|| CliError::Config("a p_profile needs peaks.a".into()))?, None),
    };
    let ext = IndexWindow::new(w.n_lo, w.n_hi + 1)?;
    let prof = m_bar(&model, a, &config.shift_on(ext)?)?;
    let rows = profile_rows(&model, &prof, w);
    let max_residual = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
    let mass_round_trip = match (config.peaks.a, mass) {
        (None, Some(m)) => Some((mass_of(&model, a, rho)? - m).abs() / m),
        _ => None,
    };
    let mut rng = super::rng(config);
    let derivatives = derivative_check(&model, w, a, config.peaks.delta0, 100, &mut rng)?;
    Ok(StationaryReport {
        summary: StationarySummary {
            a,
            rho,
            mass,
            mass_round_trip,
            max_residual,
            asymptotes: asymptotes(&model, &prof, a, rho),
            derivatives,
        },
        rows,
    })
}

pub fn run(config: &ExperimentConfig, dir: &mut RunDir) -> Result<serde_json::Value, CliError> {
    let r = analyse(config)?;
    dir.csv("profile.csv", &r.rows)?;
    dir.gnuplot("profile", "stationary profile", "n", &[("m_bar", 3), ("peak mass", 6)], true)?;
    Ok(serde_json::to_value(&r.summary)?)
}
