//! The experiment kinds. Each one has an `analyse` function returning a
//! report and a `run` function writing it to a run directory.

pub mod bounds;
pub mod linear;
pub mod moments;
pub mod simulate;
pub mod stability;
pub mod stationary;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use peakdyn::grid_sim::{GridMeasure, GridSim, SimConfig};
use peakdyn::kernels::KernelModel;
use peakdyn::stationary::{m_bar, mass_of, solve_a_for_mass, IndexWindow, ShiftSequence, StationaryProfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Extra peaks on each side of the configured window used when building
/// profiles, so that every profile quantity on the window is available.
pub const PROFILE_MARGIN: i32 = 4;

pub fn rng(config: &ExperimentConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(config.seed)
}

/// Decay parameter and total mass of the configured comb with shift `rho`.
pub fn resolve_a(config: &ExperimentConfig, model: &KernelModel<f64>, rho: f64) -> Result<(f64, f64), CliError> {
    match (config.peaks.a, config.peaks.mass) {
        (Some(a), _) => Ok((a, mass_of(model, a, rho)?)),
        (None, Some(m)) => Ok((solve_a_for_mass(model, m, rho)?, m)),
        (None, None) => Err(CliError::Config("neither peaks.a nor peaks.mass is set".into())),
    }
}

/// `t_end * k / samples` for `k = 1..=samples`.
pub fn sample_times(config: &ExperimentConfig) -> Vec<f64> {
    let n = config.time.samples;
    (1..=n).map(|k| config.time.t_end * k as f64 / n as f64).collect()
}

/// `sup_{n<=0} 2^n |y_n| + sup_{n>0} 2^n |y_n|` on an index range.
pub fn norm_one(n_lo: i32, y: &[f64]) -> f64 {
    let mut l = 0.0f64;
    let mut r = 0.0f64;
    for (i, v) in y.iter().enumerate() {
        let n = n_lo + i as i32;
        let w = (n as f64).exp2() * v.abs();
        if n <= 0 {
            l = l.max(w);
        } else {
            r = r.max(w);
        }
    }
    l + r
}

/// Initial data `m_n = m_bar_n(A0, p0) (1 + 2^n y0_n)` on the grid window.
#[derive(Debug, Clone)]
pub struct Initial {
    pub window: IndexWindow,
    pub a0: f64,
    pub shift: ShiftSequence<f64>,
    pub profile: StationaryProfile<f64>,
    pub y0: Vec<f64>,
    pub m: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InitialSummary {
    pub a0: f64,
    pub y0_norm_one: f64,
    pub p0_max_deviation: f64,
}

impl Initial {
    pub fn summary(&self, rho: f64) -> InitialSummary {
        InitialSummary {
            a0: self.a0,
            y0_norm_one: norm_one(self.window.n_lo, &self.y0),
            p0_max_deviation: self.p.iter().fold(0.0f64, |a, p| a.max((p - rho).abs())),
        }
    }
}

/// Draws the perturbed initial data from the configured seed: shifts
/// `rho + U(-amp, amp)`, and `y0_n = s z_n 2^-n` with `z_n ~ U(-1, 1)`,
/// `y0_N = 0` and `s` fixing `||y0||_1`.
pub fn initial_data(config: &ExperimentConfig, model: &KernelModel<f64>, a0: f64) -> Result<Initial, CliError> {
    let w = config.index_window()?;
    let nt = config.n_trunc();
    let win = IndexWindow::new(w.n_lo, nt)?;
    let mut rng = rng(config);
    let base = config.shift_on(win)?;
    let amp = config.perturbation.p_amplitude;
    let p: Vec<f64> = base.p.iter().map(|&b| if amp > 0.0 { b + rng.gen_range(-amp..amp) } else { b }).collect();
    let z: Vec<f64> = win.indices().map(|n| if n == nt { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect();
    let raw = norm_one(win.n_lo, &z.iter().zip(win.indices()).map(|(z, n)| z * (-(n as f64)).exp2()).collect::<Vec<_>>());
    let s = if raw > 0.0 { config.perturbation.y_norm / raw } else { 0.0 };
    let y0: Vec<f64> = z.iter().zip(win.indices()).map(|(z, n)| s * z * (-(n as f64)).exp2()).collect();
    let ext = IndexWindow::new(win.n_lo - PROFILE_MARGIN, nt + PROFILE_MARGIN)?;
    let shift = ShiftSequence::new(
        ext,
        ext.indices().map(|n| p[(n.clamp(win.n_lo, nt) - win.n_lo) as usize]).collect(),
        0.0,
        p[0],
    )?;
    let profile = m_bar(model, a0, &shift)?;
    let m = win
        .indices()
        .zip(&y0)
        .map(|(n, y)| profile.ln_m_bar_at(n).exp() * (1.0 + (n as f64).exp2() * y))
        .collect();
    Ok(Initial { window: win, a0, shift, profile, y0, m, p })
}

/// Refuses data outside the smallness hypotheses.
pub fn check_hypotheses(config: &ExperimentConfig, init: &Initial, a_m: f64) -> Result<(), CliError> {
    let d0 = config.peaks.delta0;
    let s = init.summary(config.peaks.rho);
    if s.y0_norm_one > d0 {
        return Err(CliError::Hypothesis(format!("||y0||_1 = {} exceeds delta0 = {d0}", s.y0_norm_one)));
    }
    if (init.a0 - a_m).abs() > d0 {
        return Err(CliError::Hypothesis(format!("|A0 - A_M| = {} exceeds delta0", (init.a0 - a_m).abs())));
    }
    if let Some((i, p)) = init.p.iter().enumerate().find(|(_, p)| p.abs() > d0) {
        return Err(CliError::Hypothesis(format!("|p_{}| = {} exceeds delta0", init.window.n_lo + i as i32, p.abs())));
    }
    // biweight bumps of half-width b have variance b^2/7
    if config.perturbation.blob_width.powi(2) / 7.0 > 4.0 * d0.powf(1.5) {
        return Err(CliError::Hypothesis("initial variances exceed 4 delta0^(3/2)".into()));
    }
    Ok(())
}

pub fn grid_sim(config: &ExperimentConfig, model: &KernelModel<f64>) -> Result<GridSim, CliError> {
    // cells centred on n + rho, so an unperturbed comb is a point mass per peak
    let mut sc = SimConfig::new(config.peaks.delta0, config.index_window()?, config.peaks.cells).aligned_to(config.peaks.rho);
    sc.n_trunc = config.n_trunc();
    Ok(GridSim::new(model.clone(), sc)?)
}

pub fn grid_initial(sim: &GridSim, config: &ExperimentConfig, init: &Initial) -> Result<GridMeasure, CliError> {
    let np = sim.config.n_peaks();
    Ok(sim.init_from_peaks(&init.m[..np], &init.p[..np], config.perturbation.blob_width)?)
}
