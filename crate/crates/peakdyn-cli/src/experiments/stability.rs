//! Perturbed comb evolved by the grid simulator, with the convergence
//! diagnostics: variance envelope, shift alignment, final profile and
//! Wasserstein decay.

use super::{check_hypotheses, grid_initial, grid_sim, initial_data, resolve_a, sample_times, InitialSummary};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::RunDir;
use peakdyn::grid_sim::{extract_moments, StepStats};
use peakdyn::linear::{fit_decay, DecayFit, Envelope};
use peakdyn::moment_ode::MomentState;
use peakdyn::representation::{rho_estimate, sup_wasserstein, track_decomposition};
use peakdyn::stationary::{a_coeffs, solve_a_for_mass, IndexWindow};
use serde::Serialize;

/// Spread below which the shifts count as aligned.
pub const ALIGNED_SPREAD: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub sup_q: f64,
    pub q_envelope: f64,
    pub spread: f64,
    pub sup_w2: f64,
    pub dplus_p: f64,
    pub a: f64,
    pub y_norm_1: f64,
    pub y_norm_beta: f64,
    pub a_gap: f64,
    pub da_dt: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub t: f64,
    pub n: i32,
    pub m: f64,
    pub p: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalRow {
    pub n: i32,
    pub m_final: f64,
    pub a_n: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Fit {
    pub c: f64,
    pub nu: f64,
    pub residual: f64,
}

impl From<DecayFit> for Fit {
    fn from(f: DecayFit) -> Self {
        Self { c: f.c, nu: f.nu, residual: f.residual }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityChecks {
    /// `sup_n q_n(t) <= 8 delta0^(3/2) e^(-nu t)` after burn-in, with `nu > 0`.
    pub q_envelope: bool,
    /// Spread below `ALIGNED_SPREAD` by the final time.
    pub aligned: bool,
    /// Final masses within 1% of the stationary comb for `|n| <= 8`.
    pub final_profile: bool,
    /// Wasserstein rate within a factor 2 of `nu/2`.
    pub wasserstein_rate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilitySummary {
    pub initial: InitialSummary,
    pub mass: f64,
    pub mass_drift: f64,
    pub a_m: f64,
    pub rho_hat: f64,
    pub a_final: f64,
    pub q_fit: Fit,
    pub w2_fit: Fit,
    pub dplus_p_fit: Option<Fit>,
    /// First sample time with spread below `ALIGNED_SPREAD`.
    pub aligned_at: Option<f64>,
    pub final_max_rel_err: f64,
    pub grid_steps: u64,
    pub grid_rejected: u64,
    pub checks: StabilityChecks,
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub summary: StabilitySummary,
    pub traces: Vec<TraceRow>,
    pub moments: Vec<MomentRow>,
    pub final_profile: Vec<FinalRow>,
}

fn dplus_p_norm(s: &MomentState) -> f64 {
    s.p.windows(2).zip(s.m.windows(2)).filter(|(_, m)| m[0] > 0.0 && m[1] > 0.0).map(|(p, _)| (p[1] - p[0]).abs()).fold(0.0, f64::max)
}

pub fn analyse(config: &ExperimentConfig) -> Result<StabilityReport, CliError> {
    config.validate()?;
    let model = config.kernel_model()?;
    let rho = config.peaks.rho;
    let d0 = config.peaks.delta0;
    let (a0, _) = resolve_a(config, &model, rho)?;
    let init = initial_data(config, &model, a0)?;
    let sim = grid_sim(config, &model)?;
    let mut grid = grid_initial(&sim, config, &init)?;
    let mass = grid.xi_mass();
    let a_m = solve_a_for_mass(&model, mass, rho)?;
    check_hypotheses(config, &init, a_m)?;

    let times = sample_times(config);
    let mut stats = StepStats::default();
    let mut states = vec![extract_moments(&grid)];
    states.extend(sim.run(&mut grid, &times, &mut stats)?);
    let mass_drift = (grid.xi_mass() - mass) / mass;

    let (rho_hat, spread) = rho_estimate(&states)?;
    let a_final = solve_a_for_mass(&model, mass, rho_hat)?;
    let (_, track) = track_decomposition(&model, &states, a_final, 0.0)?;
    let env_c = 8.0 * d0.powf(1.5);

    let t_all: Vec<f64> = states.iter().map(|s| s.t).collect();
    let sup_q: Vec<f64> = states.iter().map(|s| (0..s.len()).filter(|&i| s.present[i]).map(|i| s.q[i]).fold(0.0, f64::max)).collect();
    let w2: Vec<f64> = states.iter().map(|s| sup_wasserstein(s, rho_hat)).collect();
    let dpp: Vec<f64> = states.iter().map(dplus_p_norm).collect();
    let burn = config.time.burn_in;
    let q_fit = fit_decay(&t_all, &sup_q, Envelope::Exp, burn)?;
    let w2_fit = fit_decay(&t_all, &w2, Envelope::Exp, burn)?;
    // the shift differences can reach roundoff, which the log fit cannot take
    let dplus_p_fit = fit_decay(&t_all, &dpp, Envelope::Exp, burn).ok().map(Fit::from);

    let traces: Vec<TraceRow> = states
        .iter()
        .enumerate()
        .map(|(k, s)| TraceRow {
            t: s.t,
            sup_q: sup_q[k],
            q_envelope: env_c * (-q_fit.nu * s.t).exp(),
            spread: spread[k],
            sup_w2: w2[k],
            dplus_p: dpp[k],
            a: track[k].a,
            y_norm_1: track[k].y_norm_1,
            y_norm_beta: track[k].y_norm_beta,
            a_gap: track[k].a_gap,
            da_dt: track[k].da_dt,
        })
        .collect();
    let q_envelope = q_fit.nu > 0.0 && traces.iter().filter(|r| r.t >= burn).all(|r| r.sup_q <= r.q_envelope);
    let aligned_at = traces.iter().find(|r| r.spread < ALIGNED_SPREAD).map(|r| r.t);

    let last = states.last().expect("nonempty");
    let w = IndexWindow::new(last.n_lo - 4, last.n_top() + 4)?;
    let comb = a_coeffs(&model, a_final, rho_hat, w)?;
    let final_profile: Vec<FinalRow> = last
        .indices()
        .map(|n| {
            let m = last.m[last.idx(n)];
            let a = comb.ln_m_bar_at(n).exp();
            FinalRow { n, m_final: m, a_n: a, rel_err: (m - a).abs() / a }
        })
        .collect();
    let final_max_rel_err = final_profile.iter().filter(|r| r.n.abs() <= 8).map(|r| r.rel_err).fold(0.0, f64::max);
    let half = 0.5 * q_fit.nu;
    let wasserstein_rate = half > 0.0 && w2_fit.nu >= 0.5 * half && w2_fit.nu <= 2.0 * half;

    let checks = StabilityChecks {
        q_envelope,
        aligned: aligned_at.is_some(),
        final_profile: final_max_rel_err < 0.01,
        wasserstein_rate,
    };
    let moments = states
        .iter()
        .flat_map(|s| s.indices().map(move |n| {
            let i = s.idx(n);
            MomentRow { t: s.t, n, m: s.m[i], p: s.p[i], q: s.q[i] }
        }))
        .collect();
    Ok(StabilityReport {
        summary: StabilitySummary {
            initial: init.summary(rho),
            mass,
            mass_drift,
            a_m,
            rho_hat,
            a_final,
            q_fit: q_fit.into(),
            w2_fit: w2_fit.into(),
            dplus_p_fit,
            aligned_at,
            final_max_rel_err,
            grid_steps: stats.steps,
            grid_rejected: stats.rejected,
            checks,
        },
        traces,
        moments,
        final_profile,
    })
}

pub fn run(config: &ExperimentConfig, dir: &mut RunDir) -> Result<serde_json::Value, CliError> {
    let r = analyse(config)?;
    dir.csv("moments.csv", &r.moments)?;
    dir.csv("traces.csv", &r.traces)?;
    dir.csv("final_profile.csv", &r.final_profile)?;
    dir.gnuplot("traces", "decay diagnostics", "t", &[("sup q", 2), ("envelope", 3), ("spread", 4), ("sup W2", 5)], true)?;
    dir.gnuplot("final_profile", "final masses", "n", &[("m(T)", 2), ("a_n", 3)], true)?;
    Ok(serde_json::to_value(&r.summary)?)
}
