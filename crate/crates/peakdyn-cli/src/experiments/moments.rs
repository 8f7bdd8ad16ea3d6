//! Closed moment system, its envelopes, and the comparison against the grid
//! simulator started from the same measure.

use super::{grid_initial, grid_sim, initial_data, resolve_a, sample_times};
use crate::config::{ClosureKind, ExperimentConfig};
use crate::error::CliError;
use crate::output::RunDir;
use peakdyn::grid_sim::{extract_moments, StepStats};
use peakdyn::linear::{fit_decay, Envelope};
use peakdyn::moment_ode::{ClosureOptions, MomentModel, MomentState};
use peakdyn::stationary::{a_coeffs, IndexWindow};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub n: i32,
    pub m: f64,
    pub p: f64,
    pub q: f64,
    /// `8 delta0^(3/2) e^(-nu t)` with the fitted `nu`.
    pub q_envelope: f64,
    /// `2 L1 delta0 e^(-nu t / 2)` with the measured `L1`.
    pub dplus_p_envelope: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub t: f64,
    pub n: i32,
    pub m_ode: f64,
    pub m_grid: f64,
    pub p_ode: f64,
    pub p_grid: f64,
    pub q_ode: f64,
    pub q_grid: f64,
    pub rel_m: f64,
    pub abs_p: f64,
    pub rel_q: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Deviation {
    pub max_rel_m: f64,
    pub max_abs_p: f64,
    pub max_rel_q: f64,
    /// Where `max_rel_q` is attained.
    pub worst_q_at: Option<(f64, i32)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentsSummary {
    pub closure: String,
    pub a0: f64,
    /// Scaled rate norm of the system at the unperturbed comb.
    pub fixed_point_rhs: f64,
    pub q_nu: Option<f64>,
    pub l1: Option<f64>,
    /// `sup q_n(t) <= 8 delta0^(3/2) e^(-nu t)` after burn-in.
    pub q_envelope_holds: Option<bool>,
    pub clipped_variances: usize,
    pub steps: u64,
    pub rejected: u64,
    pub grid: Option<Deviation>,
}

#[derive(Debug, Clone)]
pub struct MomentsReport {
    pub summary: MomentsSummary,
    pub trajectory: Vec<TrajectoryRow>,
    pub comparison: Vec<ComparisonRow>,
}

fn sup_q(s: &MomentState) -> f64 {
    (0..s.len()).filter(|&i| s.present[i]).map(|i| s.q[i]).fold(0.0, f64::max)
}

fn dplus_p(s: &MomentState) -> f64 {
    (1..s.len()).filter(|&i| s.present[i] && s.present[i - 1]).map(|i| (s.p[i] - s.p[i - 1]).abs()).fold(0.0, f64::max)
}

/// Scaled rate norm of the moment system at the comb `a_n(A, rho)`.
pub fn fixed_point_rhs(mm: &MomentModel, a: f64, rho: f64, window: IndexWindow) -> Result<f64, CliError> {
    let comb = a_coeffs(&mm.model, a, rho, window)?;
    let m: Vec<f64> = window.indices().map(|n| comb.ln_m_bar_at(n).exp()).collect();
    let s = MomentState::new(0.0, window.n_lo, m, vec![rho; window.len()], vec![0.0; window.len()])?;
    Ok(mm.rhs(&s).scaled_norm(&s, mm.delta0))
}

pub fn compare(ode: &[MomentState], grid: &[MomentState]) -> (Vec<ComparisonRow>, Deviation) {
    let mut rows = Vec::new();
    let mut dev = Deviation { max_rel_m: 0.0, max_abs_p: 0.0, max_rel_q: 0.0, worst_q_at: None };
    for (a, b) in ode.iter().zip(grid) {
        for n in b.indices() {
            let i = b.idx(n);
            if !(a.present[i] && b.present[i]) {
                continue;
            }
            let rel_m = (a.m[i] - b.m[i]).abs() / b.m[i];
            let abs_p = (a.p[i] - b.p[i]).abs();
            let rel_q = if b.q[i] > 0.0 { (a.q[i] - b.q[i]).abs() / b.q[i] } else if a.q[i] == 0.0 { 0.0 } else { f64::INFINITY };
            dev.max_rel_m = dev.max_rel_m.max(rel_m);
            dev.max_abs_p = dev.max_abs_p.max(abs_p);
            if rel_q > dev.max_rel_q {
                dev.max_rel_q = rel_q;
                dev.worst_q_at = Some((b.t, n));
            }
            rows.push(ComparisonRow {
                t: b.t,
                n,
                m_ode: a.m[i],
                m_grid: b.m[i],
                p_ode: a.p[i],
                p_grid: b.p[i],
                q_ode: a.q[i],
                q_grid: b.q[i],
                rel_m,
                abs_p,
                rel_q,
            });
        }
    }
    (rows, dev)
}

pub fn analyse(config: &ExperimentConfig) -> Result<MomentsReport, CliError> {
    config.validate()?;
    let model = config.kernel_model()?;
    let d0 = config.peaks.delta0;
    let rho = config.peaks.rho;
    let (a0, _) = resolve_a(config, &model, rho)?;
    let init = initial_data(config, &model, a0)?;
    let sim = grid_sim(config, &model)?;
    let mut grid = grid_initial(&sim, config, &init)?;
    // both systems start from the moments of the same discretised measure
    let s0 = extract_moments(&grid);
    let closure = match config.moments.closure {
        ClosureKind::LeadingOrder => ClosureOptions::leading_order(),
        ClosureKind::Gaussian => ClosureOptions::gaussian(),
    };
    let mm = MomentModel::new(model.clone(), d0, closure)?;
    let times = sample_times(config);
    let traj = mm.integrate(&s0, &times, config.time.tol)?;
    let mut states = vec![s0.clone()];
    states.extend(traj.states.iter().cloned());
    let fixed_point_rhs = fixed_point_rhs(&mm, a0, rho, IndexWindow::new(s0.n_lo, s0.n_top())?)?;

    let t: Vec<f64> = states.iter().map(|s| s.t).collect();
    let sq: Vec<f64> = states.iter().map(sup_q).collect();
    let q_fit = fit_decay(&t, &sq, Envelope::Exp, config.time.burn_in).ok();
    let q_nu = q_fit.map(|f| f.nu);
    let env_c = 8.0 * d0.powf(1.5);
    let l1 = q_nu.map(|nu| states.iter().map(|s| dplus_p(s) * (0.5 * nu * s.t).exp() / (2.0 * d0)).fold(0.0, f64::max));
    let q_envelope_holds = q_nu.map(|nu| nu > 0.0 && states.iter().filter(|s| s.t >= config.time.burn_in).all(|s| sup_q(s) <= env_c * (-nu * s.t).exp()));
    let trajectory = states
        .iter()
        .flat_map(|s| {
            s.indices().map(move |n| {
                let i = s.idx(n);
                TrajectoryRow {
                    t: s.t,
                    n,
                    m: s.m[i],
                    p: s.p[i],
                    q: s.q[i],
                    q_envelope: q_nu.map_or(f64::NAN, |nu| env_c * (-nu * s.t).exp()),
                    dplus_p_envelope: match (q_nu, l1) {
                        (Some(nu), Some(l)) => 2.0 * l * d0 * (-0.5 * nu * s.t).exp(),
                        _ => f64::NAN,
                    },
                }
            })
        })
        .collect();

    let (comparison, dev) = if config.moments.compare_grid {
        let mut stats = StepStats::default();
        let mut g = vec![s0];
        g.extend(sim.run(&mut grid, &times, &mut stats)?);
        let (rows, dev) = compare(&states, &g);
        (rows, Some(dev))
    } else {
        (Vec::new(), None)
    };
    Ok(MomentsReport {
        summary: MomentsSummary {
            closure: format!("{:?}", config.moments.closure),
            a0,
            fixed_point_rhs,
            q_nu,
            l1,
            q_envelope_holds,
            clipped_variances: traj.clipped.len(),
            steps: traj.steps,
            rejected: traj.rejected,
            grid: dev,
        },
        trajectory,
        comparison,
    })
}

pub fn run(config: &ExperimentConfig, dir: &mut RunDir) -> Result<serde_json::Value, CliError> {
    let r = analyse(config)?;
    dir.csv("trajectory.csv", &r.trajectory)?;
    if !r.comparison.is_empty() {
        dir.csv("comparison.csv", &r.comparison)?;
    }
    Ok(serde_json::to_value(&r.summary)?)
}
