//! Shapes of the remainder inequalities: Monte Carlo constants, the variance
//! super-solution sandwich, the intra-peak identities and the remainders
//! along a simulated trajectory.

use super::{grid_initial, grid_sim, initial_data, resolve_a, sample_times};
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::RunDir;
use peakdyn::grid_sim::{extract_moments, GridMeasure, StepStats};
use peakdyn::linear::hatq_supersolution;
use peakdyn::moment_ode::{taylor_identity_check, MomentState};
use peakdyn::representation::{
    decompose_state, derivative, remainder_constants, remainders_big_r, remainders_r, BoundSetup, EmpiricalConstant,
};
use peakdyn::stationary::solve_a_for_mass;
use serde::Serialize;

/// Allowed relative change of a constant when the sample is doubled.
pub const STABILITY_TOL: f64 = 0.1;

#[derive(Debug, Clone, Serialize)]
pub struct ConstantRow {
    pub name: String,
    pub zero_row: f64,
    pub value: f64,
    pub value_doubled: f64,
    pub rel_change: f64,
    pub finite: bool,
    pub stable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct HatQReport {
    pub n0: i32,
    pub depth: i32,
    pub nu: f64,
    pub c1: f64,
    pub c2: f64,
    pub holds: bool,
    pub failure: Option<(i32, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    /// `|M - sum 2^(n+p_n) m_n| / sum 2^n m_n q_n`.
    pub mass_identity_ratio: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub big_r1: f64,
    pub big_r2: f64,
    pub big_r3: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsSummary {
    pub samples: usize,
    pub zero_rows_exact: bool,
    pub constants_finite: bool,
    pub constants_stable: bool,
    pub hatq: HatQReport,
    /// Largest remainder ratio of the intra-peak identities on the initial
    /// and final grid states.
    pub taylor_max_ratio: f64,
    pub taylor_max_zeroth: f64,
    pub mass_identity_max_ratio: f64,
    /// Whether the mass identity ratio stays below the Taylor constant.
    pub mass_identity_holds: bool,
}

#[derive(Debug, Clone)]
pub struct BoundsReport {
    pub summary: BoundsSummary,
    pub constants: Vec<ConstantRow>,
    pub trajectory: Vec<TrajectoryRow>,
}

pub fn constant_rows(a: &[EmpiricalConstant], b: &[EmpiricalConstant]) -> Vec<ConstantRow> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let rel = if x.value == y.value { 0.0 } else { (y.value - x.value).abs() / x.value.abs() };
            ConstantRow {
                name: x.name.to_string(),
                zero_row: x.zero_row,
                value: x.value,
                value_doubled: y.value,
                rel_change: rel,
                finite: x.value.is_finite() && y.value.is_finite(),
                stable: rel <= STABILITY_TOL,
            }
        })
        .collect()
}

/// Times in `[0.1, 10]` for the sandwich check.
pub fn hatq_times() -> Vec<f64> {
    (0..=99).map(|i| 0.1 + 9.9 * i as f64 / 99.0).collect()
}

fn mass_identity_ratio(mass: f64, s: &MomentState) -> f64 {
    let mut lead = 0.0;
    let mut scale = 0.0;
    for n in s.indices() {
        let i = s.idx(n);
        lead += (n as f64 + s.p[i]).exp2() * s.m[i];
        scale += (n as f64).exp2() * s.m[i] * s.q[i];
    }
    if scale == 0.0 {
        return if mass == lead { 0.0 } else { f64::INFINITY };
    }
    (mass - lead).abs() / scale
}

fn trajectory_rows(
    config: &ExperimentConfig,
    model: &peakdyn::kernels::KernelModel<f64>,
    mass: f64,
    a_m: f64,
    states: &[MomentState],
) -> Result<Vec<TrajectoryRow>, CliError> {
    let beta = model.beta;
    let b = &config.bounds;
    let t: Vec<f64> = states.iter().map(|s| s.t).collect();
    let len = states[0].len();
    // dp/dt per peak by finite differences along the samples
    let dp: Vec<Vec<f64>> = (0..len).map(|i| derivative(&t, &states.iter().map(|s| s.p[i]).collect::<Vec<_>>())).collect();
    let mut rows = Vec::with_capacity(states.len());
    for (k, s) in states.iter().enumerate() {
        let dec = decompose_state(model, s, 0.0, beta)?;
        let dpdt: Vec<f64> = (0..len).map(|i| dp[i][k]).collect();
        let yr = remainders_r(model, &dec, a_m, &dpdt, &s.q)?;
        let pr = remainders_big_r(model, &dec, a_m, &s.q)?;
        rows.push(TrajectoryRow {
            t: s.t,
            mass_identity_ratio: mass_identity_ratio(mass, s),
            r1: yr.r1.norm_with(beta - 1.0),
            r2: yr.r2.norm_with(b.theta2 - beta + 1.0),
            r3: yr.r3.norm_with(b.theta1 - beta + 1.0),
            big_r1: pr.big_r1.norm_with(b.theta1 - 1.0),
            big_r2: pr.big_r2.norm_with(b.theta2 - beta),
            big_r3: pr.big_r3.norm_with(0.0),
        });
    }
    Ok(rows)
}

pub fn analyse(config: &ExperimentConfig) -> Result<BoundsReport, CliError> {
    config.validate()?;
    let model = config.kernel_model()?;
    let b = &config.bounds;
    let d0 = config.peaks.delta0;
    let rho = config.peaks.rho;
    let (a0, _) = resolve_a(config, &model, rho)?;

    let setup = BoundSetup { a_m: a0, delta0: d0, theta1: b.theta1, theta2: b.theta2, ..BoundSetup::default() };
    let mut rng = super::rng(config);
    let c1 = remainder_constants(&model, &setup, b.samples, &mut rng)?;
    let c2 = remainder_constants(&model, &setup, 2 * b.samples, &mut rng)?;
    let constants = constant_rows(&c1, &c2);

    let hq = hatq_supersolution(&model, b.hatq_n0, b.hatq_depth, d0, b.hatq_delta1, b.hatq_nu, b.theta2, &hatq_times())?;
    let hatq = HatQReport { n0: hq.n0, depth: b.hatq_depth, nu: b.hatq_nu, c1: hq.c1, c2: hq.c2, holds: hq.holds, failure: hq.failure };

    let init = initial_data(config, &model, a0)?;
    let sim = grid_sim(config, &model)?;
    let mut grid: GridMeasure = grid_initial(&sim, config, &init)?;
    let mass = grid.xi_mass();
    let a_m = solve_a_for_mass(&model, mass, rho)?;
    let first = taylor_identity_check(&model, &grid);
    let mut states = vec![extract_moments(&grid)];
    let mut stats = StepStats::default();
    states.extend(sim.run(&mut grid, &sample_times(config), &mut stats)?);
    let last = taylor_identity_check(&model, &grid);
    let trajectory = trajectory_rows(config, &model, mass, a_m, &states)?;

    let taylor_max_zeroth = first.max_zeroth.max(last.max_zeroth);
    let mass_identity_max_ratio = trajectory.iter().map(|r| r.mass_identity_ratio).fold(0.0, f64::max);
    Ok(BoundsReport {
        summary: BoundsSummary {
            samples: b.samples,
            zero_rows_exact: constants.iter().all(|c| c.zero_row == 0.0),
            constants_finite: constants.iter().all(|c| c.finite),
            constants_stable: constants.iter().all(|c| c.stable),
            hatq,
            taylor_max_ratio: first.max_ratio.max(last.max_ratio),
            taylor_max_zeroth,
            mass_identity_max_ratio,
            mass_identity_holds: mass_identity_max_ratio <= taylor_max_zeroth,
        },
        constants,
        trajectory,
    })
}

pub fn run(config: &ExperimentConfig, dir: &mut RunDir) -> Result<serde_json::Value, CliError> {
    let r = analyse(config)?;
    dir.csv("constants.csv", &r.constants)?;
    dir.csv("trajectory.csv", &r.trajectory)?;
    dir.gnuplot("trajectory", "remainder norms", "t", &[("r1", 3), ("r2", 4), ("r3", 5), ("R1", 6), ("R2", 7), ("R3", 8)], true)?;
    Ok(serde_json::to_value(&r.summary)?)
}
