//! Linearised semigroup: decay traces, truncation, the fundamental solution
//! table and the Poincaré constant.

use super::resolve_a;
use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::RunDir;
use peakdyn::kernels::KernelModel;
use peakdyn::linear::{
    discrete_derivative, evolve_trace, fit_decay, fundamental_psi, poincare_constant, psi_difference_constant, psi_mass,
    random_sequence, DecayFit, Envelope, PoincareWeights, Side, SigmaCoeffs, WeightedSeq,
};
use peakdyn::stationary::{m_bar, IndexWindow, ShiftSequence};
use rand::Rng;
use serde::Serialize;

/// Fresh samples used to certify the Poincaré constant.
pub const CERTIFY_SAMPLES: usize = 10_000;
/// Peaks added on each side when checking the constant under window growth.
pub const GROWTH: i32 = 4;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitRecord {
    pub c: f64,
    pub a: f64,
    pub nu: f64,
    pub residual: f64,
}

impl From<DecayFit> for FitRecord {
    fn from(f: DecayFit) -> Self {
        Self { c: f.c, a: f.a, nu: f.nu, residual: f.residual }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub pair: usize,
    pub t: f64,
    pub dplus_norm: f64,
    pub envelope: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairReport {
    pub theta: f64,
    pub theta_tilde: f64,
    /// `(theta_tilde - theta) / beta`.
    pub target_exponent: f64,
    /// `C t^-a` on the short times.
    pub short: FitRecord,
    /// `C e^(-nu t)` after burn-in.
    pub long: FitRecord,
    /// `C t^-a e^(-nu t)` over every sample, used for the envelope column.
    pub overall: FitRecord,
    pub nu_positive: bool,
    /// `|a - target| <= 0.2 target`.
    pub exponent_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PsiRow {
    pub ell: i32,
    pub n: i32,
    /// `(2^(beta ell)/4) int_0^inf Psi_n` by adaptive quadrature.
    pub mass_quadrature: f64,
    /// The same from the partial fractions.
    pub mass_closed: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PsiSummary {
    pub max_normalisation_err: f64,
    /// Largest gap between the two-level solution and its closed form.
    pub max_two_level_err: f64,
    /// Constant in the difference bound, per `ell`.
    pub difference_constants: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PoincareReport {
    pub window: (i32, i32),
    pub sample_sup: f64,
    pub c0: f64,
    pub exact: f64,
    pub certify_samples: usize,
    pub violations: usize,
    pub largest_fresh_ratio: f64,
    pub grown_window: (i32, i32),
    pub grown_c0: f64,
    pub growth_rel_change: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncationReport {
    pub n_trunc: i32,
    /// Largest `|y_n(t)|` above the truncation over every sample.
    pub max_above: f64,
    pub exact_zero: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MovingReport {
    pub eta0: f64,
    /// Whether the shift path leaves `[-delta0, delta0]`.
    pub outside_hypotheses: bool,
    pub long: Option<FitRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LinearSummary {
    pub a: f64,
    pub window: (i32, i32),
    pub pairs: Vec<PairReport>,
    pub truncation: TruncationReport,
    pub psi: PsiSummary,
    pub poincare: PoincareReport,
    /// `1 / (4 c0)` next to the first fitted rate.
    pub nu_poincare: f64,
    pub nu_fitted: Option<f64>,
    pub moving: MovingReport,
}

#[derive(Debug, Clone)]
pub struct LinearReport {
    pub summary: LinearSummary,
    pub traces: Vec<TraceRow>,
    pub psi_rows: Vec<PsiRow>,
}

/// `40` log-spaced times in `[1e-5, 0.1]`.
pub fn short_times() -> Vec<f64> {
    (0..40).map(|i| 10f64.powf(-5.0 + 4.0 * i as f64 / 39.0)).collect()
}

/// Alternating signs of unit `theta`-norm on `n > 0`, zero elsewhere.
pub fn alternating(window: IndexWindow, theta: f64, top: i32) -> WeightedSeq {
    WeightedSeq::from_fn(window, theta, |n| {
        if n > 0 && n <= top {
            let s = if n % 2 == 0 { 1.0 } else { -1.0 };
            s * (-theta * n as f64).exp2()
        } else {
            0.0
        }
    })
}

fn dplus_norms(ys: &[WeightedSeq], theta_tilde: f64) -> Vec<f64> {
    ys.iter().map(|y| discrete_derivative(y, Side::Plus).norm_with(theta_tilde)).collect()
}

pub fn decay_pair(
    coeffs: &SigmaCoeffs,
    beta: f64,
    theta: f64,
    theta_tilde: f64,
    long_times: &[f64],
    burn_in: f64,
    tol: f64,
) -> Result<(PairReport, Vec<(f64, f64)>), CliError> {
    let short = short_times();
    let mut times = short.clone();
    times.extend(long_times.iter().copied().filter(|&t| t > short[short.len() - 1]));
    let y0 = alternating(coeffs.window, theta, coeffs.window.n_hi);
    let ys = evolve_trace(coeffs, &y0, 0.0, &times, tol)?;
    let v = dplus_norms(&ys, theta_tilde);
    let k = short.len();
    let short_fit = fit_decay(&short, &v[..k], Envelope::Power, 0.0)?;
    let long_fit = fit_decay(&times[k..], &v[k..], Envelope::Exp, burn_in)?;
    let overall = fit_decay(&times, &v, Envelope::PowerExp, 0.0)?;
    let target = (theta_tilde - theta) / beta;
    let rep = PairReport {
        theta,
        theta_tilde,
        target_exponent: target,
        short: short_fit.into(),
        long: long_fit.into(),
        overall: overall.into(),
        nu_positive: long_fit.nu > 0.0,
        exponent_ok: (short_fit.a - target).abs() <= 0.2 * target.abs(),
    };
    Ok((rep, times.into_iter().zip(v).collect()))
}

pub fn truncation_check(coeffs: SigmaCoeffs, n_trunc: i32, times: &[f64], tol: f64) -> Result<TruncationReport, CliError> {
    let w = coeffs.window;
    let c = coeffs.truncated(n_trunc)?;
    let y0 = alternating(w, 0.0, n_trunc);
    let ys = evolve_trace(&c, &y0, 0.0, times, tol)?;
    let max_above = ys
        .iter()
        .flat_map(|y| w.indices().filter(move |&n| n > n_trunc).map(move |n| y.get(n).abs()))
        .fold(0.0, f64::max);
    Ok(TruncationReport { n_trunc, max_above, exact_zero: max_above == 0.0 })
}

/// Normalisation by quadrature, the two-level closed form and the
/// difference constants for `ell, n - ell` in `0..=levels`.
pub fn psi_table(beta: f64, levels: i32) -> (Vec<PsiRow>, PsiSummary) {
    let mut rows = Vec::new();
    let mut max_norm = 0.0f64;
    for ell in 0..=levels {
        let l0 = (beta * ell as f64).exp2() / 4.0;
        for n in ell..=ell + 6 {
            // Psi_n decays at least like exp(-l0 t) (times a polynomial)
            let t_max = 80.0 / l0;
            let q = quadrature::integrate(|t| fundamental_psi(beta, ell, n, t), 0.0, t_max, 1e-13);
            let mass_quadrature = l0 * q.integral;
            max_norm = max_norm.max((mass_quadrature - 1.0).abs());
            rows.push(PsiRow { ell, n, mass_quadrature, mass_closed: psi_mass(beta, ell, n) });
        }
    }
    let times: Vec<f64> = (0..=200).map(|i| 0.05 * i as f64).collect();
    let mut max_two = 0.0f64;
    for ell in 0..=levels {
        let a = (beta * ell as f64).exp2() / 4.0;
        let b = (beta * (ell + 1) as f64).exp2() / 4.0;
        for &t in &times {
            let closed = b / (b - a) * ((-a * t).exp() - (-b * t).exp());
            max_two = max_two.max((fundamental_psi(beta, ell, ell + 1, t) - closed).abs());
        }
    }
    let difference_constants = (0..=levels).map(|ell| psi_difference_constant(beta, ell, 6, &times)).collect();
    (rows, PsiSummary { max_normalisation_err: max_norm, max_two_level_err: max_two, difference_constants })
}

pub fn poincare<R: Rng>(
    model: &KernelModel<f64>,
    a: f64,
    shift: impl Fn(IndexWindow) -> Result<ShiftSequence<f64>, CliError>,
    window: IndexWindow,
    samples: usize,
    rng: &mut R,
) -> Result<PoincareReport, CliError> {
    let weights = PoincareWeights::new(model, &m_bar(model, a, &shift(window)?)?);
    let est = poincare_constant(&weights, samples, rng);
    let mut violations = 0;
    let mut largest = 0.0f64;
    for _ in 0..CERTIFY_SAMPLES {
        let r = weights.ratio(&random_sequence(rng, window.len()));
        largest = largest.max(r);
        if r > est.c0 {
            violations += 1;
        }
    }
    // grown on the right only while m_bar stays representable
    let wide = IndexWindow::new(window.n_lo - GROWTH, window.n_hi + GROWTH)?;
    let wide_prof = m_bar(model, a, &shift(wide)?)?;
    let top = (window.n_hi..=wide.n_hi).take_while(|&n| !wide_prof.is_underflow(n)).last().unwrap_or(window.n_hi);
    let grown = IndexWindow::new(wide.n_lo, top)?;
    let gw = PoincareWeights::new(model, &m_bar(model, a, &shift(grown)?)?);
    let grown_c0 = poincare_constant(&gw, samples, rng).c0;
    let change = (grown_c0 - est.c0).abs() / est.c0;
    Ok(PoincareReport {
        window: (window.n_lo, window.n_hi),
        sample_sup: est.sample_sup,
        c0: est.c0,
        exact: est.exact,
        certify_samples: CERTIFY_SAMPLES,
        violations,
        largest_fresh_ratio: largest,
        grown_window: (grown.n_lo, grown.n_hi),
        grown_c0,
        growth_rel_change: change,
        stable: change <= 0.1,
    })
}

pub fn analyse(config: &ExperimentConfig) -> Result<LinearReport, CliError> {
    config.validate()?;
    let model = config.kernel_model()?;
    let rho = config.peaks.rho;
    let (a, _) = resolve_a(config, &model, rho)?;
    let lw = IndexWindow::new(config.window.n_lo, config.linear.n_hi)?;
    let coeffs = SigmaCoeffs::constant_shift(&model, a, rho, lw)?;
    let long: Vec<f64> = super::sample_times(config);
    let tol = config.time.tol;

    let mut pairs = Vec::new();
    let mut traces = Vec::new();
    for (k, &[theta, theta_tilde]) in config.linear.theta_pairs.iter().enumerate() {
        let (rep, trace) = decay_pair(&coeffs, model.beta, theta, theta_tilde, &long, config.time.burn_in, tol)?;
        let o = rep.overall;
        traces.extend(trace.into_iter().map(|(t, v)| TraceRow { pair: k, t, dplus_norm: v, envelope: o.c * t.powf(-o.a) * (-o.nu * t).exp() }));
        pairs.push(rep);
    }

    let nt = config.n_trunc().min(lw.n_hi - 1);
    let truncation = truncation_check(coeffs.clone(), nt, &long, tol)?;
    let (psi_rows, psi) = psi_table(model.beta, config.linear.psi_levels);

    let mut rng = super::rng(config);
    let pw = config.index_window()?;
    let poincare = poincare(&model, a, |w| Ok(ShiftSequence::constant(w, rho)), pw, config.linear.poincare_samples, &mut rng)?;
    let nu_poincare = 1.0 / (4.0 * poincare.c0);

    // shifts relaxing to rho: p_n(t) = rho + (eta0/2) (-1)^n e^(-t/2)
    let eta0 = config.linear.eta0;
    let path = move |t: f64| {
        let amp = 0.5 * eta0 * (-0.5 * t).exp();
        let p = lw.indices().map(|n| rho + if n % 2 == 0 { amp } else { -amp }).collect();
        ShiftSequence::new(lw, p, rho, rho).expect("finite shifts")
    };
    let outside_hypotheses = rho.abs() + 0.5 * eta0 > config.peaks.delta0;
    let moving_coeffs = SigmaCoeffs::time_dependent(&model, a, lw, path);
    let moving_long = config.linear.theta_pairs.first().and_then(|&[theta, theta_tilde]| {
        decay_pair(&moving_coeffs, model.beta, theta, theta_tilde, &long, config.time.burn_in, tol).ok().map(|(r, _)| r.long)
    });

    Ok(LinearReport {
        summary: LinearSummary {
            a,
            window: (lw.n_lo, lw.n_hi),
            nu_fitted: pairs.first().map(|p| p.long.nu),
            pairs,
            truncation,
            psi,
            poincare,
            nu_poincare,
            moving: MovingReport { eta0, outside_hypotheses, long: moving_long },
        },
        traces,
        psi_rows,
    })
}

pub fn run(config: &ExperimentConfig, dir: &mut RunDir) -> Result<serde_json::Value, CliError> {
    let r = analyse(config)?;
    dir.csv("decay.csv", &r.traces)?;
    dir.csv("psi.csv", &r.psi_rows)?;
    dir.text(
        "decay.gp",
        "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n\
         set output 'decay.png'\nset logscale xy\nset xlabel 't'\n\
         plot 'decay.csv' using 2:3 with points title 'D+ norm', '' using 2:4 with lines title 'envelope'\n",
    )?;
    Ok(serde_json::to_value(&r.summary)?)
}
