//! Experiment configuration, read from TOML.

use crate::error::CliError;
use peakdyn::kernels::KernelModel;
use peakdyn::stationary::{IndexWindow, ShiftSequence};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Stationary,
    Simulate,
    Moments,
    Linear,
    Stability,
    VerifyBounds,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Stationary => "stationary",
            Self::Simulate => "simulate",
            Self::Moments => "moments",
            Self::Linear => "linear",
            Self::Stability => "stability",
            Self::VerifyBounds => "verify-bounds",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    Canonical,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub alpha: f64,
    pub beta: f64,
    pub k0: f64,
    pub gamma0: f64,
    /// Half-width of the cut-off support.
    pub halfwidth: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { family: KernelFamily::Canonical, alpha: 0.3, beta: 1.5, k0: 1.0, gamma0: 1.0, halfwidth: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub n_lo: i32,
    pub n_hi: i32,
    /// Truncation index; defaults to `n_hi`.
    pub n_trunc: Option<i32>,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { n_lo: -10, n_hi: 10, n_trunc: None }
    }
}

/// The stationary state the experiment starts from or compares with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PeakConfig {
    pub delta0: f64,
    /// Cells per peak interval of the grid simulator.
    pub cells: usize,
    /// Total mass; used when `a` is absent.
    pub mass: Option<f64>,
    /// Decay parameter `A`; takes precedence over `mass`.
    pub a: Option<f64>,
    pub rho: f64,
    /// Explicit shift per peak on the window; overrides `rho`.
    pub p_profile: Option<Vec<f64>>,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self { delta0: 0.05, cells: 64, mass: None, a: Some(0.1), rho: 0.0, p_profile: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    /// `||y0||_1`; zero for the unperturbed comb.
    pub y_norm: f64,
    /// Largest `|p_n(0) - rho|`.
    pub p_amplitude: f64,
    /// Half-width of the initial bumps in each peak.
    pub blob_width: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self { y_norm: 0.025, p_amplitude: 0.025, blob_width: 0.0125 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeConfig {
    pub t_end: f64,
    /// Number of equally spaced samples in `(0, t_end]`.
    pub samples: usize,
    /// Start of the window used by the decay fits.
    pub burn_in: f64,
    /// Relative tolerance of the ODE integrators.
    pub tol: f64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self { t_end: 10.0, samples: 100, burn_in: 1.0, tol: 1e-8 }
    }
}

/// Values fanned out over worker threads, one run each.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rho: Vec<f64>,
    pub mass: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClosureKind {
    /// Drop every term of order `q` and beyond.
    LeadingOrder,
    /// Gaussian intra-peak profile, three-point quadrature.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentsConfig {
    pub closure: ClosureKind,
    /// Also run the grid simulator and compare.
    pub compare_grid: bool,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self { closure: ClosureKind::LeadingOrder, compare_grid: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearConfig {
    /// `(theta, theta_tilde)` pairs for the decay traces.
    pub theta_pairs: Vec<[f64; 2]>,
    /// Top of the window used by the short-time traces.
    pub n_hi: i32,
    pub poincare_samples: usize,
    /// Smallness threshold on the shift path.
    pub eta0: f64,
    /// Largest `ell` and `n - ell` in the fundamental-solution table.
    pub psi_levels: i32,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self { theta_pairs: vec![[0.0, 0.75]], n_hi: 24, poincare_samples: 1000, eta0: 0.05, psi_levels: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub samples: usize,
    pub theta1: f64,
    pub theta2: f64,
    /// Base index and depth of the variance super-solution.
    pub hatq_n0: i32,
    pub hatq_depth: i32,
    pub hatq_delta1: f64,
    pub hatq_nu: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self { samples: 1000, theta1: 0.6, theta2: 0.8, hatq_n0: -1, hatq_depth: 10, hatq_delta1: 0.1, hatq_nu: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub peaks: PeakConfig,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub moments: MomentsConfig,
    #[serde(default)]
    pub linear: LinearConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            seed: 0,
            kernel: KernelConfig::default(),
            window: WindowConfig::default(),
            peaks: PeakConfig::default(),
            perturbation: PerturbationConfig::default(),
            time: TimeConfig::default(),
            sweep: SweepConfig::default(),
            moments: MomentsConfig::default(),
            linear: LinearConfig::default(),
            bounds: BoundsConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn kernel_model(&self) -> Result<KernelModel<f64>, CliError> {
        let k = &self.kernel;
        match k.family {
            KernelFamily::Canonical => KernelModel::canonical(k.alpha, k.beta, k.k0, k.gamma0, k.halfwidth),
            KernelFamily::Flat => KernelModel::flat(k.k0, k.gamma0, k.halfwidth),
        }
        .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn index_window(&self) -> Result<IndexWindow, CliError> {
        IndexWindow::new(self.window.n_lo, self.window.n_hi).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn n_trunc(&self) -> i32 {
        self.window.n_trunc.unwrap_or(self.window.n_hi)
    }

    /// The configured shift on `window`, extended by its end values.
    pub fn shift_on(&self, window: IndexWindow) -> Result<ShiftSequence<f64>, CliError> {
        let base = self.index_window()?;
        let p = match &self.peaks.p_profile {
            None => return Ok(ShiftSequence::constant(window, self.peaks.rho)),
            Some(p) => p,
        };
        if p.len() != base.len() {
            return Err(CliError::Config(format!("p_profile has {} entries for {} peaks", p.len(), base.len())));
        }
        let vals = window
            .indices()
            .map(|n| p[(n.clamp(base.n_lo, base.n_hi) - base.n_lo) as usize])
            .collect();
        ShiftSequence::new(window, vals, p[p.len() - 1], p[0]).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks every field that the runs rely on.
    pub fn validate(&self) -> Result<(), CliError> {
        let model = self.kernel_model()?;
        let w = self.index_window()?;
        let bad = |m: String| Err(CliError::Config(m));
        let nt = self.n_trunc();
        if !(nt > 0 && nt <= w.n_hi) {
            return bad(format!("n_trunc = {nt} must lie in (0, n_hi]"));
        }
        let d0 = self.peaks.delta0;
        if !(d0 > 0.0 && d0 < 0.5 * (1.0 - model.epsilon0)) {
            return bad(format!("delta0 = {d0} outside (0, (1 - epsilon0)/2) = (0, {:.4})", 0.5 * (1.0 - model.epsilon0)));
        }
        if self.peaks.cells < 8 || self.peaks.cells % 2 != 0 {
            return bad("cells must be even and at least 8".into());
        }
        match (self.peaks.a, self.peaks.mass) {
            (Some(a), _) if !(a > 0.0 && a.is_finite()) => return bad(format!("a = {a} must be positive")),
            (None, Some(m)) if !(m > 0.0 && m.is_finite()) => return bad(format!("mass = {m} must be positive")),
            (None, None) if self.sweep.mass.is_empty() => return bad("one of peaks.a, peaks.mass or sweep.mass is required".into()),
            _ => {}
        }
        if self.sweep.mass.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return bad("sweep masses must be positive".into());
        }
        self.shift_on(w)?;
        let t = &self.time;
        if !(t.t_end > 0.0 && t.t_end.is_finite()) || t.samples < 2 {
            return bad("time.t_end must be positive and time.samples at least 2".into());
        }
        if !(t.tol > 0.0 && t.tol < 1e-2) || !(t.burn_in >= 0.0 && t.burn_in < t.t_end) {
            return bad("time.tol must lie in (0, 1e-2) and time.burn_in in [0, t_end)".into());
        }
        let pt = &self.perturbation;
        if !(pt.y_norm >= 0.0 && pt.p_amplitude >= 0.0 && pt.blob_width >= 0.0) {
            return bad("perturbation sizes must be nonnegative".into());
        }
        if !(pt.blob_width < 0.5 * d0) {
            return bad(format!("blob_width = {} must be below delta0/2", pt.blob_width));
        }
        // the initial bumps must fit inside [-delta0, delta0] around every peak
        let reach = self.peaks.rho.abs() + pt.p_amplitude + pt.blob_width;
        let perturbed = !matches!(self.kind, ExperimentKind::Stationary | ExperimentKind::Linear);
        if perturbed && self.peaks.p_profile.is_none() && reach > d0 {
            return bad(format!("|rho| + p_amplitude + blob_width = {reach} exceeds delta0 = {d0}"));
        }
        let b = &self.bounds;
        if !(model.beta - 1.0 < b.theta1 && b.theta1 < b.theta2 && b.theta2 < 1.0) {
            return bad(format!("need beta - 1 < theta1 < theta2 < 1, got {} {}", b.theta1, b.theta2));
        }
        if b.samples == 0 || b.hatq_depth < 1 || !(0.0..1.0).contains(&b.hatq_delta1) || !(b.hatq_nu > 0.0) {
            return bad("bounds: samples > 0, depth >= 1, delta1 in [0,1), nu > 0".into());
        }
        let l = &self.linear;
        if l.theta_pairs.iter().any(|p| !(p[0] >= 0.0 && p[1] >= p[0] && p[1] < model.beta)) {
            return bad("linear.theta_pairs need 0 <= theta <= theta_tilde < beta".into());
        }
        if l.n_hi < 1 || l.poincare_samples == 0 || l.psi_levels < 0 {
            return bad("linear: n_hi >= 1, poincare_samples > 0, psi_levels >= 0".into());
        }
        Ok(())
    }

    /// Copies for every sweep value; the config itself when nothing is swept.
    pub fn expand(&self) -> Vec<(String, ExperimentConfig)> {
        let mut out = Vec::new();
        let masses: Vec<Option<f64>> = if self.sweep.mass.is_empty() { vec![None] } else { self.sweep.mass.iter().map(|&m| Some(m)).collect() };
        let rhos: Vec<Option<f64>> = if self.sweep.rho.is_empty() { vec![None] } else { self.sweep.rho.iter().map(|&r| Some(r)).collect() };
        for m in &masses {
            for r in &rhos {
                let mut c = self.clone();
                c.sweep = SweepConfig::default();
                let mut tag = Vec::new();
                if let Some(m) = m {
                    c.peaks.mass = Some(*m);
                    c.peaks.a = None;
                    tag.push(format!("mass{m}"));
                }
                if let Some(r) = r {
                    c.peaks.rho = *r;
                    c.peaks.p_profile = None;
                    tag.push(format!("rho{r}"));
                }
                out.push((tag.join("_"), c));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for kind in [ExperimentKind::Stationary, ExperimentKind::Stability, ExperimentKind::VerifyBounds] {
            ExperimentConfig::new(kind).validate().unwrap();
        }
    }

    #[test]
    fn parses_nested_toml() {
        let c = ExperimentConfig::from_toml(
            "kind = \"verify-bounds\"\nseed = 9\n[peaks]\ndelta0 = 0.04\nmass = 2.0\n[sweep]\nrho = [0.0, 0.01]\n",
        )
        .unwrap();
        assert_eq!(c.kind, ExperimentKind::VerifyBounds);
        assert_eq!(c.seed, 9);
        assert_eq!(c.peaks.delta0, 0.04);
        assert_eq!(c.expand().len(), 2);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml("kind = \"simulate\"\nfoo = 1\n").is_err());
        let mut c = ExperimentConfig::new(ExperimentKind::Simulate);
        c.peaks.delta0 = 0.5;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::new(ExperimentKind::Simulate);
        c.peaks.p_profile = Some(vec![0.0; 3]);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::new(ExperimentKind::Stability);
        c.peaks.rho = 0.02;
        assert!(c.validate().is_err());
        c.kind = ExperimentKind::Stationary;
        c.validate().unwrap();
    }
}
