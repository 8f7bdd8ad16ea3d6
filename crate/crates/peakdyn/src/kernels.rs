//! Coagulation and fragmentation kernels.
//!
//! The coagulation kernel is concentrated near the diagonal,
//! `K(xi, eta) = k((xi+eta)/2) Q(2 eta/(xi+eta) - 1) / (xi+eta)`, with a smooth
//! cut-off `Q`. The fragmentation rate is `gamma(xi)`. The canonical family is
//! `k(xi) = k0 + xi^(alpha+1)` and `gamma(xi) = gamma0 + xi^beta`.

use crate::{PeakError, Real, Result};

/// Which closed forms `k` and `gamma` take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelShape {
    /// `k = k0 + xi^(alpha+1)`, `gamma = gamma0 + xi^beta`.
    Canonical,
    /// `k = k0`, `gamma = gamma0`. Test-only; exempt from the growth checks.
    Flat,
}

/// Kernel parameters together with the derived exponents and constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelModel<T> {
    pub shape: KernelShape,
    pub alpha: T,
    pub beta: T,
    pub k0: T,
    pub gamma0: T,
    /// Half-width `w` of the support of `Q` in the variable `s`.
    pub q_halfwidth: T,
    /// Exponent of the small-size correction of `k`, `alpha + 1`.
    pub alpha_bar: T,
    /// Large-size correction exponent of `gamma`; zero for the canonical family.
    pub beta_tilde: T,
    /// Small-size correction exponent of `gamma`, equal to `beta`.
    pub beta_bar: T,
    pub k1: T,
    pub k2: T,
    pub gamma1: T,
    pub gamma2: T,
    /// `K(2^y, 2^z) = 0` whenever `|y - z| >= epsilon0`.
    pub epsilon0: T,
}

impl<T: Real> KernelModel<T> {
    /// Canonical kernels with `Q` supported on `|s| < w`.
    pub fn canonical(alpha: T, beta: T, k0: T, gamma0: T, q_halfwidth: T) -> Result<Self> {
        let one = T::one();
        let zero = T::zero();
        let finite = [alpha, beta, k0, gamma0, q_halfwidth]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(PeakError::Parameter("kernel parameters must be finite".into()));
        }
        if !(alpha > zero && alpha < one) {
            return Err(PeakError::Parameter(format!("alpha = {alpha} outside (0,1)")));
        }
        if !(beta > one && beta < T::lit(2.0)) {
            return Err(PeakError::Parameter(format!("beta = {beta} outside (1,2)")));
        }
        if !(k0 > zero && gamma0 > zero) {
            return Err(PeakError::Parameter("k0 and gamma0 must be positive".into()));
        }
        if !(q_halfwidth > zero && q_halfwidth < T::lit(1.0 / 3.0) + T::epsilon()) {
            return Err(PeakError::Parameter(format!(
                "cut-off half-width {q_halfwidth} outside (0, 1/3]"
            )));
        }
        let epsilon0 = Self::support_width(q_halfwidth);
        if !(epsilon0 < one) {
            return Err(PeakError::Parameter(format!(
                "cut-off half-width {q_halfwidth} gives epsilon0 = {epsilon0}, not below 1"
            )));
        }
        Ok(Self {
            shape: KernelShape::Canonical,
            alpha,
            beta,
            k0,
            gamma0,
            q_halfwidth,
            alpha_bar: alpha + one,
            beta_tilde: zero,
            beta_bar: beta,
            k1: alpha + one,
            k2: alpha * (alpha + one),
            gamma1: beta,
            gamma2: beta * (beta - one),
            epsilon0,
        })
    }

    /// Constant kernels `k = k0`, `gamma = gamma0`, used as analytic test cases.
    pub fn flat(k0: T, gamma0: T, q_halfwidth: T) -> Result<Self> {
        let zero = T::zero();
        if !(k0 > zero && gamma0 > zero && q_halfwidth > zero && q_halfwidth < T::lit(0.5)) {
            return Err(PeakError::Parameter("flat kernel parameters out of range".into()));
        }
        Ok(Self {
            shape: KernelShape::Flat,
            alpha: zero,
            beta: zero,
            k0,
            gamma0,
            q_halfwidth,
            alpha_bar: zero,
            beta_tilde: zero,
            beta_bar: zero,
            k1: zero,
            k2: zero,
            gamma1: zero,
            gamma2: zero,
            epsilon0: Self::support_width(q_halfwidth),
        })
    }

    /// `k0 = gamma0 = 1`, `alpha = 0.3`, `beta = 1.5`, `w = 0.25`.
    pub fn default_canonical() -> Self {
        Self::canonical(T::lit(0.3), T::lit(1.5), T::one(), T::one(), T::lit(0.25))
            .expect("default parameters are admissible")
    }

    /// `log2((1+w)/(1-w))` rounded up by `1e-12`.
    fn support_width(w: T) -> T {
        let one = T::one();
        ((one + w) / (one - w)).log2() + T::lit(1e-12)
    }

    fn check_size(xi: T) -> Result<()> {
        if xi.is_finite() && xi > T::zero() {
            Ok(())
        } else {
            Err(PeakError::Domain(format!("size {xi} must be positive and finite")))
        }
    }

    /// `k(xi)`.
    pub fn eval_k(&self, xi: T) -> Result<T> {
        Self::check_size(xi)?;
        Ok(self.k(xi))
    }

    /// `gamma(xi)`.
    pub fn eval_gamma(&self, xi: T) -> Result<T> {
        Self::check_size(xi)?;
        Ok(self.gamma(xi))
    }

    /// Cut-off `Q(s)`.
    pub fn eval_q(&self, s: T) -> T {
        let r = s / self.q_halfwidth;
        let r2 = r * r;
        if r2 >= T::one() {
            return T::zero();
        }
        (T::one() - T::one() / (T::one() - r2)).exp()
    }

    /// `K(xi, eta)`.
    pub fn eval_kernel(&self, xi: T, eta: T) -> Result<T> {
        Self::check_size(xi)?;
        Self::check_size(eta)?;
        Ok(self.coag(xi, eta))
    }

    /// `K(xi, eta)` without argument checks.
    pub fn coag(&self, xi: T, eta: T) -> T {
        let sum = xi + eta;
        // 2 eta/(xi+eta) - 1 written antisymmetrically so that K is exactly symmetric
        let s = (eta - xi) / sum;
        let two = T::lit(2.0);
        self.k(sum / two) * self.eval_q(s) / sum
    }

    /// `K(2^y, 2^z)`, evaluated through `s = tanh((z-y) ln2 / 2)`.
    pub fn coag_log(&self, y: T, z: T) -> T {
        let two = T::lit(2.0);
        let s = ((z - y) * T::LN_2() / two).tanh();
        if s.abs() >= self.q_halfwidth {
            return T::zero();
        }
        let ln_sum = T::LN_2() * y.max(z) + (-(y - z).abs() * T::LN_2()).exp().ln_1p();
        let half_sum_log2 = ln_sum / T::LN_2() - T::one();
        (self.ln_k_log2(half_sum_log2) - ln_sum).exp() * self.eval_q(s)
    }

    /// `k(xi)` without checks.
    pub fn k(&self, xi: T) -> T {
        match self.shape {
            KernelShape::Canonical => self.k0 + xi.powf(self.alpha + T::one()),
            KernelShape::Flat => self.k0,
        }
    }

    /// `gamma(xi)` without checks.
    pub fn gamma(&self, xi: T) -> T {
        match self.shape {
            KernelShape::Canonical => self.gamma0 + xi.powf(self.beta),
            KernelShape::Flat => self.gamma0,
        }
    }

    /// `k'(xi)`.
    pub fn dk(&self, xi: T) -> T {
        match self.shape {
            KernelShape::Canonical => (self.alpha + T::one()) * xi.powf(self.alpha),
            KernelShape::Flat => T::zero(),
        }
    }

    /// `k''(xi)`.
    pub fn d2k(&self, xi: T) -> T {
        match self.shape {
            KernelShape::Canonical => {
                self.alpha * (self.alpha + T::one()) * xi.powf(self.alpha - T::one())
            }
            KernelShape::Flat => T::zero(),
        }
    }

    /// `gamma'(xi)`.
    pub fn dgamma(&self, xi: T) -> T {
        match self.shape {
            KernelShape::Canonical => self.beta * xi.powf(self.beta - T::one()),
            KernelShape::Flat => T::zero(),
        }
    }

    /// `gamma''(xi)`.
    pub fn d2gamma(&self, xi: T) -> T {
        match self.shape {
            KernelShape::Canonical => {
                self.beta * (self.beta - T::one()) * xi.powf(self.beta - T::lit(2.0))
            }
            KernelShape::Flat => T::zero(),
        }
    }

    /// `ln k(2^x)`, finite for every finite `x`.
    pub fn ln_k_log2(&self, x: T) -> T {
        match self.shape {
            KernelShape::Canonical => {
                T::log_add_exp(self.k0.ln(), (self.alpha + T::one()) * x * T::LN_2())
            }
            KernelShape::Flat => self.k0.ln(),
        }
    }

    /// `ln gamma(2^x)`, finite for every finite `x`.
    pub fn ln_gamma_log2(&self, x: T) -> T {
        match self.shape {
            KernelShape::Canonical => T::log_add_exp(self.gamma0.ln(), self.beta * x * T::LN_2()),
            KernelShape::Flat => self.gamma0.ln(),
        }
    }

    /// `xi k'(xi) / k(xi)` at `xi = 2^x`.
    pub fn k_elasticity_log2(&self, x: T) -> T {
        match self.shape {
            KernelShape::Canonical => {
                let a1 = self.alpha + T::one();
                // xi^(a1) / (k0 + xi^(a1)) computed as a logistic in log space
                let t = a1 * x * T::LN_2() - self.k0.ln();
                a1 * logistic(t)
            }
            KernelShape::Flat => T::zero(),
        }
    }

    /// `xi gamma'(xi) / gamma(xi)` at `xi = 2^x`.
    pub fn gamma_elasticity_log2(&self, x: T) -> T {
        match self.shape {
            KernelShape::Canonical => {
                let t = self.beta * x * T::LN_2() - self.gamma0.ln();
                self.beta * logistic(t)
            }
            KernelShape::Flat => T::zero(),
        }
    }

    /// Numerical check of the growth and derivative bounds on a sample of sizes.
    ///
    /// Returns the smallest constants compatible with the sample and the
    /// uniform constant `C_K`. Sizes where the stored constants are exceeded
    /// are reported as an error.
    pub fn validate_assumptions(&self, grid: &[T]) -> Result<ValidationReport<T>> {
        if self.shape == KernelShape::Flat {
            return Ok(ValidationReport {
                exempt: true,
                k1_min: T::zero(),
                k2_min: T::zero(),
                gamma1_min: T::zero(),
                gamma2_min: T::zero(),
                c_k: self.c_k(),
                gamma_increasing: true,
            });
        }
        if grid.is_empty() {
            return Err(PeakError::Parameter("empty validation grid".into()));
        }
        let one = T::one();
        let slack = one + T::lit(1e-12).max(T::epsilon() * T::lit(16.0));
        let (mut k1m, mut k2m, mut g1m, mut g2m) = (T::zero(), T::zero(), T::zero(), T::zero());
        let mut offending = Vec::new();
        for &xi in grid {
            Self::check_size(xi)?;
            let big = xi >= one;
            let sk1 = if big { xi.powf(self.alpha) } else { xi.powf(self.alpha_bar - one) };
            let sk2 = if big {
                xi.powf(self.alpha - one)
            } else {
                xi.powf(self.alpha_bar - T::lit(2.0))
            };
            let sg1 = if big {
                xi.powf(self.beta - one)
            } else {
                xi.powf(self.beta_bar - one)
            };
            let sg2 = if big {
                xi.powf(self.beta - T::lit(2.0))
            } else {
                xi.powf(self.beta_bar - T::lit(2.0))
            };
            let r = [
                self.dk(xi).abs() / sk1,
                self.d2k(xi).abs() / sk2,
                self.dgamma(xi).abs() / sg1,
                self.d2gamma(xi).abs() / sg2,
            ];
            k1m = k1m.max(r[0]);
            k2m = k2m.max(r[1]);
            g1m = g1m.max(r[2]);
            g2m = g2m.max(r[3]);
            let stored = [self.k1, self.k2, self.gamma1, self.gamma2];
            if r.iter().zip(stored.iter()).any(|(v, c)| *v > *c * slack)
                || !(self.k(xi) > T::zero() && self.gamma(xi) > T::zero())
            {
                offending.push(xi.as_f64());
            }
        }
        let mut sorted: Vec<T> = grid.iter().copied().filter(|&x| x >= one).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite sizes"));
        let gamma_increasing = sorted
            .windows(2)
            .all(|w| w[0] == w[1] || self.gamma(w[1]) > self.gamma(w[0]));
        if !gamma_increasing {
            offending.push(f64::NAN);
        }
        if !offending.is_empty() {
            return Err(PeakError::Parameter(format!(
                "kernel bounds violated at sizes {offending:?}"
            )));
        }
        Ok(ValidationReport {
            exempt: false,
            k1_min: k1m,
            k2_min: k2m,
            gamma1_min: g1m,
            gamma2_min: g2m,
            c_k: self.c_k(),
            gamma_increasing,
        })
    }

    /// `sup (2^y+2^z) K(2^y,2^z) / (1 + 2^y 2^z)` over `|y - z| < 1`, by a
    /// scan of `y` in `[-60, 60]` refined by golden-section search.
    pub fn c_k(&self) -> T {
        let f = |y: T, d: T| {
            let z = y + d;
            let ln_sum = T::log_add_exp(y * T::LN_2(), z * T::LN_2());
            let ln_den = T::log_add_exp(T::zero(), (y + z) * T::LN_2());
            (ln_sum - ln_den).exp() * self.coag_log(y, z)
        };
        let mut best = T::zero();
        let mut arg = (T::zero(), T::zero());
        let ny = 481;
        let nd = 41;
        for i in 0..ny {
            let y = T::lit(-60.0 + 120.0 * i as f64 / (ny - 1) as f64);
            for j in 0..nd {
                let d = self.epsilon0 * T::lit(-1.0 + 2.0 * j as f64 / (nd - 1) as f64);
                let v = f(y, d);
                if v > best {
                    best = v;
                    arg = (y, d);
                }
            }
        }
        // coordinate refinement around the best grid point
        let (mut y, mut d) = arg;
        let mut hy = T::lit(0.25);
        let mut hd = self.epsilon0 / T::lit(20.0);
        for _ in 0..60 {
            for (dy, dd) in [(hy, T::zero()), (-hy, T::zero()), (T::zero(), hd), (T::zero(), -hd)] {
                let v = f(y + dy, d + dd);
                if v > best {
                    best = v;
                    y = y + dy;
                    d = d + dd;
                }
            }
            hy = hy * T::lit(0.7);
            hd = hd * T::lit(0.7);
        }
        best
    }
}

fn logistic<T: Real>(t: T) -> T {
    if t >= T::zero() {
        T::one() / (T::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (T::one() + e)
    }
}

/// Outcome of [`KernelModel::validate_assumptions`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport<T> {
    /// Flat test kernels skip the checks.
    pub exempt: bool,
    pub k1_min: T,
    pub k2_min: T,
    pub gamma1_min: T,
    pub gamma2_min: T,
    pub c_k: T,
    pub gamma_increasing: bool,
}

/// Log-spaced sizes in `[1e-6, 1e6]`.
pub fn default_validation_grid<T: Real>(points: usize) -> Vec<T> {
    let points = points.max(2);
    (0..points)
        .map(|i| T::lit(10f64.powf(-6.0 + 12.0 * i as f64 / (points - 1) as f64)))
        .collect()
}
