//! Check loss and its convolution-smoothed versions.
//!
//! For a symmetric kernel `K` with CDF `G`, the smoothed loss
//! `ℓ_h(u) = ∫ ρ_τ(v) K_h(v − u) dv` has the closed form
//!
//! ```text
//! ℓ_h(u) = u·(τ − G(−u/h)) + h·ψ(u/h),   ψ(t) = ∫_t^∞ z K(z) dz
//! ℓ'_h(u) = τ − G(−u/h)
//! ```
//!
//! so every kernel only has to provide `G`, `K` and the partial first moment `ψ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{std_normal_cdf, std_normal_pdf};

/// Check (pinball) loss `ρ_τ(u) = max{τu, (τ−1)u}`.
pub fn pinball(u: f64, tau: f64) -> f64 {
    // `+ 0.0` turns the −0 at the kink into +0.
    (tau * u).max((tau - 1.0) * u) + 0.0
}

/// Subgradient of the check loss, `τ − 1{u < 0}` (so `τ` at `u = 0`).
pub fn pinball_grad(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        tau - 1.0
    } else {
        tau
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    Uniform,
    Epanechnikov,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [
        KernelKind::Gaussian,
        KernelKind::Uniform,
        KernelKind::Epanechnikov,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Gaussian => "gaussian",
            KernelKind::Uniform => "uniform",
            KernelKind::Epanechnikov => "epanechnikov",
        }
    }

    /// Half-width of the support, `None` for unbounded support.
    pub fn support(self) -> Option<f64> {
        match self {
            KernelKind::Gaussian => None,
            KernelKind::Uniform | KernelKind::Epanechnikov => Some(1.0),
        }
    }

    pub fn density(self, t: f64) -> f64 {
        match self {
            KernelKind::Gaussian => std_normal_pdf(t),
            KernelKind::Uniform => {
                if t.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            KernelKind::Epanechnikov => {
                if t.abs() <= 1.0 {
                    0.75 * (1.0 - t * t)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn cdf(self, t: f64) -> f64 {
        match self {
            KernelKind::Gaussian => std_normal_cdf(t),
            KernelKind::Uniform => {
                if t <= -1.0 {
                    0.0
                } else if t >= 1.0 {
                    1.0
                } else {
                    0.5 * (t + 1.0)
                }
            }
            KernelKind::Epanechnikov => {
                if t <= -1.0 {
                    0.0
                } else if t >= 1.0 {
                    1.0
                } else {
                    0.5 + (3.0 * t - t * t * t) / 4.0
                }
            }
        }
    }

    /// `ψ(t) = ∫_t^∞ z K(z) dz`, even in `t`.
    pub fn partial_moment(self, t: f64) -> f64 {
        match self {
            KernelKind::Gaussian => std_normal_pdf(t),
            KernelKind::Uniform => {
                if t.abs() >= 1.0 {
                    0.0
                } else {
                    0.25 * (1.0 - t * t)
                }
            }
            KernelKind::Epanechnikov => {
                if t.abs() >= 1.0 {
                    0.0
                } else {
                    let s = 1.0 - t * t;
                    3.0 / 16.0 * s * s
                }
            }
        }
    }

    /// `E|Z|` for `Z ~ K`; bounds `ℓ_h − ρ_τ` by `h·E|Z|`.
    pub fn mean_abs(self) -> f64 {
        2.0 * self.partial_moment(0.0)
    }

    /// Kernel variance `σ²_K`. Carried as metadata; training does not use it.
    pub fn second_moment(self) -> f64 {
        match self {
            KernelKind::Gaussian => 1.0,
            KernelKind::Uniform => 1.0 / 3.0,
            KernelKind::Epanechnikov => 0.2,
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(KernelKind::Gaussian),
            "uniform" => Ok(KernelKind::Uniform),
            "epanechnikov" => Ok(KernelKind::Epanechnikov),
            other => Err(Error::InvalidArgument(format!("unknown kernel `{other}`"))),
        }
    }
}

/// Kernel CDF `G`.
pub fn kernel_cdf(kind: KernelKind, t: f64) -> f64 {
    kind.cdf(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Smoothing {
    RawPinball,
    Kernel { kernel: KernelKind, bandwidth: f64 },
}

/// Quantile level plus the loss family used for training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub tau: f64,
    pub smoothing: Smoothing,
}

impl LossSpec {
    pub fn pinball(tau: f64) -> Result<Self> {
        let spec = LossSpec {
            tau,
            smoothing: Smoothing::RawPinball,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn smoothed(tau: f64, kernel: KernelKind, bandwidth: f64) -> Result<Self> {
        let spec = LossSpec {
            tau,
            smoothing: Smoothing::Kernel { kernel, bandwidth },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if let Smoothing::Kernel { bandwidth, .. } = self.smoothing {
            if !(bandwidth > 0.0 && bandwidth.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "bandwidth must be positive, got {bandwidth}"
                )));
            }
        }
        Ok(())
    }

    /// Same loss family at a different quantile level.
    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        let spec = LossSpec { tau, ..*self };
        spec.validate()?;
        Ok(spec)
    }

    pub fn is_smoothed(&self) -> bool {
        matches!(self.smoothing, Smoothing::Kernel { .. })
    }

    /// Loss of a single residual `u = y − f(x)`.
    pub fn value(&self, u: f64) -> f64 {
        match self.smoothing {
            Smoothing::RawPinball => pinball(u, self.tau),
            Smoothing::Kernel { kernel, bandwidth } => smoothed_value(u, self.tau, kernel, bandwidth),
        }
    }

    /// Derivative (subgradient for the raw loss) with respect to the residual.
    pub fn derivative(&self, u: f64) -> f64 {
        match self.smoothing {
            Smoothing::RawPinball => pinball_grad(u, self.tau),
            Smoothing::Kernel { kernel, bandwidth } => self.tau - kernel.cdf(-u / bandwidth),
        }
    }

    /// Mean loss over `residuals`; writes `ℓ'(rᵢ)/n` into `grad`.
    pub fn mean_loss_and_grad_into(&self, residuals: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(residuals.len(), grad.len());
        let inv_n = 1.0 / residuals.len() as f64;
        let mut total = 0.0;
        for (g, &r) in grad.iter_mut().zip(residuals) {
            total += self.value(r);
            *g = self.derivative(r) * inv_n;
        }
        total * inv_n
    }

    pub fn mean_loss(&self, residuals: &[f64]) -> f64 {
        residuals.iter().map(|&r| self.value(r)).sum::<f64>() / residuals.len() as f64
    }
}

fn smoothed_value(u: f64, tau: f64, kernel: KernelKind, h: f64) -> f64 {
    if let Some(support) = kernel.support() {
        if u.abs() > support * h {
            return pinball(u, tau);
        }
    }
    let t = u / h;
    u * (tau - kernel.cdf(-t)) + h * kernel.partial_moment(t)
}

fn require_smoothing(spec: &LossSpec) -> Result<(KernelKind, f64)> {
    spec.validate()?;
    match spec.smoothing {
        Smoothing::Kernel { kernel, bandwidth } => Ok((kernel, bandwidth)),
        Smoothing::RawPinball => Err(Error::InvalidArgument(
            "smoothed loss requested for a raw pinball spec".into(),
        )),
    }
}

/// Closed-form smoothed loss `ℓ_h(u)`.
pub fn smoothed_loss(u: f64, spec: &LossSpec) -> Result<f64> {
    let (kernel, h) = require_smoothing(spec)?;
    Ok(smoothed_value(u, spec.tau, kernel, h))
}

/// Exact derivative `ℓ'_h(u) = τ − G(−u/h)`.
pub fn smoothed_grad(u: f64, spec: &LossSpec) -> Result<f64> {
    let (kernel, h) = require_smoothing(spec)?;
    Ok(spec.tau - kernel.cdf(-u / h))
}

/// Mean loss over a residual vector and the gradient of that mean with
/// respect to each residual.
pub fn batch_loss_and_grad(residuals: &[f64], spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    spec.validate()?;
    if residuals.is_empty() {
        return Err(Error::InvalidArgument("empty residual vector".into()));
    }
    let mut grad = vec![0.0; residuals.len()];
    let loss = spec.mean_loss_and_grad_into(residuals, &mut grad);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(tau: f64, h: f64) -> LossSpec {
        LossSpec::smoothed(tau, KernelKind::Gaussian, h).unwrap()
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball(1.0, 0.5), 0.5);
        assert_eq!(pinball(-1.0, 0.5), 0.5);
        assert_eq!(pinball(2.0, 0.25), 0.5);
        assert_eq!(pinball(-2.0, 0.25), 1.5);
        assert_eq!(pinball(0.0, 0.3), 0.0);
        assert_eq!(pinball_grad(0.0, 0.3), 0.3);
    }

    #[test]
    fn kernel_cdf_examples() {
        assert_eq!(kernel_cdf(KernelKind::Uniform, 0.0), 0.5);
        assert!((kernel_cdf(KernelKind::Epanechnikov, 0.5) - 0.84375).abs() < 1e-15);
        assert!((kernel_cdf(KernelKind::Gaussian, 1.0) - 0.841_344_746_068_543).abs() < 1e-8);
        for kind in KernelKind::ALL {
            for &t in &[0.2, 0.9, 1.5, 4.0] {
                assert!((kind.cdf(-t) - (1.0 - kind.cdf(t))).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn smoothed_loss_examples() {
        let v = smoothed_loss(0.0, &gauss(0.5, 1.0)).unwrap();
        assert!((v - 0.398_942_280_401_432_7).abs() < 1e-12);

        let uni = LossSpec::smoothed(0.7, KernelKind::Uniform, 0.4).unwrap();
        assert!((smoothed_loss(0.0, &uni).unwrap() - 0.1).abs() < 1e-15);

        let uni = LossSpec::smoothed(0.3, KernelKind::Uniform, 0.1).unwrap();
        assert_eq!(smoothed_loss(0.5, &uni).unwrap(), pinball(0.5, 0.3));
        assert_eq!(smoothed_loss(0.5, &uni).unwrap(), 0.15);
    }

    #[test]
    fn smoothed_grad_examples() {
        assert_eq!(smoothed_grad(0.0, &gauss(0.5, 0.37)).unwrap(), 0.0);
        let uni = LossSpec::smoothed(0.5, KernelKind::Uniform, 0.2).unwrap();
        assert!((smoothed_grad(0.1, &uni).unwrap() - 0.25).abs() < 1e-15);
        let epa = LossSpec::smoothed(0.25, KernelKind::Epanechnikov, 1.0).unwrap();
        assert_eq!(smoothed_grad(1.0, &epa).unwrap(), 0.25);
    }

    #[test]
    fn smoothed_requires_kernel() {
        let raw = LossSpec::pinball(0.5).unwrap();
        assert!(smoothed_loss(0.0, &raw).is_err());
        assert!(smoothed_grad(0.0, &raw).is_err());
        assert!(LossSpec::smoothed(0.5, KernelKind::Gaussian, 0.0).is_err());
        assert!(LossSpec::pinball(1.0).is_err());
    }

    #[test]
    fn compact_kernels_exact_outside_support() {
        for kind in [KernelKind::Uniform, KernelKind::Epanechnikov] {
            let spec = LossSpec::smoothed(0.2, kind, 0.3).unwrap();
            for &u in &[-2.0, -0.31, 0.300_001, 1.7] {
                assert_eq!(spec.value(u), pinball(u, 0.2));
            }
        }
    }

    #[test]
    fn mean_abs_values() {
        assert!((KernelKind::Gaussian.mean_abs() - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert_eq!(KernelKind::Uniform.mean_abs(), 0.5);
        assert_eq!(KernelKind::Epanechnikov.mean_abs(), 0.375);
    }

    #[test]
    fn batch_examples() {
        let raw = LossSpec::pinball(0.5).unwrap();
        let (loss, grad) = batch_loss_and_grad(&[1.0, -1.0], &raw).unwrap();
        assert_eq!(loss, 0.5);
        assert_eq!(grad, vec![0.25, -0.25]);

        for kind in KernelKind::ALL {
            let spec = LossSpec::smoothed(0.8, kind, 0.2).unwrap();
            let (loss, grad) = batch_loss_and_grad(&[0.0; 4], &spec).unwrap();
            assert_eq!(loss, spec.value(0.0));
            assert!(loss > 0.0);
            for g in grad {
                assert!((g - 0.3 / 4.0).abs() < 1e-15);
            }
        }
        assert!(batch_loss_and_grad(&[], &raw).is_err());
    }
}
