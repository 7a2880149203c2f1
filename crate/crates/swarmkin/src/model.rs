//! Model data shared by every solver: parameters, interaction kernels, the
//! target region, and pointwise evaluation of the drift and diffusion fields.
//!
//! Conventions used throughout the crate:
//!
//! * points are slices of length `dim` (`dim` is 1 or 2),
//! * the confinement weight `lambda` and the alignment weight `mu` sum to 1,
//! * the target region is the closed ball of radius `delta` around `x0`;
//!   its indicator complement is the factor that switches the drift off
//!   inside the region.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridField;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model parameters: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("swarm has no particles")]
    EmptySwarm,
    #[error("swarm density has no mass")]
    ZeroMass,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// Parameters of the model. `lambda + mu == 1` is enforced on construction
/// and in config validation; both solvers rely on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Weight of the confining drift toward `x0`.
    pub lambda: f64,
    /// Weight of the pairwise alignment drift.
    pub mu: f64,
    /// Diffusion strength outside the target region.
    pub sigma2: f64,
    /// Radius of the target region.
    pub delta: f64,
    /// Center of the target region.
    pub x0: Vec<f64>,
    /// Spatial dimension, equal to `x0.len()`.
    pub dim: usize,
}

impl ModelParams {
    /// Builds parameters with `mu = 1 - lambda` and validates them.
    pub fn new(lambda: f64, sigma2: f64, delta: f64, x0: Vec<f64>) -> Result<Self, ModelError> {
        let dim = x0.len();
        let p = ModelParams { lambda, mu: 1.0 - lambda, sigma2, delta, x0, dim };
        let issues = p.validate();
        if issues.is_empty() {
            Ok(p)
        } else {
            Err(ModelError::Invalid(issues))
        }
    }

    /// Returns every violated constraint, empty when the parameters are
    /// usable. Callers that assemble configs report the whole list at once.
    pub fn validate(&self) -> Vec<String> {
        let mut issues = Vec::new();
        if !(self.lambda.is_finite() && (0.0..=1.0).contains(&self.lambda)) {
            issues.push(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.mu.is_finite() && (0.0..=1.0).contains(&self.mu)) {
            issues.push(format!("mu must lie in [0, 1], got {}", self.mu));
        }
        if (self.lambda + self.mu - 1.0).abs() > 1e-12 {
            issues.push(format!(
                "lambda + mu must equal 1 within 1e-12, got {}",
                self.lambda + self.mu
            ));
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            issues.push(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            issues.push(format!("delta must be positive, got {}", self.delta));
        }
        if self.dim == 0 || self.dim > MAX_DIM {
            issues.push(format!("dim must be 1 or 2, got {}", self.dim));
        }
        if self.x0.len() != self.dim {
            issues.push(format!(
                "x0 has {} components but dim is {}",
                self.x0.len(),
                self.dim
            ));
        }
        if self.x0.iter().any(|c| !c.is_finite()) {
            issues.push("x0 has a non-finite component".to_string());
        }
        issues
    }

    /// The target region as a standalone value.
    pub fn domain(&self) -> TargetDomain {
        TargetDomain { center: self.x0.clone(), radius: self.delta }
    }

    /// Upper bound of the variable diffusion coefficient.
    pub fn kappa_max(&self) -> f64 {
        self.sigma2 + 0.5 * self.delta * self.delta
    }
}

/// Pairwise interaction strength as a function of separation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InteractionKernel {
    /// Constant strength 1; the alignment drift then depends on the swarm
    /// only through its mean, which both solvers exploit.
    #[default]
    Uniform,
    /// Communication rate `(1 + |x - y|^2)^(-gamma)` decaying with distance.
    CuckerSmale { gamma: f64 },
}

impl InteractionKernel {
    /// Kernel value for a squared separation. Symmetric by construction:
    /// the value depends on the two points only through their distance.
    #[inline]
    pub fn eval_dist2(&self, dist2: f64) -> f64 {
        match *self {
            InteractionKernel::Uniform => 1.0,
            InteractionKernel::CuckerSmale { gamma } => {
                if gamma == 1.0 {
                    1.0 / (1.0 + dist2)
                } else {
                    (1.0 + dist2).powf(-gamma)
                }
            }
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, InteractionKernel::Uniform)
    }

    pub fn validate(&self) -> Vec<String> {
        match *self {
            InteractionKernel::Uniform => Vec::new(),
            InteractionKernel::CuckerSmale { gamma } => {
                if gamma.is_finite() && gamma > 0.0 {
                    Vec::new()
                } else {
                    vec![format!("kernel gamma must be positive, got {gamma}")]
                }
            }
        }
    }
}

/// Closed ball the agents are meant to cover.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDomain {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl TargetDomain {
    /// 1 outside the ball, 0 inside or on the boundary.
    #[inline]
    pub fn indicator_complement(&self, x: &[f64]) -> f64 {
        if dist2(x, &self.center) <= self.radius * self.radius {
            0.0
        } else {
            1.0
        }
    }
}

/// Squared Euclidean distance of two points of equal dimension.
#[inline]
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (ai, bi) in a.iter().zip(b) {
        let d = ai - bi;
        s += d * d;
    }
    s
}

/// Kernel value at a pair of points.
#[inline]
pub fn kernel_eval(kernel: &InteractionKernel, x: &[f64], y: &[f64]) -> f64 {
    kernel.eval_dist2(dist2(x, y))
}

/// 1 outside the target region, 0 inside or on the boundary.
#[inline]
pub fn indicator_complement(domain: &TargetDomain, x: &[f64]) -> f64 {
    domain.indicator_complement(x)
}

/// Variable diffusion coefficient of the regularized dynamics, for a target
/// region centered at `center`: quadratic well inside the region, flat
/// `sigma2` outside, continuous across the boundary.
#[inline]
pub fn kappa_eval(params: &ModelParams, x: &[f64], center: &[f64]) -> f64 {
    let r2 = dist2(x, center);
    let delta2 = params.delta * params.delta;
    if r2 < delta2 {
        params.sigma2 + 0.5 * (delta2 - r2)
    } else {
        params.sigma2
    }
}

/// A swarm seen either as a density on a grid or as particle positions.
/// `drift_B` accepts both so the two solvers can be cross-checked against
/// one shared definition.
pub enum SwarmView<'a> {
    Grid(&'a GridField),
    Particles { positions: &'a [f64], dim: usize },
}

/// Full drift field at a point: confinement toward `x0` plus the
/// kernel-weighted alignment with the swarm. The indicator of the target
/// region is *not* applied here; the solvers do that where it belongs.
/// Named after the drift operator B it evaluates.
#[allow(non_snake_case)]
pub fn drift_B(
    params: &ModelParams,
    kernel: &InteractionKernel,
    x: &[f64],
    swarm: &SwarmView,
) -> Result<Vec<f64>, ModelError> {
    let dim = params.dim;
    if x.len() != dim {
        return Err(ModelError::DimMismatch { expected: dim, got: x.len() });
    }
    let mut interaction = vec![0.0; dim];
    match swarm {
        SwarmView::Particles { positions, dim: pdim } => {
            if *pdim != dim {
                return Err(ModelError::DimMismatch { expected: dim, got: *pdim });
            }
            if positions.is_empty() {
                return Err(ModelError::EmptySwarm);
            }
            let n = positions.len() / dim;
            for j in 0..n {
                let y = &positions[j * dim..(j + 1) * dim];
                let w = kernel.eval_dist2(dist2(x, y));
                for a in 0..dim {
                    interaction[a] += w * (x[a] - y[a]);
                }
            }
            for v in &mut interaction {
                *v /= n as f64;
            }
        }
        SwarmView::Grid(field) => {
            if field.dim() != dim {
                return Err(ModelError::DimMismatch { expected: dim, got: field.dim() });
            }
            let mass = field.mass();
            if !(mass > 0.0) {
                return Err(ModelError::ZeroMass);
            }
            let vol = field.cell_volume();
            let mut y = [0.0; MAX_DIM];
            for (idx, &f) in field.values().iter().enumerate() {
                field.point_at(idx, &mut y);
                let w = kernel.eval_dist2(dist2(x, &y[..dim]));
                for a in 0..dim {
                    interaction[a] += w * (x[a] - y[a]) * f;
                }
            }
            for v in &mut interaction {
                *v *= vol;
            }
        }
    }
    let mut out = vec![0.0; dim];
    for a in 0..dim {
        out[a] = params.lambda * (x[a] - params.x0[a]) + params.mu * interaction[a];
    }
    Ok(out)
}

/// Mean of the regularized dynamics in closed form:
/// exponential relaxation of the initial mean toward `x0` at rate `lambda`.
pub fn mean_exact(params: &ModelParams, u0: &[f64], t: f64) -> Vec<f64> {
    let decay = (-params.lambda * t).exp();
    u0.iter()
        .zip(&params.x0)
        .map(|(u, c)| c + (u - c) * decay)
        .collect()
}
