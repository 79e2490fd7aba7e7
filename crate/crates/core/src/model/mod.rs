//! Soft decision-tree probability model.
//!
//! A topology's continuous parameters are the split simplexes `Δ_j`, split
//! thresholds `τ_j`, and (regression only) leaf means `μ_k` and a shared noise
//! scale `σ`. Samplers work on an unconstrained real vector: stick-breaking
//! for each simplex, logit for thresholds and log for `σ`.

mod posterior;
mod prior;
mod soft;
mod transform;

pub use posterior::{ClampedParams, LogDensity, ModelContext, Target};
pub use prior::log_prior_params;
pub use soft::{leaf_probs, log_likelihood, psi, SoftTree};
pub use transform::{jacobian_logdet, to_constrained, to_unconstrained, ParamLayout};

use thiserror::Error;

use crate::data::Task;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter/topology mismatch: {what} expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite {what} at coordinate {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("non-finite {what}")]
    NonFiniteValue { what: &'static str },
    #[error("{what} = {value} is outside its support")]
    Domain { what: &'static str, value: f64 },
    #[error("model task does not match dataset task")]
    TaskMismatch,
    #[error("invalid hyperparameter {name} = {value}")]
    Hyper { name: &'static str, value: f64 },
}

/// Hyperparameters of the local parameter priors and the classification
/// compound likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHyperparams {
    /// Symmetric Dirichlet concentration for every split simplex.
    pub dirichlet_alpha: f64,
    /// Normal prior on leaf means: (mean, variance).
    pub mu_prior: (f64, f64),
    /// Inverse-gamma prior on σ: (shape, scale).
    pub sigma_prior: (f64, f64),
    /// Per-class Dirichlet concentration α_m of the compound likelihood.
    pub class_alpha: f64,
}

impl Default for ModelHyperparams {
    fn default() -> Self {
        Self {
            dirichlet_alpha: 1.0,
            mu_prior: (0.0, 1.0),
            sigma_prior: (1.0, 1.0),
            class_alpha: 1.0,
        }
    }
}

impl ModelHyperparams {
    /// Defaults with the leaf-mean prior centred on the training targets.
    pub fn for_targets(mean: f64, variance: f64) -> Self {
        Self {
            mu_prior: (mean, if variance > 0.0 { variance } else { 1.0 }),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let checks = [
            ("dirichlet_alpha", self.dirichlet_alpha),
            ("mu_prior.variance", self.mu_prior.1),
            ("sigma_prior.shape", self.sigma_prior.0),
            ("sigma_prior.scale", self.sigma_prior.1),
            ("class_alpha", self.class_alpha),
        ];
        for (name, value) in checks {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ModelError::Hyper { name, value });
            }
        }
        if !self.mu_prior.0.is_finite() {
            return Err(ModelError::Hyper {
                name: "mu_prior.mean",
                value: self.mu_prior.0,
            });
        }
        Ok(())
    }
}

/// Constrained local parameters of one topology.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalParams {
    pub deltas: Vec<Vec<f64>>,
    pub taus: Vec<f64>,
    pub leaf_means: Vec<f64>,
    pub sigma: Option<f64>,
}

impl LocalParams {
    /// Checks the simplex, threshold and scale invariants.
    pub fn validate(&self) -> Result<(), ModelError> {
        for d in &self.deltas {
            let sum: f64 = d.iter().sum();
            if d.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
                return Err(ModelError::Domain {
                    what: "simplex sum",
                    value: sum,
                });
            }
        }
        for &t in &self.taus {
            if !(t > 0.0 && t < 1.0) {
                return Err(ModelError::Domain {
                    what: "tau",
                    value: t,
                });
            }
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(ModelError::Domain {
                    what: "sigma",
                    value: s,
                });
            }
        }
        if let Some(&m) = self.leaf_means.iter().find(|m| !m.is_finite()) {
            return Err(ModelError::Domain {
                what: "leaf mean",
                value: m,
            });
        }
        Ok(())
    }

    pub(crate) fn check_shape(&self, n_internal: usize, n_leaves: usize, n_x: usize, task: Task) -> Result<(), ModelError> {
        if self.deltas.len() != n_internal {
            return Err(ModelError::Shape {
                what: "simplex count",
                expected: n_internal,
                found: self.deltas.len(),
            });
        }
        if let Some(d) = self.deltas.iter().find(|d| d.len() != n_x) {
            return Err(ModelError::Shape {
                what: "simplex length",
                expected: n_x,
                found: d.len(),
            });
        }
        if self.taus.len() != n_internal {
            return Err(ModelError::Shape {
                what: "threshold count",
                expected: n_internal,
                found: self.taus.len(),
            });
        }
        if task.is_regression() {
            if self.leaf_means.len() != n_leaves {
                return Err(ModelError::Shape {
                    what: "leaf mean count",
                    expected: n_leaves,
                    found: self.leaf_means.len(),
                });
            }
            if self.sigma.is_none() {
                return Err(ModelError::Shape {
                    what: "sigma count",
                    expected: 1,
                    found: 0,
                });
            }
        }
        Ok(())
    }
}

/// Geometric interpolation of the split sharpness from `h_init` (at
/// `frac = 0`) to `h_final` (at `frac = 1`).
pub fn anneal_h(frac: f64, h_init: f64, h_final: f64) -> f64 {
    let frac = frac.clamp(0.0, 1.0);
    if frac >= 1.0 {
        return h_final;
    }
    h_init * (h_final / h_init).powf(frac)
}
