//! Priors on the local parameters of a fixed topology.

use crate::math::{ln_gamma, LN_2PI};

use super::{LocalParams, ModelHyperparams};

/// Symmetric Dirichlet log-density given `log Δ`.
pub(crate) fn dirichlet_log_density(log_delta: &[f64], alpha: f64) -> f64 {
    let k = log_delta.len() as f64;
    let norm = ln_gamma(k * alpha) - k * ln_gamma(alpha);
    if alpha == 1.0 {
        return norm;
    }
    norm + (alpha - 1.0) * log_delta.iter().sum::<f64>()
}

pub(crate) fn normal_mean_log_density(mu: &[f64], mean: f64, var: f64) -> f64 {
    mu.iter()
        .map(|m| -0.5 * (LN_2PI + var.ln()) - (m - mean).powi(2) / (2.0 * var))
        .sum()
}

/// Inverse-gamma log-density in terms of `log σ`.
pub(crate) fn inv_gamma_log_density(log_sigma: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * log_sigma - scale * (-log_sigma).exp()
}

/// Sum of the Dirichlet, Beta(1,1), Normal and inverse-gamma terms. Values
/// outside the support give `-inf`.
pub fn log_prior_params(p: &LocalParams, hp: &ModelHyperparams) -> f64 {
    if p.validate().is_err() {
        return f64::NEG_INFINITY;
    }
    let mut total = 0.0;
    for d in &p.deltas {
        let logs: Vec<f64> = d.iter().map(|v| v.ln()).collect();
        total += dirichlet_log_density(&logs, hp.dirichlet_alpha);
    }
    // Beta(1,1) thresholds contribute zero inside (0,1).
    total += normal_mean_log_density(&p.leaf_means, hp.mu_prior.0, hp.mu_prior.1);
    if let Some(s) = p.sigma {
        total += inv_gamma_log_density(s.ln(), hp.sigma_prior.0, hp.sigma_prior.1);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{Continuous, InverseGamma, Normal};

    fn params(deltas: Vec<Vec<f64>>, taus: Vec<f64>, mu: Vec<f64>, sigma: Option<f64>) -> LocalParams {
        LocalParams {
            deltas,
            taus,
            leaf_means: mu,
            sigma,
        }
    }

    #[test]
    fn uniform_dirichlet_is_log_factorial() {
        let hp = ModelHyperparams::default();
        for n_x in 2..8usize {
            let d = vec![vec![1.0 / n_x as f64; n_x]];
            let p = params(d, vec![0.4], vec![], None);
            let fact: f64 = (1..n_x).map(|v| (v as f64).ln()).sum();
            assert!((log_prior_params(&p, &hp) - fact).abs() < 1e-10);
        }
    }

    #[test]
    fn tau_is_flat() {
        let hp = ModelHyperparams::default();
        let a = log_prior_params(&params(vec![vec![0.2, 0.8]], vec![0.01], vec![], None), &hp);
        let b = log_prior_params(&params(vec![vec![0.2, 0.8]], vec![0.77], vec![], None), &hp);
        assert_eq!(a, b);
    }

    #[test]
    fn normal_mode_value() {
        let hp = ModelHyperparams {
            mu_prior: (1.5, 2.0),
            ..Default::default()
        };
        let p = params(vec![], vec![], vec![1.5], None);
        assert!((log_prior_params(&p, &hp) + 0.5 * (LN_2PI + 2.0f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn matches_reference_densities() {
        let hp = ModelHyperparams {
            dirichlet_alpha: 2.5,
            mu_prior: (0.3, 0.7),
            sigma_prior: (2.0, 1.5),
            class_alpha: 1.0,
        };
        // A two-entry Dirichlet is a Beta on the first coordinate.
        let d = vec![0.2, 0.8];
        let dir_ln = statrs::distribution::Beta::new(2.5, 2.5).unwrap().ln_pdf(0.2);
        let norm = Normal::new(0.3, 0.7f64.sqrt()).unwrap();
        let ig = InverseGamma::new(2.0, 1.5).unwrap();
        let p = params(vec![d], vec![0.5], vec![-0.4, 1.1], Some(0.8));
        let oracle = dir_ln + norm.ln_pdf(-0.4) + norm.ln_pdf(1.1) + ig.ln_pdf(0.8);
        assert!((log_prior_params(&p, &hp) - oracle).abs() < 1e-10);
    }

    #[test]
    fn outside_support_is_neg_inf() {
        let hp = ModelHyperparams::default();
        let p = params(vec![vec![0.5, 0.5]], vec![1.2], vec![], None);
        assert_eq!(log_prior_params(&p, &hp), f64::NEG_INFINITY);
    }
}
