//! Layered adaptive importance sampling: Gaussian pseudo-samples around
//! NUTS draws give importance weights for the log marginal likelihood and a
//! weighted estimate of the local posterior.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::math::{log1mexp, logsumexp, softmax, LogSumExpAcc, LN_2PI};
use crate::model::LogDensity;
use crate::rng::StreamRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvidenceError {
    #[error("proposal covariance could not be factorized even with ridge {ridge:e}")]
    Factorization { ridge: f64 },
    #[error("every importance weight is zero")]
    AllWeightsZero,
    #[error("no pseudo-samples supplied")]
    Empty,
    #[error("chain {chain} has no draws")]
    EmptyChain { chain: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PhiMode {
    Basic,
    #[default]
    Spatial,
}

impl std::str::FromStr for PhiMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "basic" => Ok(Self::Basic),
            "spatial" => Ok(Self::Spatial),
            other => Err(format!("unknown phi mode '{other}' (expected basic or spatial)")),
        }
    }
}

impl std::fmt::Display for PhiMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Basic => "basic",
            Self::Spatial => "spatial",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSample {
    pub xi: Vec<f64>,
    pub log_target: f64,
    pub log_phi: f64,
    pub log_weight: f64,
    /// (draw, chain, pseudo-sample) indices
    pub source: (usize, usize, usize),
}

/// Gaussian proposal shape `N(0, Σ)` stored through its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct Proposal {
    chol: DMatrix<f64>,
    log_det: f64,
    pub ridge: f64,
}

impl Proposal {
    pub fn dim(&self) -> usize {
        self.chol.nrows()
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Builds the proposal from a covariance matrix, adding `ridge·I` and
    /// escalating it tenfold until the factorization succeeds.
    pub fn from_covariance(cov: &DMatrix<f64>, ridge: f64) -> Result<Self, EvidenceError> {
        let dim = cov.nrows();
        let mut ridge = ridge;
        for _ in 0..20 {
            let m = cov + DMatrix::<f64>::identity(dim, dim) * ridge;
            if let Some(ch) = m.cholesky() {
                let l = ch.l();
                let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                if log_det.is_finite() {
                    return Ok(Self { chol: l, log_det, ridge });
                }
            }
            ridge = if ridge > 0.0 { ridge * 10.0 } else { 1e-12 };
        }
        Err(EvidenceError::Factorization { ridge })
    }

    /// Empirical covariance of `draws` plus `1e-6·trace/dim` ridge. With fewer
    /// draws than dimensions only the diagonal is kept.
    pub fn from_draws(draws: &[Vec<f64>]) -> Result<Self, EvidenceError> {
        let n = draws.len();
        if n == 0 {
            return Err(EvidenceError::Empty);
        }
        let dim = draws[0].len();
        let mut mean = vec![0.0; dim];
        for d in draws {
            for (m, v) in mean.iter_mut().zip(d) {
                *m += v / n as f64;
            }
        }
        let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for d in draws {
            for a in 0..dim {
                let da = d[a] - mean[a];
                for b in 0..=a {
                    cov[(a, b)] += da * (d[b] - mean[b]) / denom;
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                cov[(b, a)] = cov[(a, b)];
            }
        }
        if n < dim {
            let diag = cov.diagonal();
            cov = DMatrix::from_diagonal(&diag);
        }
        let trace = cov.trace();
        let ridge = (1e-6 * trace / dim.max(1) as f64).max(1e-10);
        Self::from_covariance(&cov, ridge)
    }

    /// Solves `L y = v`.
    pub fn whiten(&self, v: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        let mut y = vec![0.0; dim];
        for i in 0..dim {
            let mut s = v[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * y[j];
            }
            y[i] = s / self.chol[(i, i)];
        }
        y
    }

    /// Returns `L z`.
    pub fn color(&self, z: &[f64]) -> Vec<f64> {
        let v = &self.chol * DVector::from_column_slice(z);
        v.iter().copied().collect()
    }

    fn log_norm(&self) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det)
    }

    /// Log density of `N(center, Σ)` at `x`.
    pub fn log_q(&self, x: &[f64], center: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(center).map(|(a, b)| a - b).collect();
        let w = self.whiten(&diff);
        self.log_norm() - 0.5 * w.iter().map(|v| v * v).sum::<f64>()
    }
}

/// `log Φ(ξ)` from whitened coordinates: the proposal at the generating
/// center (basic) or the equal mixture over all of the chain's centers
/// (spatial).
fn log_phi_whitened(w_xi: &[f64], w_centers: &[Vec<f64>], own: usize, log_norm: f64, mode: PhiMode) -> f64 {
    let comp = |c: &Vec<f64>| log_norm - 0.5 * w_xi.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    match mode {
        PhiMode::Basic => comp(&w_centers[own]),
        PhiMode::Spatial => {
            let mut acc = LogSumExpAcc::default();
            for c in w_centers {
                acc.push(comp(c));
            }
            acc.value() - (w_centers.len() as f64).ln()
        }
    }
}

/// `log Φ(ξ)` for one chain's centers.
pub fn log_phi(xi: &[f64], centers: &[Vec<f64>], own: usize, proposal: &Proposal, mode: PhiMode) -> f64 {
    let w_xi = proposal.whiten(xi);
    let w_centers: Vec<Vec<f64>> = centers.iter().map(|c| proposal.whiten(c)).collect();
    log_phi_whitened(&w_xi, &w_centers, own, proposal.log_norm(), mode)
}

/// Pseudo-samples for one chain. Evaluation failures give weight zero.
pub fn chain_pseudo_samples<T: LogDensity + ?Sized>(
    target: &T,
    draws: &[Vec<f64>],
    chain: usize,
    proposal: &Proposal,
    n_m: usize,
    mode: PhiMode,
    rng: &mut StreamRng,
) -> Vec<PseudoSample> {
    let dim = proposal.dim();
    let w_centers: Vec<Vec<f64>> = draws.iter().map(|c| proposal.whiten(c)).collect();
    let log_norm = proposal.log_norm();
    let mut out = Vec::with_capacity(draws.len() * n_m);
    for (i, center) in draws.iter().enumerate() {
        for k in 0..n_m {
            let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let offset = proposal.color(&z);
            let xi: Vec<f64> = center.iter().zip(&offset).map(|(c, o)| c + o).collect();
            // whitened ξ = whitened center + z
            let w_xi: Vec<f64> = w_centers[i].iter().zip(&z).map(|(c, zz)| c + zz).collect();
            let log_phi = log_phi_whitened(&w_xi, &w_centers, i, log_norm, mode);
            let log_target = match target.log_density(&xi) {
                Ok(v) if !v.is_nan() => v,
                _ => f64::NEG_INFINITY,
            };
            let log_weight = if log_target == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_target - log_phi
            };
            out.push(PseudoSample {
                xi,
                log_target,
                log_phi,
                log_weight: if log_weight.is_nan() { f64::NEG_INFINITY } else { log_weight },
                source: (i, chain, k),
            });
        }
    }
    out
}

/// Pseudo-samples for all chains, one proposal per chain from that chain's
/// draws. Chains are processed in parallel, each with its own stream.
pub fn draw_pseudo_samples<T: LogDensity + ?Sized>(
    target: &T,
    chains: &[Vec<Vec<f64>>],
    n_m: usize,
    mode: PhiMode,
    rngs: Vec<StreamRng>,
) -> Result<Vec<PseudoSample>, EvidenceError> {
    let per_chain: Vec<Vec<PseudoSample>> = chains
        .par_iter()
        .zip(rngs.into_par_iter())
        .enumerate()
        .map(|(j, (draws, mut rng))| {
            if draws.is_empty() {
                return Err(EvidenceError::EmptyChain { chain: j });
            }
            let prop = Proposal::from_draws(draws)?;
            Ok(chain_pseudo_samples(target, draws, j, &prop, n_m, mode, &mut rng))
        })
        .collect::<Result<_, _>>()?;
    Ok(per_chain.into_iter().flatten().collect())
}

/// `logsumexp(log w) - log(count)`.
pub fn log_marginal_likelihood(log_weights: &[f64]) -> Result<f64, EvidenceError> {
    if log_weights.is_empty() {
        return Err(EvidenceError::Empty);
    }
    let lse = logsumexp(log_weights);
    if lse == f64::NEG_INFINITY {
        return Err(EvidenceError::AllWeightsZero);
    }
    Ok(lse - (log_weights.len() as f64).ln())
}

/// Normalized local posterior weights over pseudo-samples.
pub fn local_density_weights(log_weights: &[f64]) -> Vec<f64> {
    softmax(log_weights)
}

/// Running evidence for one topology, updated once per visit.
#[derive(Debug, Clone, PartialEq)]
pub struct EvidenceEstimate {
    pub log_z: f64,
    pub visits: usize,
    pub total_pseudo_samples: usize,
    /// Mean and variance of the finite log-weights (Welford).
    pub log_weight_mean: f64,
    log_weight_m2: f64,
    n_finite: usize,
    /// logsumexp of 2·log w over all weights.
    log_sum_w2: f64,
    pub max_log_weight: f64,
}

impl Default for EvidenceEstimate {
    fn default() -> Self {
        Self {
            log_z: f64::NEG_INFINITY,
            visits: 0,
            total_pseudo_samples: 0,
            log_weight_mean: 0.0,
            log_weight_m2: 0.0,
            n_finite: 0,
            log_sum_w2: f64::NEG_INFINITY,
            max_log_weight: f64::NEG_INFINITY,
        }
    }
}

impl EvidenceEstimate {
    /// Folds one visit's log-weights into the estimate.
    pub fn update(&mut self, new_log_weights: &[f64]) {
        if new_log_weights.is_empty() {
            return;
        }
        let n_prev = self.total_pseudo_samples as f64;
        let n_new = n_prev + new_log_weights.len() as f64;
        let mut terms = Vec::with_capacity(new_log_weights.len() + 1);
        if self.total_pseudo_samples > 0 {
            terms.push(self.log_z + n_prev.ln());
        }
        terms.extend_from_slice(new_log_weights);
        self.log_z = logsumexp(&terms) - n_new.ln();
        self.total_pseudo_samples += new_log_weights.len();
        self.visits += 1;
        let mut acc = LogSumExpAcc::default();
        acc.push(self.log_sum_w2);
        for &lw in new_log_weights {
            acc.push(2.0 * lw);
            if lw.is_finite() {
                self.n_finite += 1;
                let d = lw - self.log_weight_mean;
                self.log_weight_mean += d / self.n_finite as f64;
                self.log_weight_m2 += d * (lw - self.log_weight_mean);
                self.max_log_weight = self.max_log_weight.max(lw);
            }
        }
        self.log_sum_w2 = acc.value();
    }

    pub fn log_weight_variance(&self) -> f64 {
        if self.n_finite > 1 {
            self.log_weight_m2 / (self.n_finite - 1) as f64
        } else {
            0.0
        }
    }

    pub fn n_finite(&self) -> usize {
        self.n_finite
    }

    /// Log of the empirical variance of the unnormalized weights,
    /// `log(E[w²] - Ẑ²)`, computed without leaving log space.
    pub fn log_weight_sigma2(&self) -> f64 {
        if self.total_pseudo_samples == 0 {
            return f64::NEG_INFINITY;
        }
        let log_m2 = self.log_sum_w2 - (self.total_pseudo_samples as f64).ln();
        let two_z = 2.0 * self.log_z;
        if !(log_m2 > two_z) {
            return f64::NEG_INFINITY;
        }
        log_m2 + log1mexp(two_z - log_m2)
    }
}
