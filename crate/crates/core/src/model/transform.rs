//! Bijections between constrained local parameters and the flat
//! unconstrained vector, with their log-Jacobian terms.
//!
//! Layout: `[stick-breaking coords per simplex | logit τ | μ | log σ]`.
//! Blocks that are clamped (see `ClampedParams`) are omitted.

use crate::data::Task;
use crate::math::{log_logistic, logistic, logit};
use crate::tree::TreeTopology;

use super::{LocalParams, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_internal: usize,
    pub n_leaves: usize,
    pub n_features: usize,
    pub regression: bool,
    pub free_splits: bool,
    pub free_sigma: bool,
}

impl ParamLayout {
    pub fn new(t: &TreeTopology, n_features: usize, task: Task) -> Self {
        Self {
            n_internal: t.n_internal(),
            n_leaves: t.n_leaves(),
            n_features,
            regression: task.is_regression(),
            free_splits: true,
            free_sigma: task.is_regression(),
        }
    }

    pub fn simplex_dim(&self) -> usize {
        self.n_features.saturating_sub(1)
    }

    pub fn delta_offset(&self, j: usize) -> usize {
        j * self.simplex_dim()
    }

    pub fn tau_offset(&self) -> usize {
        if self.free_splits {
            self.n_internal * self.simplex_dim()
        } else {
            0
        }
    }

    pub fn mean_offset(&self) -> usize {
        self.tau_offset() + if self.free_splits { self.n_internal } else { 0 }
    }

    pub fn sigma_offset(&self) -> usize {
        self.mean_offset() + if self.regression { self.n_leaves } else { 0 }
    }

    pub fn dim(&self) -> usize {
        self.sigma_offset() + usize::from(self.regression && self.free_sigma)
    }
}

/// Stick-breaking intermediates for one simplex, kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub(crate) struct StickBreak {
    /// logistic(v_k), k < K-1
    pub z: Vec<f64>,
    /// log of remaining stick before break k, k < K
    pub log_rem: Vec<f64>,
    pub log_delta: Vec<f64>,
    pub delta: Vec<f64>,
    pub log_jac: f64,
}

/// Centered stick-breaking: `v_k = y_k - log(K - 1 - k)` so that `y = 0`
/// maps to the uniform simplex.
pub(crate) fn stick_break_forward(y: &[f64], k_len: usize, out: &mut StickBreak) {
    out.z.clear();
    out.log_rem.clear();
    out.log_delta.clear();
    out.delta.clear();
    let mut log_rem = 0.0;
    let mut log_jac = 0.0;
    for (k, &yk) in y.iter().enumerate() {
        let v = yk - ((k_len - 1 - k) as f64).ln();
        let a = log_logistic(v);
        let b = log_logistic(-v);
        out.z.push(logistic(v));
        out.log_rem.push(log_rem);
        out.log_delta.push(log_rem + a);
        log_jac += a + b + log_rem;
        log_rem += b;
    }
    out.log_rem.push(log_rem);
    out.log_delta.push(log_rem);
    out.delta.extend(out.log_delta.iter().map(|l| l.exp()));
    out.log_jac = log_jac;
}

/// Gradient of `F` with respect to the stick-breaking coordinates, given
/// `g_log_delta[k] = dF/d log Δ_k` and including the log-Jacobian.
pub(crate) fn stick_break_backward(sb: &StickBreak, g_log_delta: &[f64], out: &mut [f64]) {
    let km1 = sb.z.len();
    // suffix sum of dF/d log_rem over k' > k
    let mut suffix = g_log_delta[km1];
    for k in (0..km1).rev() {
        let d_a = g_log_delta[k] + 1.0;
        let d_b = 1.0 + suffix;
        let z = sb.z[k];
        out[k] = d_a * (1.0 - z) - d_b * z;
        // log_rem_k feeds log_delta_k and the Jacobian term
        suffix += g_log_delta[k] + 1.0;
    }
}

fn stick_break_inverse(delta: &[f64], out: &mut Vec<f64>) -> Result<(), ModelError> {
    let k_len = delta.len();
    let mut rem = 1.0;
    for (k, &d) in delta.iter().take(k_len.saturating_sub(1)).enumerate() {
        let z = d / rem;
        if !(z > 0.0 && z < 1.0) {
            return Err(ModelError::Domain {
                what: "simplex entry",
                value: d,
            });
        }
        out.push(logit(z) + ((k_len - 1 - k) as f64).ln());
        rem -= d;
    }
    if k_len > 0 && !(delta[k_len - 1] > 0.0) {
        return Err(ModelError::Domain {
            what: "simplex entry",
            value: delta[k_len - 1],
        });
    }
    Ok(())
}

pub fn to_unconstrained(layout: &ParamLayout, p: &LocalParams) -> Result<Vec<f64>, ModelError> {
    let mut u = Vec::with_capacity(layout.dim());
    if layout.free_splits {
        if p.deltas.len() != layout.n_internal || p.taus.len() != layout.n_internal {
            return Err(ModelError::Shape {
                what: "internal node count",
                expected: layout.n_internal,
                found: p.deltas.len(),
            });
        }
        for d in &p.deltas {
            let sum: f64 = d.iter().sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(ModelError::Domain {
                    what: "simplex sum",
                    value: sum,
                });
            }
            stick_break_inverse(d, &mut u)?;
        }
        for &t in &p.taus {
            if !(t > 0.0 && t < 1.0) {
                return Err(ModelError::Domain {
                    what: "tau",
                    value: t,
                });
            }
            u.push(logit(t));
        }
    }
    if layout.regression {
        if p.leaf_means.len() != layout.n_leaves {
            return Err(ModelError::Shape {
                what: "leaf mean count",
                expected: layout.n_leaves,
                found: p.leaf_means.len(),
            });
        }
        u.extend_from_slice(&p.leaf_means);
        if layout.free_sigma {
            let s = p.sigma.unwrap_or(f64::NAN);
            if !(s > 0.0 && s.is_finite()) {
                return Err(ModelError::Domain {
                    what: "sigma",
                    value: s,
                });
            }
            u.push(s.ln());
        }
    }
    Ok(u)
}

/// Maps the free coordinates back to constrained space. Clamped blocks come
/// back empty (`deltas`/`taus`) or as `None` (`sigma`).
pub fn to_constrained(layout: &ParamLayout, u: &[f64]) -> Result<LocalParams, ModelError> {
    if u.len() != layout.dim() {
        return Err(ModelError::Shape {
            what: "unconstrained dimension",
            expected: layout.dim(),
            found: u.len(),
        });
    }
    let mut deltas = Vec::new();
    let mut taus = Vec::new();
    if layout.free_splits {
        let sd = layout.simplex_dim();
        let mut sb = StickBreak::default();
        for j in 0..layout.n_internal {
            let off = layout.delta_offset(j);
            stick_break_forward(&u[off..off + sd], layout.n_features, &mut sb);
            deltas.push(sb.delta.clone());
        }
        let to = layout.tau_offset();
        taus.extend(u[to..to + layout.n_internal].iter().map(|&v| logistic(v)));
    }
    let (leaf_means, sigma) = if layout.regression {
        let mo = layout.mean_offset();
        let means = u[mo..mo + layout.n_leaves].to_vec();
        let sigma = layout.free_sigma.then(|| u[layout.sigma_offset()].exp());
        (means, sigma)
    } else {
        (Vec::new(), None)
    };
    Ok(LocalParams {
        deltas,
        taus,
        leaf_means,
        sigma,
    })
}

/// Total `log|det J|` of `to_constrained` at `u`.
pub fn jacobian_logdet(layout: &ParamLayout, u: &[f64]) -> Result<f64, ModelError> {
    if u.len() != layout.dim() {
        return Err(ModelError::Shape {
            what: "unconstrained dimension",
            expected: layout.dim(),
            found: u.len(),
        });
    }
    let mut total = 0.0;
    if layout.free_splits {
        let sd = layout.simplex_dim();
        let mut sb = StickBreak::default();
        for j in 0..layout.n_internal {
            let off = layout.delta_offset(j);
            stick_break_forward(&u[off..off + sd], layout.n_features, &mut sb);
            total += sb.log_jac;
        }
        let to = layout.tau_offset();
        for &v in &u[to..to + layout.n_internal] {
            total += log_logistic(v) + log_logistic(-v);
        }
    }
    if layout.regression && layout.free_sigma {
        total += u[layout.sigma_offset()];
    }
    Ok(total)
}
