//! Soft routing of datapoints through a topology and the two likelihoods.

use crate::data::{Dataset, Task};
use crate::math::{digamma, ln_gamma, logistic, LN_2PI};
use crate::tree::TreeTopology;

use super::{LocalParams, ModelError, ModelHyperparams};

/// Probability that `x` is routed left at a node with split `(delta, tau)`.
pub fn psi(x: &[f64], delta: &[f64], tau: f64, h: f64) -> f64 {
    logistic(split_arg(x, delta, tau, h))
}

#[inline]
fn split_arg(x: &[f64], delta: &[f64], tau: f64, h: f64) -> f64 {
    let dot: f64 = x.iter().zip(delta).map(|(a, b)| a * b).sum();
    (dot - tau) / h
}

/// Evaluation plan for one topology. Internal nodes come first in heap
/// order (so every parent precedes its children), then the leaves left to
/// right; `children` indexes into that combined order.
#[derive(Debug, Clone)]
pub struct SoftTree {
    children: Vec<(usize, usize)>,
    n_internal: usize,
    n_leaves: usize,
}

/// Gradients of the log-likelihood with respect to constrained parameters.
#[derive(Debug, Clone, Default)]
pub(crate) struct LikGrad {
    /// row-major `n_internal × n_x`
    pub delta: Vec<f64>,
    pub tau: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: f64,
}

impl LikGrad {
    pub fn reset(&mut self, n_internal: usize, n_x: usize, n_leaves: usize) {
        self.delta.clear();
        self.delta.resize(n_internal * n_x, 0.0);
        self.tau.clear();
        self.tau.resize(n_internal, 0.0);
        self.mu.clear();
        self.mu.resize(n_leaves, 0.0);
        self.sigma = 0.0;
    }
}

struct Work {
    psi: Vec<f64>,
    psic: Vec<f64>,
    reach: Vec<f64>,
}

struct Batch {
    n: usize,
    psi: Vec<f64>,
    psic: Vec<f64>,
    reach: Vec<f64>,
    g: Vec<f64>,
}

impl SoftTree {
    pub fn new(t: &TreeTopology) -> Self {
        let ni = t.n_internal();
        let slot = |id: u32| match t.internal().binary_search(&id) {
            Ok(j) => j,
            Err(_) => ni + t.leaves().iter().position(|&l| l == id).expect("node in topology"),
        };
        let children = t.internal().iter().map(|&j| (slot(2 * j), slot(2 * j + 1))).collect();
        Self {
            children,
            n_internal: ni,
            n_leaves: t.n_leaves(),
        }
    }

    pub fn n_internal(&self) -> usize {
        self.n_internal
    }

    pub fn n_leaves(&self) -> usize {
        self.n_leaves
    }

    fn work(&self) -> Work {
        Work {
            psi: vec![0.0; self.n_internal],
            psic: vec![0.0; self.n_internal],
            reach: vec![0.0; self.n_internal + self.n_leaves],
        }
    }

    fn compute_psi(&self, x: &[f64], deltas: &[f64], taus: &[f64], h: f64, psi: &mut [f64], psic: &mut [f64]) {
        let n_x = x.len();
        for j in 0..self.n_internal {
            let s = split_arg(x, &deltas[j * n_x..(j + 1) * n_x], taus[j], h);
            // one exp for both branches
            let e = (-s.abs()).exp();
            let inv = 1.0 / (1.0 + e);
            let (big, small) = (inv, e * inv);
            if s >= 0.0 {
                psi[j] = big;
                psic[j] = small;
            } else {
                psi[j] = small;
                psic[j] = big;
            }
        }
    }

    fn forward(&self, psi: &[f64], psic: &[f64], reach: &mut [f64], phi: &mut [f64]) {
        reach[0] = 1.0;
        for (j, &(l, r)) in self.children.iter().enumerate() {
            let p = reach[j];
            reach[l] = p * psi[j];
            reach[r] = p * psic[j];
        }
        phi.copy_from_slice(&reach[self.n_internal..]);
    }

    /// Leaf probabilities of one point; `deltas` is row-major `n_internal × n_x`.
    pub fn leaf_probs_into(&self, x: &[f64], deltas: &[f64], taus: &[f64], h: f64, out: &mut [f64]) {
        let mut w = self.work();
        self.compute_psi(x, deltas, taus, h, &mut w.psi, &mut w.psic);
        self.forward(&w.psi, &w.psic, &mut w.reach, out);
    }

    /// Leaf probabilities for every row of `data`, row-major `N × n_leaves`.
    pub fn leaf_probs_all(&self, data: &Dataset, deltas: &[f64], taus: &[f64], h: f64) -> Vec<f64> {
        let nl = self.n_leaves;
        let b = self.batch_forward(data, deltas, taus, h);
        let mut out = vec![0.0; data.len() * nl];
        for k in 0..nl {
            for (i, &p) in self.batch_leaf(&b, k).iter().enumerate() {
                out[i * nl + k] = p;
            }
        }
        out
    }

    /// Soft splits and reach probabilities for every row at once, stored
    /// node-major so the per-node loops run over contiguous point arrays.
    fn batch_forward(&self, data: &Dataset, deltas: &[f64], taus: &[f64], h: f64) -> Batch {
        let n = data.len();
        let ni = self.n_internal;
        let n_x = data.n_features();
        let mut b = Batch {
            n,
            psi: vec![0.0; ni * n],
            psic: vec![0.0; ni * n],
            reach: vec![0.0; (ni + self.n_leaves) * n],
            g: Vec::new(),
        };
        for j in 0..ni {
            let s = &mut b.psi[j * n..(j + 1) * n];
            s.iter_mut().for_each(|v| *v = -taus[j]);
            for f in 0..n_x {
                let d = deltas[j * n_x + f];
                for (v, &xv) in s.iter_mut().zip(data.column(f)) {
                    *v += d * xv;
                }
            }
            let pc = &mut b.psic[j * n..(j + 1) * n];
            for (p, q) in s.iter_mut().zip(pc.iter_mut()) {
                let a = *p / h;
                let e = (-a.abs()).exp();
                let inv = 1.0 / (1.0 + e);
                let (big, small) = (inv, e * inv);
                (*p, *q) = if a >= 0.0 { (big, small) } else { (small, big) };
            }
        }
        b.reach[..n].iter_mut().for_each(|v| *v = 1.0);
        for (j, &(l, r)) in self.children.iter().enumerate() {
            let (head, tail) = b.reach.split_at_mut(l.min(r) * n);
            let parent = &head[j * n..(j + 1) * n];
            let (lo, hi) = tail.split_at_mut(n * (l.max(r) - l.min(r)));
            let (left, right) = if l < r { (&mut lo[..n], &mut hi[..n]) } else { (&mut hi[..n], &mut lo[..n]) };
            let psi = &b.psi[j * n..(j + 1) * n];
            let psic = &b.psic[j * n..(j + 1) * n];
            for i in 0..n {
                left[i] = parent[i] * psi[i];
                right[i] = parent[i] * psic[i];
            }
        }
        b
    }

    /// Row `k` of the leaf block of `reach`.
    fn batch_leaf<'b>(&self, b: &'b Batch, k: usize) -> &'b [f64] {
        let row = self.n_internal + k;
        &b.reach[row * b.n..(row + 1) * b.n]
    }

    /// Backward pass given `b.g` with the leaf rows holding dLL/dφ.
    fn batch_backward(&self, data: &Dataset, h: f64, b: &mut Batch, grad: &mut LikGrad) {
        let n = b.n;
        let n_x = data.n_features();
        let mut gs = vec![0.0; n];
        for j in (0..self.n_internal).rev() {
            let (l, r) = self.children[j];
            let psi = &b.psi[j * n..(j + 1) * n];
            let psic = &b.psic[j * n..(j + 1) * n];
            let reach = &b.reach[j * n..(j + 1) * n];
            let (head, tail) = b.g.split_at_mut(l.min(r) * n);
            let gj = &mut head[j * n..(j + 1) * n];
            let (lo, hi) = tail.split_at_mut(n * (l.max(r) - l.min(r)));
            let (gl, gr) = if l < r { (&lo[..n], &hi[..n]) } else { (&hi[..n], &lo[..n]) };
            let mut tau = 0.0;
            for i in 0..n {
                gj[i] = psi[i] * gl[i] + psic[i] * gr[i];
                let v = reach[i] * (gl[i] - gr[i]) * psi[i] * psic[i] / h;
                gs[i] = v;
                tau += v;
            }
            grad.tau[j] -= tau;
            for f in 0..n_x {
                let dot: f64 = gs.iter().zip(data.column(f)).map(|(a, b)| a * b).sum();
                grad.delta[j * n_x + f] += dot;
            }
        }
    }

    /// Regression log-likelihood with optional gradient accumulation.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn regression(
        &self,
        data: &Dataset,
        deltas: &[f64],
        taus: &[f64],
        mu: &[f64],
        sigma: f64,
        h: f64,
        grad: Option<&mut LikGrad>,
    ) -> f64 {
        let n = data.len();
        let s2 = sigma * sigma;
        let mut b = self.batch_forward(data, deltas, taus, h);
        let mut resid: Vec<f64> = data.y().iter().map(|y| -y).collect();
        for (k, &m) in mu.iter().enumerate() {
            for (r, &p) in resid.iter_mut().zip(self.batch_leaf(&b, k)) {
                *r += p * m;
            }
        }
        let ss: f64 = resid.iter().map(|r| r * r).sum();
        if let Some(gr) = grad {
            for k in 0..self.n_leaves {
                let dot: f64 = resid.iter().zip(self.batch_leaf(&b, k)).map(|(r, p)| r * p).sum();
                gr.mu[k] -= dot / s2;
            }
            if self.n_internal > 0 {
                let ni = self.n_internal;
                b.g = vec![0.0; (ni + self.n_leaves) * n];
                for k in 0..self.n_leaves {
                    let c = -mu[k] / s2;
                    let row = &mut b.g[(ni + k) * n..(ni + k + 1) * n];
                    for (g, r) in row.iter_mut().zip(&resid) {
                        *g = c * r;
                    }
                }
                self.batch_backward(data, h, &mut b, gr);
            }
            gr.sigma += -(n as f64) / sigma + ss / (s2 * sigma);
        }
        -0.5 * n as f64 * (LN_2PI + s2.ln()) - ss / (2.0 * s2)
    }

    /// Dirichlet-multinomial compound log-likelihood with optional gradient.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn classification(
        &self,
        data: &Dataset,
        n_classes: usize,
        class_alpha: f64,
        deltas: &[f64],
        taus: &[f64],
        h: f64,
        grad: Option<&mut LikGrad>,
    ) -> f64 {
        let n = data.len();
        let ni = self.n_internal;
        let nl = self.n_leaves;
        let a_tot = n_classes as f64 * class_alpha;
        let mut b = self.batch_forward(data, deltas, taus, h);
        let classes: Vec<usize> = (0..n).map(|i| data.class_of(i)).collect();
        // counts[c * nl + k]
        let mut counts = vec![0.0; n_classes * nl];
        for k in 0..nl {
            for (&c, &p) in classes.iter().zip(self.batch_leaf(&b, k)) {
                counts[c * nl + k] += p;
            }
        }
        let lg_alpha = ln_gamma(class_alpha);
        let lg_a = ln_gamma(a_tot);
        let mut ll = 0.0;
        let mut tot = vec![0.0; nl];
        for k in 0..nl {
            let mut phi_k = 0.0;
            for c in 0..n_classes {
                let v = counts[c * nl + k];
                phi_k += v;
                ll += ln_gamma(v + class_alpha) - lg_alpha;
            }
            tot[k] = phi_k;
            ll += lg_a - ln_gamma(phi_k + a_tot);
        }
        if let Some(gr) = grad {
            if ni > 0 {
                b.g = vec![0.0; (ni + nl) * n];
                for k in 0..nl {
                    let base = digamma(tot[k] + a_tot);
                    let d: Vec<f64> = (0..n_classes)
                        .map(|c| digamma(counts[c * nl + k] + class_alpha) - base)
                        .collect();
                    let row = &mut b.g[(ni + k) * n..(ni + k + 1) * n];
                    for (g, &c) in row.iter_mut().zip(&classes) {
                        *g = d[c];
                    }
                }
                self.batch_backward(data, h, &mut b, gr);
            }
        }
        ll
    }

    /// Log-likelihood at constrained parameters.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn log_likelihood_flat(
        &self,
        data: &Dataset,
        hp: &ModelHyperparams,
        deltas: &[f64],
        taus: &[f64],
        mu: &[f64],
        sigma: Option<f64>,
        h: f64,
        grad: Option<&mut LikGrad>,
    ) -> f64 {
        match data.task() {
            Task::Regression => self.regression(data, deltas, taus, mu, sigma.unwrap_or(f64::NAN), h, grad),
            Task::Classification { n_classes } => {
                self.classification(data, n_classes, hp.class_alpha, deltas, taus, h, grad)
            }
        }
    }
}

fn flatten(p: &LocalParams) -> Vec<f64> {
    p.deltas.iter().flatten().copied().collect()
}

/// Leaf probabilities of `x`, ordered left to right.
pub fn leaf_probs(x: &[f64], t: &TreeTopology, p: &LocalParams, h: f64) -> Result<Vec<f64>, ModelError> {
    if p.deltas.len() != t.n_internal() || p.taus.len() != t.n_internal() {
        return Err(ModelError::Shape {
            what: "internal node count",
            expected: t.n_internal(),
            found: p.deltas.len().min(p.taus.len()),
        });
    }
    if let Some(d) = p.deltas.iter().find(|d| d.len() != x.len()) {
        return Err(ModelError::Shape {
            what: "simplex length",
            expected: x.len(),
            found: d.len(),
        });
    }
    let plan = SoftTree::new(t);
    let mut out = vec![0.0; t.n_leaves()];
    plan.leaf_probs_into(x, &flatten(p), &p.taus, h, &mut out);
    Ok(out)
}

/// Log-likelihood of `data` under topology `t` with parameters `p` at
/// split sharpness `h`.
pub fn log_likelihood(
    data: &Dataset,
    t: &TreeTopology,
    p: &LocalParams,
    hp: &ModelHyperparams,
    h: f64,
) -> Result<f64, ModelError> {
    p.check_shape(t.n_internal(), t.n_leaves(), data.n_features(), data.task())?;
    let flat = flatten(p);
    if let Some(i) = flat.iter().chain(&p.taus).chain(&p.leaf_means).position(|v| v.is_nan()) {
        return Err(ModelError::NonFinite {
            what: "parameter",
            index: i,
        });
    }
    if p.sigma.is_some_and(f64::is_nan) {
        return Err(ModelError::NonFiniteValue { what: "sigma" });
    }
    let plan = SoftTree::new(t);
    let ll = plan.log_likelihood_flat(data, hp, &flat, &p.taus, &p.leaf_means, p.sigma, h, None);
    if ll.is_nan() {
        return Err(ModelError::NonFiniteValue { what: "log-likelihood" });
    }
    Ok(ll)
}
