//! Posterior predictive over the active topologies and the accuracy / MSE
//! metrics built on it.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Dataset, Task};
use crate::math::softmax;
use crate::model::{ModelContext, ModelError};
use crate::scheduler::{RunResult, WeightedSample};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("ensemble has no trees with usable samples")]
    EmptyEnsemble,
    #[error("{0} requires a {1} task")]
    TaskMismatch(&'static str, &'static str),
    #[error("test data has {found} features, model expects {expected}")]
    Features { expected: usize, found: usize },
    #[error("number of predictive draws must be positive")]
    NoDraws,
    #[error(transparent)]
    Model(#[from] ModelError),
}

struct Member<'r> {
    key: String,
    ctx: ModelContext<'r>,
    weight: f64,
    samples: Cow<'r, [WeightedSample]>,
    local: Vec<f64>,
}

/// Weighted mixture over topologies, each carrying weighted local samples.
pub struct PosteriorEnsemble<'r> {
    members: Vec<Member<'r>>,
    task: Task,
    n_features: usize,
    h: f64,
}

impl<'r> PosteriorEnsemble<'r> {
    /// Uses the active trees of a finished run with tree weights
    /// `softmax(log Ẑ)`.
    pub fn from_run<'a: 'r>(run: &'r RunResult<'a>) -> Result<Self, PredictError> {
        let parts = run
            .active()
            .filter(|r| !r.samples.is_empty())
            .map(|r| {
                (
                    r.key.clone(),
                    r.context.clone().expect("active tree has a context"),
                    r.evidence.log_z,
                    Cow::Borrowed(r.samples.as_slice()),
                )
            })
            .collect();
        Self::build(parts, run.settings.h_final)
    }

    /// Builds an ensemble from `(context, log tree weight, samples)` triples.
    pub fn from_parts(parts: Vec<(ModelContext<'r>, f64, Vec<WeightedSample>)>, h: f64) -> Result<Self, PredictError> {
        let parts = parts
            .into_iter()
            .map(|(ctx, lw, s)| (ctx.topology().key(), ctx, lw, Cow::Owned(s)))
            .collect();
        Self::build(parts, h)
    }

    fn build(parts: Vec<(String, ModelContext<'r>, f64, Cow<'r, [WeightedSample]>)>, h: f64) -> Result<Self, PredictError> {
        let parts: Vec<_> = parts.into_iter().filter(|p| !p.3.is_empty() && p.2.is_finite()).collect();
        let Some(first) = parts.first() else {
            return Err(PredictError::EmptyEnsemble);
        };
        let task = first.1.data().task();
        let n_features = first.1.data().n_features();
        let log_w: Vec<f64> = parts.iter().map(|p| p.2).collect();
        let weights = softmax(&log_w);
        let members = parts
            .into_iter()
            .zip(weights)
            .map(|((key, ctx, _, samples), weight)| {
                let lw: Vec<f64> = samples.iter().map(|s| s.log_weight).collect();
                Member {
                    key,
                    ctx,
                    weight,
                    samples,
                    local: softmax(&lw),
                }
            })
            .collect();
        Ok(Self {
            members,
            task,
            n_features,
            h,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `(key, w̄_m)` per tree.
    pub fn tree_weights(&self) -> Vec<(String, f64)> {
        self.members.iter().map(|m| (m.key.clone(), m.weight)).collect()
    }

    /// Normalized local weights of tree `m`.
    pub fn local_weights(&self, m: usize) -> &[f64] {
        &self.members[m].local
    }

    /// Draws `l` (tree, pseudo-sample) pairs and materializes the per-leaf
    /// output distributions for each.
    pub fn draw<R: Rng + ?Sized>(&self, l: usize, rng: &mut R) -> Result<PredictiveDraws<'_, 'r>, PredictError> {
        if l == 0 {
            return Err(PredictError::NoDraws);
        }
        let tree_w: Vec<f64> = self.members.iter().map(|m| m.weight).collect();
        let picks: Vec<(usize, usize)> = (0..l)
            .map(|_| {
                let m = categorical(&tree_w, rng);
                (m, categorical(&self.members[m].local, rng))
            })
            .collect();
        let mut unique: Vec<(usize, usize)> = picks.clone();
        unique.sort_unstable();
        unique.dedup();
        let built: Vec<DrawParams> = unique
            .par_iter()
            .map(|&(m, s)| self.materialize(m, s))
            .collect::<Result<_, _>>()?;
        let slot: HashMap<(usize, usize), usize> = unique.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        Ok(PredictiveDraws {
            ensemble: self,
            params: built,
            picks: picks.iter().map(|k| slot[k]).collect(),
        })
    }

    fn materialize(&self, m: usize, s: usize) -> Result<DrawParams, PredictError> {
        let member = &self.members[m];
        let ctx = &member.ctx;
        let p = ctx.to_params(&member.samples[s].xi)?;
        let deltas: Vec<f64> = p.deltas.concat();
        let output = match self.task {
            Task::Regression => LeafOutput::Gaussian {
                means: p.leaf_means.clone(),
                sigma: p.sigma.unwrap_or(1.0),
            },
            Task::Classification { n_classes } => {
                let data = ctx.data();
                let nl = ctx.plan().n_leaves();
                let phi = ctx.plan().leaf_probs_all(data, &deltas, &p.taus, self.h);
                let mut counts = vec![0.0; nl * n_classes];
                for i in 0..data.len() {
                    let c = data.class_of(i);
                    for k in 0..nl {
                        counts[k * n_classes + c] += phi[i * nl + k];
                    }
                }
                let alpha = ctx.hyperparams().class_alpha;
                let a = alpha * n_classes as f64;
                let mut probs = vec![0.0; nl * n_classes];
                for k in 0..nl {
                    let total: f64 = counts[k * n_classes..(k + 1) * n_classes].iter().sum();
                    for c in 0..n_classes {
                        probs[k * n_classes + c] = (counts[k * n_classes + c] + alpha) / (total + a);
                    }
                }
                LeafOutput::Categorical { probs, n_classes }
            }
        };
        Ok(DrawParams {
            member: m,
            deltas,
            taus: p.taus,
            output,
        })
    }
}

fn categorical<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in w.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    w.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone)]
enum LeafOutput {
    Gaussian { means: Vec<f64>, sigma: f64 },
    Categorical { probs: Vec<f64>, n_classes: usize },
}

#[derive(Debug, Clone)]
struct DrawParams {
    member: usize,
    deltas: Vec<f64>,
    taus: Vec<f64>,
    output: LeafOutput,
}

/// Predictive distribution of one draw at one point.
#[derive(Debug, Clone, PartialEq)]
pub enum DrawPrediction {
    /// Mean and variance of the leaf mixture of normals.
    Gaussian { mean: f64, variance: f64 },
    Categorical(Vec<f64>),
}

/// Averaged predictive at one point.
#[derive(Debug, Clone, PartialEq)]
pub enum PointPrediction {
    Regression { mean: f64, variance: f64 },
    Classification { probs: Vec<f64> },
}

impl PointPrediction {
    pub fn point_estimate(&self) -> f64 {
        match self {
            PointPrediction::Regression { mean, .. } => *mean,
            PointPrediction::Classification { probs } => argmax(probs) as f64,
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A fixed set of predictive draws, reused for every evaluated point.
pub struct PredictiveDraws<'e, 'r> {
    ensemble: &'e PosteriorEnsemble<'r>,
    params: Vec<DrawParams>,
    picks: Vec<usize>,
}

impl PredictiveDraws<'_, '_> {
    pub fn len(&self) -> usize {
        self.picks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.picks.is_empty()
    }

    /// Per-draw predictive at `x` (normalized features).
    pub fn draw_predictions(&self, x: &[f64]) -> Vec<DrawPrediction> {
        let per_param: Vec<DrawPrediction> = self
            .params
            .iter()
            .map(|p| {
                let ctx = &self.ensemble.members[p.member].ctx;
                let mut phi = vec![0.0; ctx.plan().n_leaves()];
                ctx.plan().leaf_probs_into(x, &p.deltas, &p.taus, self.ensemble.h, &mut phi);
                match &p.output {
                    LeafOutput::Gaussian { means, sigma } => {
                        let m: f64 = phi.iter().zip(means).map(|(f, u)| f * u).sum();
                        let m2: f64 = phi.iter().zip(means).map(|(f, u)| f * u * u).sum();
                        DrawPrediction::Gaussian {
                            mean: m,
                            variance: sigma * sigma + (m2 - m * m).max(0.0),
                        }
                    }
                    LeafOutput::Categorical { probs, n_classes } => {
                        let mut out = vec![0.0; *n_classes];
                        for (k, f) in phi.iter().enumerate() {
                            for (c, o) in out.iter_mut().enumerate() {
                                *o += f * probs[k * n_classes + c];
                            }
                        }
                        let s: f64 = out.iter().sum();
                        out.iter_mut().for_each(|o| *o /= s);
                        DrawPrediction::Categorical(out)
                    }
                }
            })
            .collect();
        self.picks.iter().map(|&i| per_param[i].clone()).collect()
    }

    /// Averages draws `range` into one point prediction.
    fn average(draws: &[DrawPrediction]) -> PointPrediction {
        let n = draws.len() as f64;
        match &draws[0] {
            DrawPrediction::Gaussian { .. } => {
                let (mut m, mut m2) = (0.0, 0.0);
                for d in draws {
                    if let DrawPrediction::Gaussian { mean, variance } = d {
                        m += mean;
                        m2 += variance + mean * mean;
                    }
                }
                let mean = m / n;
                PointPrediction::Regression {
                    mean,
                    variance: (m2 / n - mean * mean).max(0.0),
                }
            }
            DrawPrediction::Categorical(first) => {
                let mut acc = vec![0.0; first.len()];
                for d in draws {
                    if let DrawPrediction::Categorical(p) = d {
                        acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
                    }
                }
                let s: f64 = acc.iter().sum();
                PointPrediction::Classification {
                    probs: acc.into_iter().map(|a| a / s).collect(),
                }
            }
        }
    }

    pub fn predict_point(&self, x: &[f64]) -> PointPrediction {
        Self::average(&self.draw_predictions(x))
    }

    /// Averaged predictions for every row, plus predictions from `n_batches`
    /// contiguous batches of draws for Monte Carlo error estimates.
    pub fn predict(&self, data: &Dataset, n_batches: usize) -> Result<Predictions, PredictError> {
        if data.n_features() != self.ensemble.n_features {
            return Err(PredictError::Features {
                expected: self.ensemble.n_features,
                found: data.n_features(),
            });
        }
        let nb = n_batches.clamp(1, self.len());
        let size = self.len() / nb;
        let rows: Vec<(PointPrediction, Vec<PointPrediction>)> = (0..data.len())
            .into_par_iter()
            .map(|i| {
                let d = self.draw_predictions(data.row(i));
                let batches = (0..nb).map(|b| Self::average(&d[b * size..(b + 1) * size])).collect();
                (Self::average(&d), batches)
            })
            .collect();
        let (points, per_point_batches): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        let batches = (0..nb)
            .map(|b| per_point_batches.iter().map(|v: &Vec<PointPrediction>| v[b].clone()).collect())
            .collect();
        Ok(Predictions { points, batches })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub points: Vec<PointPrediction>,
    /// `batches[b][i]`: prediction for point `i` from draw batch `b`.
    pub batches: Vec<Vec<PointPrediction>>,
}

/// A metric with its batch-means Monte Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric {
    pub value: f64,
    pub mc_error: f64,
}

pub fn mse_of(points: &[PointPrediction], y: &[f64]) -> f64 {
    let s: f64 = points.iter().zip(y).map(|(p, t)| (p.point_estimate() - t).powi(2)).sum();
    s / y.len() as f64
}

pub fn accuracy_of(points: &[PointPrediction], labels: &[usize]) -> f64 {
    let hits = points
        .iter()
        .zip(labels)
        .filter(|(p, &c)| p.point_estimate() as usize == c)
        .count();
    hits as f64 / labels.len() as f64
}

fn batch_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / n as f64;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (v / n as f64).sqrt()
}

impl Predictions {
    pub fn mse(&self, data: &Dataset) -> Result<Metric, PredictError> {
        if !data.task().is_regression() {
            return Err(PredictError::TaskMismatch("mse", "regression"));
        }
        let per_batch: Vec<f64> = self.batches.iter().map(|b| mse_of(b, data.y())).collect();
        Ok(Metric {
            value: mse_of(&self.points, data.y()),
            mc_error: batch_error(&per_batch),
        })
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<Metric, PredictError> {
        if data.task().is_regression() {
            return Err(PredictError::TaskMismatch("accuracy", "classification"));
        }
        let labels: Vec<usize> = (0..data.len()).map(|i| data.class_of(i)).collect();
        let per_batch: Vec<f64> = self.batches.iter().map(|b| accuracy_of(b, &labels)).collect();
        Ok(Metric {
            value: accuracy_of(&self.points, &labels),
            mc_error: batch_error(&per_batch),
        })
    }

    /// MSE for regression, accuracy for classification.
    pub fn metric(&self, data: &Dataset) -> Result<Metric, PredictError> {
        if data.task().is_regression() {
            self.mse(data)
        } else {
            self.accuracy(data)
        }
    }
}

/// Convenience wrapper: `l` draws, 10 batches.
pub fn mse<R: Rng + ?Sized>(ens: &PosteriorEnsemble, test: &Dataset, l: usize, rng: &mut R) -> Result<Metric, PredictError> {
    if !ens.task().is_regression() || !test.task().is_regression() {
        return Err(PredictError::TaskMismatch("mse", "regression"));
    }
    ens.draw(l, rng)?.predict(test, 10)?.mse(test)
}

pub fn accuracy<R: Rng + ?Sized>(ens: &PosteriorEnsemble, test: &Dataset, l: usize, rng: &mut R) -> Result<Metric, PredictError> {
    if ens.task().is_regression() || test.task().is_regression() {
        return Err(PredictError::TaskMismatch("accuracy", "classification"));
    }
    ens.draw(l, rng)?.predict(test, 10)?.accuracy(test)
}
