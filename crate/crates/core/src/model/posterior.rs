//! Unnormalized log posterior of one topology on the unconstrained space.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::data::Dataset;
use crate::math::{log_logistic, logistic};
use crate::tree::{log_structure_prior, StructureHyperparams, TreeTopology};

use super::prior::{dirichlet_log_density, inv_gamma_log_density, normal_mean_log_density};
use super::soft::{LikGrad, SoftTree};
use super::transform::{stick_break_backward, stick_break_forward, to_unconstrained, ParamLayout, StickBreak};
use super::{LocalParams, ModelError, ModelHyperparams};

/// A differentiable log density on `R^dim`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, u: &[f64]) -> Result<f64, ModelError>;
    /// Writes the gradient into `grad` and returns the log density.
    fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64, ModelError>;
}

/// Parameter blocks held fixed instead of sampled.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClampedParams {
    /// Split simplexes and thresholds.
    pub splits: Option<(Vec<Vec<f64>>, Vec<f64>)>,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelContext<'a> {
    topology: TreeTopology,
    data: &'a Dataset,
    hp: ModelHyperparams,
    structure: StructureHyperparams,
    include_structure_prior: bool,
    layout: ParamLayout,
    plan: SoftTree,
    clamp: ClampedParams,
    clamp_delta_flat: Vec<f64>,
    log_structure: f64,
}

struct Decoded {
    sticks: Vec<StickBreak>,
    delta_flat: Vec<f64>,
    taus: Vec<f64>,
    mu: Vec<f64>,
    sigma: Option<f64>,
}

impl<'a> ModelContext<'a> {
    pub fn new(
        topology: TreeTopology,
        data: &'a Dataset,
        hp: ModelHyperparams,
        structure: StructureHyperparams,
    ) -> Result<Self, ModelError> {
        hp.validate()?;
        if data.n_features() == 0 {
            return Err(ModelError::Shape {
                what: "feature count",
                expected: 1,
                found: 0,
            });
        }
        let layout = ParamLayout::new(&topology, data.n_features(), data.task());
        let plan = SoftTree::new(&topology);
        let log_structure = log_structure_prior(&topology, &structure);
        Ok(Self {
            topology,
            data,
            hp,
            structure,
            include_structure_prior: true,
            layout,
            plan,
            clamp: ClampedParams::default(),
            clamp_delta_flat: Vec::new(),
            log_structure,
        })
    }

    /// Drops the topology prior term (used when checking normalization).
    pub fn with_structure_prior(mut self, include: bool) -> Self {
        self.include_structure_prior = include;
        self
    }

    pub fn with_clamp(mut self, clamp: ClampedParams) -> Result<Self, ModelError> {
        let n_int = self.topology.n_internal();
        let n_x = self.data.n_features();
        if let Some((deltas, taus)) = &clamp.splits {
            let probe = LocalParams {
                deltas: deltas.clone(),
                taus: taus.clone(),
                leaf_means: Vec::new(),
                sigma: clamp.sigma,
            };
            probe.validate()?;
            if deltas.len() != n_int || taus.len() != n_int || deltas.iter().any(|d| d.len() != n_x) {
                return Err(ModelError::Shape {
                    what: "clamped split count",
                    expected: n_int,
                    found: deltas.len(),
                });
            }
            self.clamp_delta_flat = deltas.iter().flatten().copied().collect();
        }
        if let Some(s) = clamp.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(ModelError::Domain { what: "sigma", value: s });
            }
        }
        self.layout.free_splits = clamp.splits.is_none();
        self.layout.free_sigma = self.layout.regression && clamp.sigma.is_none();
        self.clamp = clamp;
        Ok(self)
    }

    pub fn topology(&self) -> &TreeTopology {
        &self.topology
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn hyperparams(&self) -> &ModelHyperparams {
        &self.hp
    }

    pub fn structure_hyperparams(&self) -> &StructureHyperparams {
        &self.structure
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn plan(&self) -> &SoftTree {
        &self.plan
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn log_structure_prior(&self) -> f64 {
        if self.include_structure_prior {
            self.log_structure
        } else {
            0.0
        }
    }

    fn check_input(&self, u: &[f64]) -> Result<(), ModelError> {
        if u.len() != self.layout.dim() {
            return Err(ModelError::Shape {
                what: "unconstrained dimension",
                expected: self.layout.dim(),
                found: u.len(),
            });
        }
        if let Some(index) = u.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                what: "unconstrained coordinate",
                index,
            });
        }
        Ok(())
    }

    fn decode(&self, u: &[f64]) -> Decoded {
        let l = &self.layout;
        let n_x = l.n_features;
        let mut sticks = Vec::new();
        let (delta_flat, taus) = if l.free_splits {
            let sd = l.simplex_dim();
            let mut flat = Vec::with_capacity(l.n_internal * n_x);
            for j in 0..l.n_internal {
                let mut sb = StickBreak::default();
                let off = l.delta_offset(j);
                stick_break_forward(&u[off..off + sd], n_x, &mut sb);
                flat.extend_from_slice(&sb.delta);
                sticks.push(sb);
            }
            let to = l.tau_offset();
            let taus = u[to..to + l.n_internal].iter().map(|&v| logistic(v)).collect();
            (flat, taus)
        } else {
            let (_, taus) = self.clamp.splits.as_ref().expect("clamped splits");
            (self.clamp_delta_flat.clone(), taus.clone())
        };
        let (mu, sigma) = if l.regression {
            let mo = l.mean_offset();
            let sigma = if l.free_sigma {
                u[l.sigma_offset()].exp()
            } else {
                self.clamp.sigma.expect("clamped sigma")
            };
            (u[mo..mo + l.n_leaves].to_vec(), Some(sigma))
        } else {
            (Vec::new(), None)
        };
        Decoded {
            sticks,
            delta_flat,
            taus,
            mu,
            sigma,
        }
    }

    /// Constrained parameters at `u`, with clamped blocks filled in.
    pub fn to_params(&self, u: &[f64]) -> Result<LocalParams, ModelError> {
        self.check_input(u)?;
        let d = self.decode(u);
        let n_x = self.layout.n_features;
        Ok(LocalParams {
            deltas: d.delta_flat.chunks(n_x).map(<[f64]>::to_vec).collect(),
            taus: d.taus,
            leaf_means: d.mu,
            sigma: d.sigma,
        })
    }

    /// Unconstrained coordinates of `p`; clamped blocks of `p` are ignored.
    pub fn to_unconstrained(&self, p: &LocalParams) -> Result<Vec<f64>, ModelError> {
        to_unconstrained(&self.layout, p)
    }

    fn evaluate(&self, u: &[f64], h: f64, grad: Option<&mut [f64]>) -> Result<f64, ModelError> {
        self.check_input(u)?;
        let l = self.layout;
        let d = self.decode(u);
        let mut lg = LikGrad::default();
        let want_grad = grad.is_some();
        if want_grad {
            lg.reset(l.n_internal, l.n_features, l.n_leaves);
        }
        let ll = self.plan.log_likelihood_flat(
            self.data,
            &self.hp,
            &d.delta_flat,
            &d.taus,
            &d.mu,
            d.sigma,
            h,
            want_grad.then_some(&mut lg),
        );
        let mut total = ll + self.log_structure_prior();
        let alpha = self.hp.dirichlet_alpha;
        if l.free_splits {
            for sb in &d.sticks {
                total += dirichlet_log_density(&sb.log_delta, alpha) + sb.log_jac;
            }
            let to = l.tau_offset();
            for &v in &u[to..to + l.n_internal] {
                total += log_logistic(v) + log_logistic(-v);
            }
        }
        if l.regression {
            total += normal_mean_log_density(&d.mu, self.hp.mu_prior.0, self.hp.mu_prior.1);
            if l.free_sigma {
                let ls = u[l.sigma_offset()];
                total += inv_gamma_log_density(ls, self.hp.sigma_prior.0, self.hp.sigma_prior.1) + ls;
            }
        }
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v = 0.0);
            if l.free_splits {
                let n_x = l.n_features;
                let sd = l.simplex_dim();
                let mut g_log = vec![0.0; n_x];
                for (j, sb) in d.sticks.iter().enumerate() {
                    for k in 0..n_x {
                        g_log[k] = lg.delta[j * n_x + k] * sb.delta[k] + (alpha - 1.0);
                    }
                    let off = l.delta_offset(j);
                    stick_break_backward(sb, &g_log, &mut g[off..off + sd]);
                }
                let to = l.tau_offset();
                for (j, &t) in d.taus.iter().enumerate() {
                    g[to + j] = lg.tau[j] * t * (1.0 - t) + (1.0 - 2.0 * t);
                }
            }
            if l.regression {
                let mo = l.mean_offset();
                let (m0, v0) = self.hp.mu_prior;
                for k in 0..l.n_leaves {
                    g[mo + k] = lg.mu[k] - (d.mu[k] - m0) / v0;
                }
                if l.free_sigma {
                    let s = d.sigma.expect("regression sigma");
                    let (a, b) = self.hp.sigma_prior;
                    g[l.sigma_offset()] = lg.sigma * s - a + b / s;
                }
            }
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite {
                    what: "gradient",
                    index,
                });
            }
        }
        if total.is_nan() || total == f64::INFINITY {
            let index = u
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map_or(0, |(i, _)| i);
            return Err(ModelError::NonFinite {
                what: "log posterior",
                index,
            });
        }
        Ok(total)
    }

    /// Log posterior (likelihood, local priors, structure prior and
    /// Jacobian terms) at unconstrained `u` and split sharpness `h`.
    pub fn log_posterior(&self, u: &[f64], h: f64) -> Result<f64, ModelError> {
        self.evaluate(u, h, None)
    }

    pub fn log_posterior_grad(&self, u: &[f64], h: f64, grad: &mut [f64]) -> Result<f64, ModelError> {
        if grad.len() != self.layout.dim() {
            return Err(ModelError::Shape {
                what: "gradient buffer",
                expected: self.layout.dim(),
                found: grad.len(),
            });
        }
        self.evaluate(u, h, Some(grad))
    }

    /// Draws free parameters from their priors and maps them to `u`.
    pub fn sample_prior_unconstrained<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let l = self.layout;
        let gamma = Gamma::new(self.hp.dirichlet_alpha, 1.0).expect("validated alpha");
        let normal = Normal::new(self.hp.mu_prior.0, self.hp.mu_prior.1.sqrt()).expect("validated variance");
        let inv_sigma = Gamma::new(self.hp.sigma_prior.0, 1.0 / self.hp.sigma_prior.1).expect("validated shape");
        loop {
            let mut p = LocalParams {
                deltas: Vec::new(),
                taus: Vec::new(),
                leaf_means: Vec::new(),
                sigma: None,
            };
            if l.free_splits {
                for _ in 0..l.n_internal {
                    let raw: Vec<f64> = (0..l.n_features).map(|_| gamma.sample(rng)).collect();
                    let s: f64 = raw.iter().sum();
                    let mut d: Vec<f64> = raw.iter().map(|v| v / s).collect();
                    // renormalize so the simplex sum check holds to rounding
                    let s2: f64 = d.iter().sum();
                    d.iter_mut().for_each(|v| *v /= s2);
                    p.deltas.push(d);
                }
                p.taus = (0..l.n_internal).map(|_| rng.random::<f64>()).collect();
            }
            if l.regression {
                p.leaf_means = (0..l.n_leaves).map(|_| normal.sample(rng)).collect();
                if l.free_sigma {
                    p.sigma = Some(1.0 / inv_sigma.sample(rng));
                }
            }
            if let Ok(u) = to_unconstrained(&l, &p) {
                if u.iter().all(|v| v.is_finite()) {
                    return u;
                }
            }
        }
    }
}

/// A topology's posterior at a fixed split sharpness.
#[derive(Debug, Clone, Copy)]
pub struct Target<'c, 'a> {
    pub ctx: &'c ModelContext<'a>,
    pub h: f64,
}

impl LogDensity for Target<'_, '_> {
    fn dim(&self) -> usize {
        self.ctx.dim()
    }

    fn log_density(&self, u: &[f64]) -> Result<f64, ModelError> {
        self.ctx.log_posterior(u, self.h)
    }

    fn log_density_grad(&self, u: &[f64], grad: &mut [f64]) -> Result<f64, ModelError> {
        self.ctx.log_posterior_grad(u, self.h, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Task;
    use crate::model::{jacobian_logdet, log_likelihood, log_prior_params, to_constrained};
    use crate::rng::substream;

    fn regression_data() -> Dataset {
        crate::data::generate_wu_sized(11, 15, 1, 0.25).0
    }

    fn classification_data() -> Dataset {
        let mut rng = substream(5, "cls", 0, 0);
        let n = 40;
        let raw: Vec<f64> = (0..n * 3).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|i| ((raw[3 * i] + raw[3 * i + 1] > 1.0) as usize + (raw[3 * i + 2] > 0.7) as usize) as f64).collect();
        Dataset::from_raw(raw, y, 3, Task::Classification { n_classes: 3 })
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    fn fd_check(ctx: &ModelContext, h: f64, points: usize, seed: u64) -> f64 {
        let mut rng = substream(seed, "fd", 0, 0);
        let mut worst: f64 = 0.0;
        let dim = ctx.dim();
        let mut g = vec![0.0; dim];
        for _ in 0..points {
            let u: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            ctx.log_posterior_grad(&u, h, &mut g).unwrap();
            for i in 0..dim {
                let step = 1e-5;
                let mut up = u.clone();
                let mut dn = u.clone();
                up[i] += step;
                dn[i] -= step;
                let fd = (ctx.log_posterior(&up, h).unwrap() - ctx.log_posterior(&dn, h).unwrap()) / (2.0 * step);
                worst = worst.max(rel_err(g[i], fd));
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences_regression() {
        let data = regression_data();
        let hp = ModelHyperparams {
            dirichlet_alpha: 1.7,
            ..ModelHyperparams::for_targets(data.target_mean(), data.target_variance())
        };
        for key in ["", "1", "1,2", "1,3", "1,2,3,5"] {
            let t = TreeTopology::from_key(key).unwrap();
            let ctx = ModelContext::new(t, &data, hp.clone(), StructureHyperparams::default()).unwrap();
            let worst = fd_check(&ctx, 0.2, 10, 1);
            assert!(worst < 1e-5, "{key}: {worst}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_classification() {
        let data = classification_data();
        let hp = ModelHyperparams {
            class_alpha: 0.7,
            dirichlet_alpha: 0.6,
            ..Default::default()
        };
        for key in ["", "1", "1,2", "1,2,3"] {
            let t = TreeTopology::from_key(key).unwrap();
            let ctx = ModelContext::new(t, &data, hp.clone(), StructureHyperparams::default()).unwrap();
            let worst = fd_check(&ctx, 0.3, 10, 2);
            assert!(worst < 1e-5, "{key}: {worst}");
        }
    }

    #[test]
    fn compositional_oracle() {
        let data = regression_data();
        let hp = ModelHyperparams::for_targets(data.target_mean(), data.target_variance());
        let sh = StructureHyperparams::default();
        let t = TreeTopology::from_key("1,3").unwrap();
        let ctx = ModelContext::new(t.clone(), &data, hp.clone(), sh).unwrap();
        let mut rng = substream(3, "oracle", 0, 0);
        for _ in 0..20 {
            let u: Vec<f64> = (0..ctx.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = to_constrained(ctx.layout(), &u).unwrap();
            let oracle = log_likelihood(&data, &t, &p, &hp, 0.1).unwrap()
                + log_prior_params(&p, &hp)
                + log_structure_prior(&t, &sh)
                + jacobian_logdet(ctx.layout(), &u).unwrap();
            let v = ctx.log_posterior(&u, 0.1).unwrap();
            assert!((v - oracle).abs() < 1e-10 * oracle.abs().max(1.0), "{v} vs {oracle}");
        }
    }

    #[test]
    fn empty_data_is_prior_plus_jacobian() {
        let data = Dataset::empty(2, Task::Regression);
        let hp = ModelHyperparams::default();
        let t = TreeTopology::from_key("1").unwrap();
        let ctx = ModelContext::new(t, &data, hp.clone(), StructureHyperparams::default())
            .unwrap()
            .with_structure_prior(false);
        let u = vec![0.3, -0.2, 0.1, 0.4, 0.5];
        let p = to_constrained(ctx.layout(), &u).unwrap();
        let expect = log_prior_params(&p, &hp) + jacobian_logdet(ctx.layout(), &u).unwrap();
        assert!((ctx.log_posterior(&u, 0.1).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn mu_gradient_vanishes_at_root_mode() {
        let data = regression_data();
        let hp = ModelHyperparams::for_targets(0.0, 4.0);
        let sigma = 0.5;
        let ctx = ModelContext::new(TreeTopology::root_only(), &data, hp.clone(), StructureHyperparams::default())
            .unwrap()
            .with_clamp(ClampedParams {
                splits: None,
                sigma: Some(sigma),
            })
            .unwrap();
        let n = data.len() as f64;
        let prec = n / (sigma * sigma) + 1.0 / hp.mu_prior.1;
        let mode = (data.y().iter().sum::<f64>() / (sigma * sigma) + hp.mu_prior.0 / hp.mu_prior.1) / prec;
        let mut g = vec![0.0; 1];
        ctx.log_posterior_grad(&[mode], 0.1, &mut g).unwrap();
        assert!(g[0].abs() < 1e-9, "{}", g[0]);
    }

    #[test]
    fn clamped_splits_leave_means_only() {
        let data = regression_data();
        let hp = ModelHyperparams::default();
        let t = TreeTopology::from_key("1").unwrap();
        let ctx = ModelContext::new(t, &data, hp, StructureHyperparams::default())
            .unwrap()
            .with_clamp(ClampedParams {
                splits: Some((vec![vec![1.0, 0.0, 0.0]], vec![0.5])),
                sigma: Some(0.3),
            })
            .unwrap();
        assert_eq!(ctx.dim(), 2);
        let worst = fd_check(&ctx, 0.05, 5, 9);
        assert!(worst < 1e-5);
    }

    #[test]
    fn nonfinite_input_names_coordinate() {
        let data = regression_data();
        let ctx = ModelContext::new(TreeTopology::root_only(), &data, ModelHyperparams::default(), StructureHyperparams::default()).unwrap();
        let err = ctx.log_posterior(&[0.0, f64::NAN], 0.1).unwrap_err();
        assert_eq!(
            err,
            ModelError::NonFinite {
                what: "unconstrained coordinate",
                index: 1
            }
        );
    }

    #[test]
    fn prior_draws_are_valid() {
        let data = classification_data();
        let ctx = ModelContext::new(TreeTopology::from_key("1,2,3").unwrap(), &data, ModelHyperparams::default(), StructureHyperparams::default()).unwrap();
        let mut rng = substream(1, "init", 0, 0);
        for _ in 0..50 {
            let u = ctx.sample_prior_unconstrained(&mut rng);
            let p = ctx.to_params(&u).unwrap();
            p.validate().unwrap();
            assert!(ctx.log_posterior(&u, 0.1).unwrap().is_finite());
        }
    }
}
