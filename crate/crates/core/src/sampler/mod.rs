//! NUTS local inference: warmup with step-size and mass-matrix adaptation,
//! then frozen-parameter sampling.

mod adapt;
mod nuts;

pub use adapt::{DualAverage, WelfordVar, WindowSchedule};
pub use nuts::{initial_step_size, transition, Position, TransitionInfo, MAX_ENERGY_ERROR};

use rayon::prelude::*;
use thiserror::Error;

use crate::model::LogDensity;
use crate::rng::StreamRng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler setting {name} = {value}")]
    Config { name: &'static str, value: f64 },
    #[error("could not find a finite starting point after {attempts} prior draws")]
    Init { attempts: usize },
    #[error("warmup failed: divergence rate {rate:.3} in the final adaptation window")]
    Warmup { rate: f64 },
    #[error("chain state dimension {found} does not match target dimension {expected}")]
    Dimension { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_samples: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    /// Fraction of warmup over which `h` is annealed to its final value.
    pub anneal_fraction: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 4,
            n_warmup: 1000,
            n_samples: 100,
            target_accept: 0.8,
            max_tree_depth: 10,
            anneal_fraction: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let ints = [
            ("n_chains", self.n_chains),
            ("n_warmup", self.n_warmup),
            ("n_samples", self.n_samples),
        ];
        for (name, v) in ints {
            if v == 0 {
                return Err(SamplerError::Config { name, value: 0.0 });
            }
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(SamplerError::Config {
                name: "target_accept",
                value: self.target_accept,
            });
        }
        if !(0.0..=1.0).contains(&self.anneal_fraction) {
            return Err(SamplerError::Config {
                name: "anneal_fraction",
                value: self.anneal_fraction,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainDiagnostics {
    pub transitions: usize,
    pub divergences: usize,
    pub sum_accept: f64,
    pub n_leapfrog: usize,
    pub max_depth_hits: usize,
}

impl ChainDiagnostics {
    fn record(&mut self, info: &TransitionInfo, max_depth: usize) {
        self.transitions += 1;
        self.divergences += usize::from(info.divergent);
        self.sum_accept += info.accept_stat;
        self.n_leapfrog += info.n_leapfrog;
        self.max_depth_hits += usize::from(info.depth >= max_depth.max(1) && !info.divergent);
    }

    pub fn mean_accept(&self) -> f64 {
        if self.transitions == 0 {
            0.0
        } else {
            self.sum_accept / self.transitions as f64
        }
    }

    pub fn merge(&mut self, other: &ChainDiagnostics) {
        self.transitions += other.transitions;
        self.divergences += other.divergences;
        self.sum_accept += other.sum_accept;
        self.n_leapfrog += other.n_leapfrog;
        self.max_depth_hits += other.max_depth_hits;
    }
}

#[derive(Debug, Clone)]
pub struct ChainState {
    pub position: Vec<f64>,
    pub step_size: f64,
    pub inv_mass_diag: Vec<f64>,
    pub warmed_up: bool,
    pub rng: StreamRng,
    pub warmup_diagnostics: ChainDiagnostics,
    pub sampling_diagnostics: ChainDiagnostics,
    /// Divergences during the terminal adaptation buffer.
    pub final_window_divergences: usize,
    pub final_window_len: usize,
}

/// Runs warmup for one chain. `target_at(it)` supplies the density used at
/// warmup iteration `it` (this is where split sharpness is annealed).
pub fn warmup_chain<T, F, I>(
    target_at: &F,
    init: &I,
    config: &SamplerConfig,
    mut rng: StreamRng,
) -> Result<ChainState, SamplerError>
where
    T: LogDensity,
    F: Fn(usize) -> T + Sync,
    I: Fn(&mut StreamRng) -> Vec<f64> + Sync,
{
    let n = config.n_warmup;
    let target0 = target_at(0);
    let dim = target0.dim();
    let attempts = 100;
    let mut pos = None;
    for _ in 0..attempts {
        let q = init(&mut rng);
        if q.len() != dim {
            return Err(SamplerError::Dimension {
                expected: dim,
                found: q.len(),
            });
        }
        if let Some(p) = Position::evaluate(&target0, q) {
            pos = Some(p);
            break;
        }
    }
    let mut pos = pos.ok_or(SamplerError::Init { attempts })?;
    let mut inv_mass = vec![1.0; dim];
    let mut eps = initial_step_size(&target0, &pos, 1.0, &inv_mass, &mut rng);
    let mut da = DualAverage::new(config.target_accept, eps);
    let mut windows = WindowSchedule::new(n);
    let mut var = WelfordVar::new(dim);
    let mut diag = ChainDiagnostics::default();
    let term_start = n - windows.term_buffer().min(n);
    let mut final_div = 0;
    let mut prev_h_target: Option<T> = None;
    for it in 0..n {
        let target = target_at(it);
        // the density moves with annealing, so refresh the cached value
        if prev_h_target.is_some() {
            match Position::evaluate(&target, pos.q.clone()) {
                Some(p) => pos = p,
                None => {
                    diag.transitions += 1;
                    diag.divergences += 1;
                    continue;
                }
            }
        }
        let (next, info) = transition(&target, &pos, eps, &inv_mass, config.max_tree_depth, &mut rng);
        pos = next;
        diag.record(&info, config.max_tree_depth);
        if it >= term_start && info.divergent {
            final_div += 1;
        }
        eps = da.update(info.accept_stat);
        if windows.in_slow_window(it) {
            var.add(&pos.q);
        }
        if windows.end_of_window(it) {
            inv_mass = var.regularized();
            var.restart();
            eps = initial_step_size(&target, &pos, eps, &inv_mass, &mut rng);
            da.restart(eps);
        }
        prev_h_target = Some(target);
    }
    let step_size = da.final_step_size();
    Ok(ChainState {
        position: pos.q,
        step_size,
        inv_mass_diag: inv_mass,
        warmed_up: true,
        rng,
        warmup_diagnostics: diag,
        sampling_diagnostics: ChainDiagnostics::default(),
        final_window_divergences: final_div,
        final_window_len: n - term_start,
    })
}

/// Warms up `rngs.len()` chains in parallel and checks the pooled divergence
/// rate of the final adaptation window.
pub fn warmup<T, F, I>(
    target_at: &F,
    init: &I,
    config: &SamplerConfig,
    rngs: Vec<StreamRng>,
) -> Result<Vec<ChainState>, SamplerError>
where
    T: LogDensity,
    F: Fn(usize) -> T + Sync,
    I: Fn(&mut StreamRng) -> Vec<f64> + Sync,
{
    config.validate()?;
    let states: Vec<ChainState> = rngs
        .into_par_iter()
        .map(|rng| warmup_chain(target_at, init, config, rng))
        .collect::<Result<_, _>>()?;
    let div: usize = states.iter().map(|s| s.final_window_divergences).sum();
    let len: usize = states.iter().map(|s| s.final_window_len).sum();
    if len > 0 {
        let rate = div as f64 / len as f64;
        if rate > 0.5 {
            return Err(SamplerError::Warmup { rate });
        }
    }
    Ok(states)
}

/// Draws `n` post-warmup samples per chain; returns `draws[chain][i]`.
pub fn sample<T: LogDensity>(
    states: &mut [ChainState],
    target: &T,
    n: usize,
    max_tree_depth: usize,
) -> Result<Vec<Vec<Vec<f64>>>, SamplerError> {
    states
        .par_iter_mut()
        .map(|st| {
            let dim = target.dim();
            if st.position.len() != dim {
                return Err(SamplerError::Dimension {
                    expected: dim,
                    found: st.position.len(),
                });
            }
            let mut pos = Position::evaluate(target, st.position.clone()).ok_or(SamplerError::Init { attempts: 0 })?;
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let (next, info) = transition(target, &pos, st.step_size, &st.inv_mass_diag, max_tree_depth, &mut st.rng);
                pos = next;
                st.sampling_diagnostics.record(&info, max_tree_depth);
                out.push(pos.q.clone());
            }
            st.position = pos.q;
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelError;
    use crate::rng::substream;
    use rand_distr::{Distribution, StandardNormal};

    struct StdNormal(usize);

    impl LogDensity for StdNormal {
        fn dim(&self) -> usize {
            self.0
        }
        fn log_density(&self, u: &[f64]) -> Result<f64, ModelError> {
            Ok(-0.5 * u.iter().map(|x| x * x).sum::<f64>())
        }
        fn log_density_grad(&self, u: &[f64], g: &mut [f64]) -> Result<f64, ModelError> {
            for (gi, x) in g.iter_mut().zip(u) {
                *gi = -x;
            }
            self.log_density(u)
        }
    }

    fn rngs(seed: u64, n: usize) -> Vec<StreamRng> {
        (0..n as u64).map(|c| substream(seed, "chain", 0, c)).collect()
    }

    fn init(rng: &mut StreamRng) -> Vec<f64> {
        vec![2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)]
    }

    #[test]
    fn adapted_step_in_range_and_moments() {
        let cfg = SamplerConfig {
            n_warmup: 500,
            ..Default::default()
        };
        let mut states = warmup(&|_| StdNormal(1), &init, &cfg, rngs(1, 4)).unwrap();
        for s in &states {
            assert!(s.step_size > 0.1 && s.step_size < 2.0, "{}", s.step_size);
        }
        let draws = sample(&mut states, &StdNormal(1), 1000, 10).unwrap();
        let xs: Vec<f64> = draws.iter().flatten().map(|d| d[0]).collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(m.abs() < 0.1, "mean {m}");
        assert!((v - 1.0).abs() < 0.15, "var {v}");
    }

    #[test]
    fn chains_are_distinct_and_reproducible() {
        let cfg = SamplerConfig {
            n_warmup: 100,
            ..Default::default()
        };
        let a = warmup(&|_| StdNormal(2), &|r: &mut StreamRng| vec![init(r)[0], init(r)[0]], &cfg, rngs(3, 4)).unwrap();
        let b = warmup(&|_| StdNormal(2), &|r: &mut StreamRng| vec![init(r)[0], init(r)[0]], &cfg, rngs(3, 4)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.position, y.position);
            assert_eq!(x.step_size, y.step_size);
        }
        assert_ne!(a[0].position, a[1].position);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SamplerConfig {
            target_accept: 1.2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
