//! Global loop over tree topologies: discovery counts, activation with
//! warmup, utility-driven selection of the next topology for local
//! inference, and grow/prune/stay proposals.

use std::collections::HashMap;

use rand::Rng;
use thiserror::Error;

use crate::data::Dataset;
use crate::evidence::{draw_pseudo_samples, local_density_weights, EvidenceError, EvidenceEstimate, PhiMode};
use crate::math::{log_normal_cdf, softmax};
use crate::model::{anneal_h, ModelContext, ModelError, ModelHyperparams, Target};
use crate::rng::{substream, StreamRng};
use crate::sampler::{self, ChainDiagnostics, ChainState, SamplerConfig, SamplerError};
use crate::tree::{propose_global, sample_prior_topology, MoveProbs, StructureHyperparams, TreeTopology};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("invalid scheduler setting {name} = {value}")]
    Config { name: &'static str, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("no topology could be activated; last failure: {0}")]
    NothingActive(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerConfig {
    pub n_iterations: usize,
    pub n_initial: usize,
    pub activation_threshold: usize,
    pub max_active: usize,
    pub delta: f64,
    pub beta: f64,
    pub kappa: f64,
    pub lookahead: f64,
    pub n_pseudo: usize,
    pub phi_mode: PhiMode,
    pub max_depth: u32,
    pub move_probs: MoveProbs,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            n_iterations: 100,
            n_initial: 10,
            activation_threshold: 1,
            max_active: 20,
            delta: 0.5,
            beta: 1.0,
            kappa: 0.0,
            lookahead: 1000.0,
            n_pseudo: 10,
            phi_mode: PhiMode::Spatial,
            max_depth: 5,
            move_probs: MoveProbs::default(),
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        let bad = |name, value: f64| Err(SchedulerError::Config { name, value });
        if !(0.0..=1.0).contains(&self.delta) {
            return bad("delta", self.delta);
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta", self.beta);
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad("kappa", self.kappa);
        }
        if !(self.lookahead >= 0.0 && self.lookahead.is_finite()) {
            return bad("lookahead", self.lookahead);
        }
        if self.max_active == 0 {
            return bad("max_active", 0.0);
        }
        if self.n_initial == 0 {
            return bad("n_initial", 0.0);
        }
        if self.n_pseudo == 0 {
            return bad("n_pseudo", 0.0);
        }
        if self.max_depth == 0 || self.max_depth > crate::tree::MAX_SUPPORTED_DEPTH {
            return bad("max_depth", self.max_depth as f64);
        }
        Ok(())
    }
}

/// Everything needed to run the global loop on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub scheduler: SchedulerConfig,
    pub sampler: SamplerConfig,
    pub model: ModelHyperparams,
    pub structure: StructureHyperparams,
    pub h_init: f64,
    pub h_final: f64,
    pub seed: u64,
}

impl RunSettings {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        self.scheduler.validate()?;
        self.sampler.validate()?;
        self.model.validate()?;
        if self.structure.validate().is_err() {
            return Err(SchedulerError::Config {
                name: "structure.alpha_split",
                value: self.structure.alpha_split,
            });
        }
        for (name, v) in [("h_init", self.h_init), ("h_final", self.h_final)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SchedulerError::Config { name, value: v });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Discovered,
    Active,
    /// Evicted from the active set; never reactivated.
    Retired,
    /// Warmup failed twice.
    Failed,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Discovered => "discovered",
            Status::Active => "active",
            Status::Retired => "retired",
            Status::Failed => "failed",
        })
    }
}

/// Weighted local posterior sample in unconstrained coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub xi: Vec<f64>,
    pub log_weight: f64,
}

#[derive(Debug, Clone)]
pub struct SubspaceRecord<'a> {
    pub id: usize,
    pub topology: TreeTopology,
    pub key: String,
    pub proposals: usize,
    pub visits: usize,
    pub status: Status,
    pub activation_order: Option<usize>,
    pub context: Option<ModelContext<'a>>,
    pub chains: Vec<ChainState>,
    pub evidence: EvidenceEstimate,
    pub samples: Vec<WeightedSample>,
    pub warmup_used: usize,
}

impl SubspaceRecord<'_> {
    pub fn log_sigma2(&self) -> f64 {
        self.evidence.log_weight_sigma2()
    }

    pub fn warmup_diagnostics(&self) -> ChainDiagnostics {
        let mut d = ChainDiagnostics::default();
        for c in &self.chains {
            d.merge(&c.warmup_diagnostics);
        }
        d
    }

    pub fn sampling_diagnostics(&self) -> ChainDiagnostics {
        let mut d = ChainDiagnostics::default();
        for c in &self.chains {
            d.merge(&c.sampling_diagnostics);
        }
        d
    }

    /// Normalized local weights over this tree's pseudo-samples.
    pub fn local_weights(&self) -> Vec<f64> {
        let lw: Vec<f64> = self.samples.iter().map(|s| s.log_weight).collect();
        local_density_weights(&lw)
    }
}

/// Stable `τ̂_m / max τ̂` from `(log Ẑ_m, log σ²_m)` pairs.
pub fn exploitation_ratio(stats: &[(f64, f64)], kappa: f64) -> Vec<f64> {
    let parts: Vec<(f64, f64)> = stats
        .iter()
        .map(|&(log_z, log_s2)| {
            let a = (2.0 * log_z).max(log_s2);
            if a == f64::NEG_INFINITY {
                return (a, 0.0);
            }
            let inner = ((2.0 * log_z - a).exp() + (1.0 + kappa) * (log_s2 - a).exp()).sqrt();
            (a, inner)
        })
        .collect();
    let log_tau = |&(a, inner): &(f64, f64)| 0.5 * a + inner.ln();
    let Some(q) = (0..parts.len()).max_by(|&i, &j| log_tau(&parts[i]).total_cmp(&log_tau(&parts[j])).then(j.cmp(&i))) else {
        return Vec::new();
    };
    let (a_q, inner_q) = parts[q];
    if a_q == f64::NEG_INFINITY {
        return vec![1.0; parts.len()];
    }
    parts
        .iter()
        .map(|&(a_p, inner_p)| {
            if a_p == f64::NEG_INFINITY {
                0.0
            } else {
                (0.5 * (a_p - a_q)).exp() * inner_p / inner_q
            }
        })
        .collect()
}

/// `1 - Ψ(log w_th)^{T_a}` with Ψ the normal CDF fitted to the log-weights.
pub fn exploration_term(mean: f64, variance: f64, log_w_th: f64, lookahead: f64) -> f64 {
    if lookahead == 0.0 {
        return 0.0;
    }
    let log_psi = if variance > 0.0 {
        log_normal_cdf((log_w_th - mean) / variance.sqrt())
    } else if log_w_th >= mean {
        0.0
    } else {
        f64::NEG_INFINITY
    };
    -(lookahead * log_psi).exp_m1()
}

/// Per-tree inputs to the utility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityInput {
    pub log_z: f64,
    pub log_sigma2: f64,
    pub log_weight_mean: f64,
    pub log_weight_var: f64,
    pub max_log_weight: f64,
    pub visits: usize,
}

pub fn utility(inputs: &[UtilityInput], cfg: &SchedulerConfig) -> Vec<f64> {
    if inputs.is_empty() {
        return Vec::new();
    }
    let stats: Vec<(f64, f64)> = inputs.iter().map(|r| (r.log_z, r.log_sigma2)).collect();
    let ratio = exploitation_ratio(&stats, cfg.kappa);
    let w_th = inputs.iter().map(|r| r.max_log_weight).fold(f64::NEG_INFINITY, f64::max);
    let rho: Vec<f64> = inputs
        .iter()
        .map(|r| exploration_term(r.log_weight_mean, r.log_weight_var, w_th, cfg.lookahead))
        .collect();
    let max_rho = rho.iter().copied().fold(0.0, f64::max);
    let total_visits: usize = inputs.iter().map(|r| r.visits).sum();
    let optimism = (total_visits.max(1) as f64).ln();
    inputs
        .iter()
        .zip(ratio.iter().zip(&rho))
        .map(|(r, (&ratio, &rho))| {
            let s = r.visits.max(1) as f64;
            let explore = if max_rho > 0.0 { rho / max_rho } else { 0.0 };
            ((1.0 - cfg.delta) * ratio + cfg.delta * explore + cfg.beta * optimism / s.sqrt()) / s
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub selected: String,
    pub utility: f64,
    pub proposal: String,
    pub move_kind: String,
}

pub struct RunResult<'a> {
    pub records: Vec<SubspaceRecord<'a>>,
    pub iterations: Vec<IterationLog>,
    pub events: Vec<String>,
    pub settings: RunSettings,
}

impl<'a> RunResult<'a> {
    pub fn active(&self) -> impl Iterator<Item = &SubspaceRecord<'a>> {
        self.records.iter().filter(|r| r.status == Status::Active)
    }

    /// Posterior topology weights over active trees, softmax of log Ẑ
    /// (which already contains the structure prior).
    pub fn tree_weights(&self) -> Vec<(usize, f64)> {
        let active: Vec<&SubspaceRecord> = self.active().collect();
        let lz: Vec<f64> = active.iter().map(|r| r.evidence.log_z).collect();
        let w = softmax(&lz);
        active.iter().map(|r| r.id).zip(w).collect()
    }
}

pub struct Scheduler<'a> {
    data: &'a Dataset,
    settings: RunSettings,
    records: Vec<SubspaceRecord<'a>>,
    index: HashMap<String, usize>,
    activations: usize,
    events: Vec<String>,
    iterations: Vec<IterationLog>,
    rng: StreamRng,
    last_failure: Option<String>,
}

impl<'a> Scheduler<'a> {
    pub fn new(data: &'a Dataset, settings: RunSettings) -> Result<Self, SchedulerError> {
        settings.validate()?;
        let rng = substream(settings.seed, "global", 0, 0);
        Ok(Self {
            data,
            settings,
            records: Vec::new(),
            index: HashMap::new(),
            activations: 0,
            events: Vec::new(),
            iterations: Vec::new(),
            rng,
            last_failure: None,
        })
    }

    fn discover(&mut self, t: TreeTopology) -> usize {
        let key = t.key();
        if let Some(&id) = self.index.get(&key) {
            self.records[id].proposals += 1;
            return id;
        }
        let id = self.records.len();
        self.index.insert(key.clone(), id);
        self.records.push(SubspaceRecord {
            id,
            topology: t,
            key,
            proposals: 1,
            visits: 0,
            status: Status::Discovered,
            activation_order: None,
            context: None,
            chains: Vec::new(),
            evidence: EvidenceEstimate::default(),
            samples: Vec::new(),
            warmup_used: 0,
        });
        id
    }

    fn active_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .records
            .iter()
            .filter(|r| r.status == Status::Active)
            .map(|r| r.id)
            .collect();
        ids.sort_by_key(|&i| self.records[i].activation_order);
        ids
    }

    fn utilities(&self, ids: &[usize]) -> Vec<f64> {
        let inputs: Vec<UtilityInput> = ids
            .iter()
            .map(|&i| {
                let r = &self.records[i];
                UtilityInput {
                    log_z: r.evidence.log_z,
                    log_sigma2: r.log_sigma2(),
                    log_weight_mean: r.evidence.log_weight_mean,
                    log_weight_var: r.evidence.log_weight_variance(),
                    max_log_weight: r.evidence.max_log_weight,
                    visits: r.visits,
                }
            })
            .collect();
        utility(&inputs, &self.settings.scheduler)
    }

    fn h_at(&self, it: usize, n_warmup: usize) -> f64 {
        let s = &self.settings;
        let span = s.sampler.anneal_fraction * n_warmup as f64;
        let frac = if span > 0.0 { it as f64 / span } else { 1.0 };
        anneal_h(frac, s.h_init, s.h_final)
    }

    fn run_warmup(&self, id: usize, ctx: &ModelContext<'a>, n_warmup: usize, attempt: u64) -> Result<Vec<ChainState>, SamplerError> {
        let cfg = SamplerConfig {
            n_warmup,
            ..self.settings.sampler.clone()
        };
        let target_at = |it: usize| Target {
            ctx,
            h: self.h_at(it, n_warmup),
        };
        let init = |rng: &mut StreamRng| ctx.sample_prior_unconstrained(rng);
        let rngs = (0..cfg.n_chains as u64)
            .map(|c| substream(self.settings.seed, "chain", id as u64, attempt * 1_000_000 + c))
            .collect();
        sampler::warmup(&target_at, &init, &cfg, rngs)
    }

    /// Warmup plus a first visit. Returns false if the tree could not be
    /// activated.
    fn activate(&mut self, id: usize) -> Result<bool, SchedulerError> {
        let s = &self.settings;
        let ctx = match self.records[id].context.take() {
            Some(c) => c,
            None => ModelContext::new(self.records[id].topology.clone(), self.data, s.model.clone(), s.structure)?,
        };
        let base = s.sampler.n_warmup;
        let key = self.records[id].key.clone();
        let mut outcome = self.run_warmup(id, &ctx, base, 0);
        let mut used = base;
        if let Err(e) = &outcome {
            self.events.push(format!("warmup of tree [{key}] failed ({e}); retrying with n_warmup = {}", 2 * base));
            used = 2 * base;
            outcome = self.run_warmup(id, &ctx, used, 1);
        }
        match outcome {
            Ok(chains) => {
                let rec = &mut self.records[id];
                rec.chains = chains;
                rec.context = Some(ctx);
                rec.status = Status::Active;
                rec.activation_order = Some(self.activations);
                rec.warmup_used = used;
                self.activations += 1;
                self.events.push(format!("activated tree [{key}] after {used} warmup iterations"));
                self.visit(id)?;
                Ok(true)
            }
            Err(e) => {
                let msg = format!("tree [{key}]: {e}");
                self.events.push(format!("warmup failed for {msg}; tree marked failed"));
                self.records[id].status = Status::Failed;
                self.last_failure = Some(msg);
                Ok(false)
            }
        }
    }

    /// Local inference: N_s draws per chain, pseudo-samples and an evidence
    /// update.
    fn visit(&mut self, id: usize) -> Result<(), SchedulerError> {
        let s = &self.settings;
        let visit_no = self.records[id].visits as u64;
        let rec = &mut self.records[id];
        let ctx = rec.context.as_ref().expect("active tree has a context");
        let target = Target { ctx, h: s.h_final };
        let draws = sampler::sample(&mut rec.chains, &target, s.sampler.n_samples, s.sampler.max_tree_depth)?;
        let n_c = draws.len() as u64;
        let rngs = (0..n_c)
            .map(|c| substream(s.seed, "lais", id as u64, visit_no * n_c + c))
            .collect();
        let pseudo = match draw_pseudo_samples(&target, &draws, s.scheduler.n_pseudo, s.scheduler.phi_mode, rngs) {
            Ok(p) => p,
            Err(e @ EvidenceError::Factorization { .. }) => {
                let key = rec.key.clone();
                self.events.push(format!("evidence failure on tree [{key}]: {e}; visit contributes zero weight"));
                Vec::new()
            }
            Err(e) => {
                self.events.push(format!("evidence failure: {e}"));
                Vec::new()
            }
        };
        let rec = &mut self.records[id];
        let lw: Vec<f64> = if pseudo.is_empty() {
            vec![f64::NEG_INFINITY; draws.iter().map(Vec::len).sum::<usize>() * s.scheduler.n_pseudo]
        } else {
            pseudo.iter().map(|p| p.log_weight).collect()
        };
        rec.evidence.update(&lw);
        rec.samples.extend(pseudo.into_iter().filter(|p| p.log_weight.is_finite()).map(|p| WeightedSample {
            xi: p.xi,
            log_weight: p.log_weight,
        }));
        rec.visits += 1;
        Ok(())
    }

    fn evict_if_needed(&mut self) {
        loop {
            let ids = self.active_ids();
            if ids.len() <= self.settings.scheduler.max_active {
                return;
            }
            let u = self.utilities(&ids);
            // lowest utility; among ties the earliest activation goes first
            let mut worst = 0;
            for k in 1..ids.len() {
                if u[k] < u[worst] {
                    worst = k;
                }
            }
            let id = ids[worst];
            let rec = &mut self.records[id];
            rec.status = Status::Retired;
            rec.chains.clear();
            rec.samples = Vec::new();
            self.events.push(format!("evicted tree [{}] with utility {:.6e}", rec.key, u[worst]));
        }
    }

    fn activate_pending(&mut self) -> Result<(), SchedulerError> {
        let c0 = self.settings.scheduler.activation_threshold;
        let pending: Vec<usize> = self
            .records
            .iter()
            .filter(|r| r.status == Status::Discovered && r.proposals > c0)
            .map(|r| r.id)
            .collect();
        for id in pending {
            if self.activate(id)? {
                self.evict_if_needed();
            }
        }
        if self.active_ids().is_empty() {
            // fall back to the most-proposed discovered tree
            while self.active_ids().is_empty() {
                let best = self
                    .records
                    .iter()
                    .filter(|r| r.status == Status::Discovered)
                    .max_by(|a, b| a.proposals.cmp(&b.proposals).then(b.id.cmp(&a.id)))
                    .map(|r| r.id);
                let Some(id) = best else { break };
                self.events.push(format!("no active tree; activating most-proposed tree [{}]", self.records[id].key));
                self.activate(id)?;
            }
        }
        Ok(())
    }

    pub fn run(mut self) -> Result<RunResult<'a>, SchedulerError> {
        let s = self.settings.scheduler.clone();
        for _ in 0..s.n_initial {
            let t = sample_prior_topology(&self.settings.structure, s.max_depth, &mut self.rng);
            self.discover(t);
        }
        for it in 0..s.n_iterations {
            self.activate_pending()?;
            let ids = self.active_ids();
            if ids.is_empty() {
                let msg = self.last_failure.clone().unwrap_or_else(|| "no candidate topology".into());
                return Err(SchedulerError::NothingActive(msg));
            }
            let u = self.utilities(&ids);
            let mut best = 0;
            for k in 1..ids.len() {
                if u[k] > u[best] {
                    best = k;
                }
            }
            let id = ids[best];
            self.visit(id)?;
            let (next, kind) = propose_global(&self.records[id].topology, &s.move_probs, s.max_depth, &mut self.rng);
            let next_key = next.key();
            self.discover(next);
            self.iterations.push(IterationLog {
                iteration: it,
                selected: self.records[id].key.clone(),
                utility: u[best],
                proposal: next_key,
                move_kind: kind.to_string(),
            });
            // keep the global stream independent of how many draws the
            // proposal consumed on this iteration
            let _ = self.rng.random::<u64>();
        }
        if self.active_ids().is_empty() {
            self.activate_pending()?;
        }
        if self.active_ids().is_empty() {
            let msg = self.last_failure.clone().unwrap_or_else(|| "no candidate topology".into());
            return Err(SchedulerError::NothingActive(msg));
        }
        Ok(RunResult {
            records: self.records,
            iterations: self.iterations,
            events: self.events,
            settings: self.settings,
        })
    }
}

/// Warmup and `n_visits` local-inference visits on one fixed topology,
/// using `ctx` as given (clamps and structure-prior setting included).
pub fn run_fixed<'a>(ctx: ModelContext<'a>, settings: RunSettings, n_visits: usize) -> Result<SubspaceRecord<'a>, SchedulerError> {
    let mut s = Scheduler::new(ctx.data(), settings)?;
    let id = s.discover(ctx.topology().clone());
    s.records[id].context = Some(ctx);
    if !s.activate(id)? {
        let msg = s.last_failure.clone().unwrap_or_default();
        return Err(SchedulerError::NothingActive(msg));
    }
    for _ in 1..n_visits {
        s.visit(id)?;
    }
    Ok(s.records.swap_remove(id))
}

/// Runs the global loop on `data`.
pub fn run(data: &Dataset, settings: RunSettings) -> Result<RunResult<'_>, SchedulerError> {
    Scheduler::new(data, settings)?.run()
}
