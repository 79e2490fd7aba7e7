//! Run configuration with flat dotted keys.
//!
//! Values are resolved in three layers: per-dataset defaults, then a TOML
//! config file, then command-line overrides. Every key has exactly one
//! canonical name; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::data::TaskKind;
use crate::model::ModelHyperparams;
use crate::sampler::SamplerConfig;
use crate::scheduler::{RunSettings, SchedulerConfig};
use crate::tree::StructureHyperparams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("config file: {0}")]
    Parse(String),
    #[error("invalid {key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

/// Split sharpness schedule `(h_init, h_final)` per named dataset.
pub fn dataset_h_defaults(name: &str) -> Option<(f64, f64)> {
    Some(match name {
        "wu" => (0.5, 0.025),
        "cgm" => (0.01, 0.001),
        "bcw" => (0.1, 0.025),
        "iris" => (0.01, 0.01),
        "raisin" => (0.05, 0.001),
        "wine" => (0.025, 0.025),
        _ => return None,
    })
}

/// Builtin generators.
pub const BUILTIN_DATASETS: [&str; 2] = ["wu", "cgm"];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub name: String,
    pub csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub target_col: String,
    pub task: TaskKind,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub seed: u64,
    pub replicates: usize,
    pub out: PathBuf,
    pub predictive_draws: usize,
    pub h_init: f64,
    pub h_final: f64,
    pub sampler: SamplerConfig,
    pub scheduler: SchedulerConfig,
    pub structure: StructureHyperparams,
    pub dirichlet_alpha: f64,
    /// `None` centres the leaf-mean prior on the training targets.
    pub mu_prior_mean: Option<f64>,
    pub mu_prior_var: Option<f64>,
    pub sigma_prior_shape: f64,
    pub sigma_prior_scale: f64,
    pub class_alpha: f64,
}

/// Canonical keys in output order.
pub const KEYS: &[&str] = &[
    "dataset.name",
    "dataset.csv",
    "dataset.test_csv",
    "dataset.target_col",
    "dataset.task",
    "dataset.test_fraction",
    "run.seed",
    "run.replicates",
    "run.out",
    "run.predictive_draws",
    "h.init",
    "h.final",
    "sampler.n_chains",
    "sampler.n_warmup",
    "sampler.n_samples",
    "sampler.target_accept",
    "sampler.max_tree_depth",
    "sampler.anneal_fraction",
    "scheduler.n_iterations",
    "scheduler.n_initial",
    "scheduler.activation_threshold",
    "scheduler.max_active",
    "scheduler.delta",
    "scheduler.beta",
    "scheduler.kappa",
    "scheduler.lookahead",
    "scheduler.n_pseudo",
    "scheduler.phi_mode",
    "scheduler.max_depth",
    "scheduler.move_stay",
    "scheduler.move_grow",
    "scheduler.move_prune",
    "structure.alpha_split",
    "structure.beta_split",
    "model.dirichlet_alpha",
    "model.mu_prior_mean",
    "model.mu_prior_var",
    "model.sigma_prior_shape",
    "model.sigma_prior_scale",
    "model.class_alpha",
];

impl RunConfig {
    /// Defaults for a named dataset, with its split-sharpness schedule when
    /// one is known.
    pub fn defaults_for(name: &str) -> Self {
        let model = ModelHyperparams::default();
        let (h_init, h_final) = dataset_h_defaults(name).unwrap_or((0.1, 0.025));
        let task = match name {
            "wu" | "cgm" => TaskKind::Regression,
            "bcw" | "iris" | "raisin" | "wine" => TaskKind::Classification,
            _ => TaskKind::Regression,
        };
        Self {
            dataset: DatasetConfig {
                name: name.to_string(),
                csv: None,
                test_csv: None,
                target_col: "y".into(),
                task,
                test_fraction: 0.3,
            },
            seed: 1,
            replicates: 1,
            out: PathBuf::from("dcc_out"),
            predictive_draws: 1000,
            h_init,
            h_final,
            sampler: SamplerConfig::default(),
            scheduler: SchedulerConfig::default(),
            structure: StructureHyperparams::default(),
            dirichlet_alpha: model.dirichlet_alpha,
            mu_prior_mean: None,
            mu_prior_var: None,
            sigma_prior_shape: model.sigma_prior.0,
            sigma_prior_scale: model.sigma_prior.1,
            class_alpha: model.class_alpha,
        }
    }

    /// Resolves `overrides` (file entries first, then command-line ones) on
    /// top of the defaults of whichever dataset they name.
    pub fn resolve(overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let name = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "dataset.name")
            .map_or("wu", |(_, v)| v.as_str());
        let mut cfg = Self::defaults_for(name);
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.trim().parse::<T>().map_err(|e| ConfigError::Value {
                key: key.to_string(),
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        let optional = |v: &str| -> Result<Option<f64>, ConfigError> {
            if v.trim().is_empty() || v.trim() == "auto" {
                Ok(None)
            } else {
                parse(key, v).map(Some)
            }
        };
        let path = |v: &str| if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match key {
            "dataset.name" => self.dataset.name = value.to_string(),
            "dataset.csv" => self.dataset.csv = path(value),
            "dataset.test_csv" => self.dataset.test_csv = path(value),
            "dataset.target_col" => self.dataset.target_col = value.to_string(),
            "dataset.task" => self.dataset.task = parse(key, value)?,
            "dataset.test_fraction" => self.dataset.test_fraction = parse(key, value)?,
            "run.seed" => self.seed = parse(key, value)?,
            "run.replicates" => self.replicates = parse(key, value)?,
            "run.out" => self.out = PathBuf::from(value),
            "run.predictive_draws" => self.predictive_draws = parse(key, value)?,
            "h.init" => self.h_init = parse(key, value)?,
            "h.final" => self.h_final = parse(key, value)?,
            "sampler.n_chains" => self.sampler.n_chains = parse(key, value)?,
            "sampler.n_warmup" => self.sampler.n_warmup = parse(key, value)?,
            "sampler.n_samples" => self.sampler.n_samples = parse(key, value)?,
            "sampler.target_accept" => self.sampler.target_accept = parse(key, value)?,
            "sampler.max_tree_depth" => self.sampler.max_tree_depth = parse(key, value)?,
            "sampler.anneal_fraction" => self.sampler.anneal_fraction = parse(key, value)?,
            "scheduler.n_iterations" => self.scheduler.n_iterations = parse(key, value)?,
            "scheduler.n_initial" => self.scheduler.n_initial = parse(key, value)?,
            "scheduler.activation_threshold" => self.scheduler.activation_threshold = parse(key, value)?,
            "scheduler.max_active" => self.scheduler.max_active = parse(key, value)?,
            "scheduler.delta" => self.scheduler.delta = parse(key, value)?,
            "scheduler.beta" => self.scheduler.beta = parse(key, value)?,
            "scheduler.kappa" => self.scheduler.kappa = parse(key, value)?,
            "scheduler.lookahead" => self.scheduler.lookahead = parse(key, value)?,
            "scheduler.n_pseudo" => self.scheduler.n_pseudo = parse(key, value)?,
            "scheduler.phi_mode" => self.scheduler.phi_mode = parse(key, value)?,
            "scheduler.max_depth" => self.scheduler.max_depth = parse(key, value)?,
            "scheduler.move_stay" => self.scheduler.move_probs.stay = parse(key, value)?,
            "scheduler.move_grow" => self.scheduler.move_probs.grow = parse(key, value)?,
            "scheduler.move_prune" => self.scheduler.move_probs.prune = parse(key, value)?,
            "structure.alpha_split" => self.structure.alpha_split = parse(key, value)?,
            "structure.beta_split" => self.structure.beta_split = parse(key, value)?,
            "model.dirichlet_alpha" => self.dirichlet_alpha = parse(key, value)?,
            "model.mu_prior_mean" => self.mu_prior_mean = optional(value)?,
            "model.mu_prior_var" => self.mu_prior_var = optional(value)?,
            "model.sigma_prior_shape" => self.sigma_prior_shape = parse(key, value)?,
            "model.sigma_prior_scale" => self.sigma_prior_scale = parse(key, value)?,
            "model.class_alpha" => self.class_alpha = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Textual value of one key, in the form `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let opt = |v: Option<f64>| v.map_or_else(|| "auto".to_string(), |x| x.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map_or_else(String::new, |p| p.display().to_string());
        Some(match key {
            "dataset.name" => self.dataset.name.clone(),
            "dataset.csv" => path(&self.dataset.csv),
            "dataset.test_csv" => path(&self.dataset.test_csv),
            "dataset.target_col" => self.dataset.target_col.clone(),
            "dataset.task" => self.dataset.task.to_string(),
            "dataset.test_fraction" => self.dataset.test_fraction.to_string(),
            "run.seed" => self.seed.to_string(),
            "run.replicates" => self.replicates.to_string(),
            "run.out" => self.out.display().to_string(),
            "run.predictive_draws" => self.predictive_draws.to_string(),
            "h.init" => self.h_init.to_string(),
            "h.final" => self.h_final.to_string(),
            "sampler.n_chains" => self.sampler.n_chains.to_string(),
            "sampler.n_warmup" => self.sampler.n_warmup.to_string(),
            "sampler.n_samples" => self.sampler.n_samples.to_string(),
            "sampler.target_accept" => self.sampler.target_accept.to_string(),
            "sampler.max_tree_depth" => self.sampler.max_tree_depth.to_string(),
            "sampler.anneal_fraction" => self.sampler.anneal_fraction.to_string(),
            "scheduler.n_iterations" => self.scheduler.n_iterations.to_string(),
            "scheduler.n_initial" => self.scheduler.n_initial.to_string(),
            "scheduler.activation_threshold" => self.scheduler.activation_threshold.to_string(),
            "scheduler.max_active" => self.scheduler.max_active.to_string(),
            "scheduler.delta" => self.scheduler.delta.to_string(),
            "scheduler.beta" => self.scheduler.beta.to_string(),
            "scheduler.kappa" => self.scheduler.kappa.to_string(),
            "scheduler.lookahead" => self.scheduler.lookahead.to_string(),
            "scheduler.n_pseudo" => self.scheduler.n_pseudo.to_string(),
            "scheduler.phi_mode" => self.scheduler.phi_mode.to_string(),
            "scheduler.max_depth" => self.scheduler.max_depth.to_string(),
            "scheduler.move_stay" => self.scheduler.move_probs.stay.to_string(),
            "scheduler.move_grow" => self.scheduler.move_probs.grow.to_string(),
            "scheduler.move_prune" => self.scheduler.move_probs.prune.to_string(),
            "structure.alpha_split" => self.structure.alpha_split.to_string(),
            "structure.beta_split" => self.structure.beta_split.to_string(),
            "model.dirichlet_alpha" => self.dirichlet_alpha.to_string(),
            "model.mu_prior_mean" => opt(self.mu_prior_mean),
            "model.mu_prior_var" => opt(self.mu_prior_var),
            "model.sigma_prior_shape" => self.sigma_prior_shape.to_string(),
            "model.sigma_prior_scale" => self.sigma_prior_scale.to_string(),
            "model.class_alpha" => self.class_alpha.to_string(),
            _ => return None,
        })
    }

    /// `prefix key = value` lines for every key.
    pub fn render(&self, prefix: &str) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{prefix}{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key, reason: String| Err(ConfigError::Invalid { key, reason });
        let d = &self.dataset;
        if d.csv.is_none() && !BUILTIN_DATASETS.contains(&d.name.as_str()) {
            return invalid(
                "dataset.name",
                format!("{:?} is not a builtin generator (wu, cgm); pass dataset.csv for external data", d.name),
            );
        }
        if d.csv.is_some() && d.test_csv.is_none() && !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return invalid("dataset.test_fraction", format!("{} is outside (0, 1)", d.test_fraction));
        }
        if self.replicates == 0 {
            return invalid("run.replicates", "must be at least 1".into());
        }
        if self.predictive_draws == 0 {
            return invalid("run.predictive_draws", "must be at least 1".into());
        }
        let m = self.scheduler.move_probs;
        let total = m.stay + m.grow + m.prune;
        if [m.stay, m.grow, m.prune].iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return invalid("scheduler.move_stay", format!("move probabilities must be non-negative and sum to 1 (got {total})"));
        }
        if let Some(v) = self.mu_prior_var {
            if !(v > 0.0 && v.is_finite()) {
                return invalid("model.mu_prior_var", format!("{v} is not positive"));
            }
        }
        let probe = self.settings(0.0, 1.0, self.seed);
        probe.validate().map_err(|e| ConfigError::Invalid {
            key: "settings",
            reason: e.to_string(),
        })
    }

    /// Run settings for one replicate; `target_mean`/`target_var` centre the
    /// leaf-mean prior unless it is set explicitly.
    pub fn settings(&self, target_mean: f64, target_var: f64, seed: u64) -> RunSettings {
        let mut model = ModelHyperparams::for_targets(target_mean, target_var);
        if let Some(m) = self.mu_prior_mean {
            model.mu_prior.0 = m;
        }
        if let Some(v) = self.mu_prior_var {
            model.mu_prior.1 = v;
        }
        model.dirichlet_alpha = self.dirichlet_alpha;
        model.sigma_prior = (self.sigma_prior_shape, self.sigma_prior_scale);
        model.class_alpha = self.class_alpha;
        RunSettings {
            scheduler: self.scheduler.clone(),
            sampler: self.sampler.clone(),
            model,
            structure: self.structure,
            h_init: self.h_init,
            h_final: self.h_final,
            seed,
        }
    }
}

/// Flattens a TOML document into `(dotted key, value)` pairs. Both nested
/// tables and quoted dotted keys are accepted.
pub fn parse_toml(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let mut out = Vec::new();
    flatten("", &table, &mut out)?;
    Ok(out)
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) -> Result<(), ConfigError> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let text = match v {
            toml::Value::Table(t) => {
                flatten(&key, t, out)?;
                continue;
            }
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => {
                return Err(ConfigError::Value {
                    key,
                    value: other.to_string(),
                    reason: "expected a scalar".into(),
                })
            }
        };
        if !KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey(key));
        }
        out.push((key, text));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_defaults() {
        let c = RunConfig::defaults_for("cgm");
        assert_eq!((c.h_init, c.h_final), (0.01, 0.001));
        let c = RunConfig::defaults_for("raisin");
        assert_eq!((c.h_init, c.h_final), (0.05, 0.001));
        assert_eq!(c.dataset.task, TaskKind::Classification);
    }

    #[test]
    fn precedence_file_then_cli() {
        let file = parse_toml("[dataset]\nname = \"cgm\"\n[sampler]\nn_warmup = 50\n").unwrap();
        let mut all = file.clone();
        all.push(("sampler.n_warmup".into(), "70".into()));
        let c = RunConfig::resolve(&all).unwrap();
        assert_eq!(c.sampler.n_warmup, 70);
        assert_eq!(c.h_init, 0.01);
        assert!(matches!(
            parse_toml("[sampler]\n\"h.final\" = 0.002\n"),
            Err(ConfigError::UnknownKey(k)) if k == "sampler.h.final"
        ));
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(parse_toml("[sampler]\nbogus = 1\n"), Err(ConfigError::UnknownKey(k)) if k == "sampler.bogus"));
        let mut c = RunConfig::defaults_for("wu");
        assert!(matches!(c.set("nope", "1"), Err(ConfigError::UnknownKey(_))));
    }

    #[test]
    fn flat_dotted_keys() {
        let kv = parse_toml("\"scheduler.delta\" = 0.25\n\"h.init\" = 0.3\n").unwrap();
        let c = RunConfig::resolve(&kv).unwrap();
        assert_eq!(c.scheduler.delta, 0.25);
        assert_eq!(c.h_init, 0.3);
    }

    #[test]
    fn invalid_delta_names_field() {
        let err = RunConfig::resolve(&[("scheduler.delta".into(), "1.5".into())]).unwrap_err();
        assert!(err.to_string().contains("delta"), "{err}");
    }

    #[test]
    fn render_roundtrips() {
        let mut c = RunConfig::defaults_for("wu");
        c.set("scheduler.phi_mode", "basic").unwrap();
        c.set("model.mu_prior_mean", "2.5").unwrap();
        let kv: Vec<(String, String)> = c
            .render("")
            .lines()
            .map(|l| {
                let (k, v) = l.split_once(" = ").unwrap();
                (k.to_string(), v.to_string())
            })
            .collect();
        assert_eq!(kv.len(), KEYS.len());
        let back = RunConfig::resolve(&kv).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_dataset_without_csv() {
        let err = RunConfig::resolve(&[("dataset.name".into(), "bcw".into())]).unwrap_err();
        assert!(err.to_string().contains("dataset.name"));
    }
}
