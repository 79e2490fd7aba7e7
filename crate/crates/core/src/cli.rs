//! Batch runs: data loading, the global loop, prediction and the output
//! files of each replicate.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};

use crate::config::RunConfig;
use crate::data::{self, CsvSchema, Dataset};
use crate::predict::{PointPrediction, PosteriorEnsemble, Predictions};
use crate::rng::substream;
use crate::scheduler::{self, RunResult, Status};

/// Metrics of one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateMetrics {
    pub seed: u64,
    pub metric: &'static str,
    pub train: f64,
    pub train_mc_error: f64,
    pub test: f64,
    pub test_mc_error: f64,
    pub n_active_trees: usize,
    /// Posterior tree mass per leaf count, `(n_leaves, mass)`.
    pub leaf_mass: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub replicates: Vec<ReplicateMetrics>,
    pub out: PathBuf,
}

impl RunSummary {
    pub fn mean_std(&self, f: impl Fn(&ReplicateMetrics) -> f64) -> (f64, f64) {
        let v: Vec<f64> = self.replicates.iter().map(f).collect();
        mean_std(&v)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Train/test data for one replicate seed.
pub fn load_data(cfg: &RunConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    match &d.csv {
        None => data::generate_builtin(&d.name, seed).with_context(|| format!("generating dataset {}", d.name)),
        Some(path) => {
            let schema = CsvSchema {
                target_col: d.target_col.clone(),
                task: d.task,
            };
            match &d.test_csv {
                Some(test_path) => {
                    let train = data::load_csv(path, &schema).with_context(|| format!("loading {}", path.display()))?;
                    let test = data::load_csv_like(test_path, &schema, &train)
                        .with_context(|| format!("loading {}", test_path.display()))?;
                    Ok((train, test))
                }
                None => {
                    let all = data::load_csv(path, &schema).with_context(|| format!("loading {}", path.display()))?;
                    data::split(&all, d.test_fraction, seed).context("splitting dataset")
                }
            }
        }
    }
}

/// Runs one replicate and writes its files into `dir`.
pub fn run_replicate(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<ReplicateMetrics> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (train, test) = load_data(cfg, seed)?;
    let (mean, var) = if train.task().is_regression() {
        (train.target_mean(), train.target_variance())
    } else {
        (0.0, 1.0)
    };
    let settings = cfg.settings(mean, var, seed);
    let started = Instant::now();
    let run = scheduler::run(&train, settings).context("stage scheduler")?;
    let sched_time = started.elapsed();
    let ensemble = PosteriorEnsemble::from_run(&run).context("stage predict: building ensemble")?;
    let mut rng = substream(seed, "predict", 0, 0);
    let draws = ensemble.draw(cfg.predictive_draws, &mut rng).context("stage predict: drawing")?;
    let train_pred = draws.predict(&train, 10).context("stage predict: train")?;
    let test_pred = draws.predict(&test, 10).context("stage predict: test")?;
    let train_m = train_pred.metric(&train)?;
    let test_m = test_pred.metric(&test)?;
    let metric = if train.task().is_regression() { "mse" } else { "accuracy" };
    let weights = run.tree_weights();
    let mut leaf_mass: Vec<(usize, f64)> = Vec::new();
    for &(id, w) in &weights {
        let nl = run.records[id].topology.n_leaves();
        match leaf_mass.iter_mut().find(|(k, _)| *k == nl) {
            Some(e) => e.1 += w,
            None => leaf_mass.push((nl, w)),
        }
    }
    leaf_mass.sort_by_key(|e| e.0);
    let metrics = ReplicateMetrics {
        seed,
        metric,
        train: train_m.value,
        train_mc_error: train_m.mc_error,
        test: test_m.value,
        test_mc_error: test_m.mc_error,
        n_active_trees: weights.len(),
        leaf_mass,
    };
    let header = header(cfg, seed);
    write_file(&dir.join("evidence.csv"), &format!("{header}{}", evidence_table(&run)))?;
    write_file(&dir.join("metrics.csv"), &format!("{header}{}", metrics_table(&cfg.dataset.name, std::slice::from_ref(&metrics))))?;
    write_file(&dir.join("predictive_train.csv"), &format!("{header}{}", predictive_table(&train, &train_pred)))?;
    write_file(&dir.join("predictive_test.csv"), &format!("{header}{}", predictive_table(&test, &test_pred)))?;
    let report = report(cfg, seed, &run, &metrics, &train, &test, sched_time.as_secs_f64(), started.elapsed().as_secs_f64());
    write_file(&dir.join("report.txt"), &report)?;
    Ok(metrics)
}

/// Runs every replicate (seeds `seed, seed+1, ...`) and writes the
/// aggregate files.
pub fn run_command(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let mut reps = Vec::new();
    for r in 0..cfg.replicates {
        let seed = cfg.seed + r as u64;
        let dir = cfg.out.join(format!("replicate_{r}_seed_{seed}"));
        let m = run_replicate(cfg, seed, &dir).with_context(|| format!("replicate {r} (seed {seed})"))?;
        reps.push(m);
    }
    let summary = RunSummary {
        replicates: reps,
        out: cfg.out.clone(),
    };
    let head = header(cfg, cfg.seed);
    let mut agg = metrics_table(&cfg.dataset.name, &summary.replicates);
    let (tm, ts) = summary.mean_std(|m| m.train);
    let (em, es) = summary.mean_std(|m| m.test);
    let (am, as_) = summary.mean_std(|m| m.n_active_trees as f64);
    let metric = summary.replicates[0].metric;
    let _ = writeln!(agg, "{},mean,{metric},{tm},,{em},,{am}", cfg.dataset.name);
    let _ = writeln!(agg, "{},std,{metric},{ts},,{es},,{as_}", cfg.dataset.name);
    write_file(&cfg.out.join("metrics.csv"), &format!("{head}{agg}"))?;
    let mut rep = format!("{}aggregate over {} replicate(s)\n", cfg.render("# "), summary.replicates.len());
    let _ = writeln!(rep, "train {metric}: {tm:.6} +/- {ts:.6}");
    let _ = writeln!(rep, "test {metric}: {em:.6} +/- {es:.6}");
    let _ = writeln!(rep, "active trees: {am:.2} +/- {as_:.2}");
    write_file(&cfg.out.join("report.txt"), &rep)?;
    Ok(summary)
}

/// Writes the builtin generator's train/test CSVs.
pub fn gen_command(name: &str, seed: u64, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let (train, test) = data::generate_builtin(name, seed)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let a = out.join(format!("{name}_train.csv"));
    let b = out.join(format!("{name}_test.csv"));
    data::write_csv(&train, &a)?;
    data::write_csv(&test, &b)?;
    Ok((a, b))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn header(cfg: &RunConfig, seed: u64) -> String {
    format!("{}# replicate_seed = {seed}\n", cfg.render("# "))
}

pub fn evidence_table(run: &RunResult) -> String {
    let weights = run.tree_weights();
    let mut s = String::from("tree_key,n_leaves,status,proposals,visits,n_pseudo_samples,log_z,log_sigma2,tree_weight\n");
    for r in run.records.iter().filter(|r| r.status != Status::Discovered) {
        let w = weights.iter().find(|(id, _)| *id == r.id).map_or(0.0, |e| e.1);
        let _ = writeln!(
            s,
            "\"{}\",{},{},{},{},{},{},{},{}",
            r.key,
            r.topology.n_leaves(),
            r.status,
            r.proposals,
            r.visits,
            r.evidence.total_pseudo_samples,
            r.evidence.log_z,
            r.log_sigma2(),
            w
        );
    }
    s
}

pub fn metrics_table(dataset: &str, reps: &[ReplicateMetrics]) -> String {
    let mut s = String::from("dataset,seed,metric,train_metric,train_mc_error,test_metric,test_mc_error,n_active_trees\n");
    for m in reps {
        let _ = writeln!(
            s,
            "{dataset},{},{},{},{},{},{},{}",
            m.seed, m.metric, m.train, m.train_mc_error, m.test, m.test_mc_error, m.n_active_trees
        );
    }
    s
}

pub fn predictive_table(data: &Dataset, pred: &Predictions) -> String {
    let mut s = String::new();
    match pred.points.first() {
        Some(PointPrediction::Classification { probs }) => {
            s.push_str("point_id,label,predicted");
            for c in 0..probs.len() {
                let name = data.class_labels.get(c).cloned().unwrap_or_else(|| c.to_string());
                let _ = write!(s, ",p_{name}");
            }
            s.push('\n');
        }
        _ => s.push_str("point_id,y,mean,variance\n"),
    }
    for (i, p) in pred.points.iter().enumerate() {
        match p {
            PointPrediction::Regression { mean, variance } => {
                let _ = writeln!(s, "{i},{},{mean},{variance}", data.y()[i]);
            }
            PointPrediction::Classification { probs } => {
                let label = |c: usize| data.class_labels.get(c).cloned().unwrap_or_else(|| c.to_string());
                let _ = write!(s, "{i},{},{}", label(data.class_of(i)), label(p.point_estimate() as usize));
                for q in probs {
                    let _ = write!(s, ",{q}");
                }
                s.push('\n');
            }
        }
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn report(
    cfg: &RunConfig,
    seed: u64,
    run: &RunResult,
    m: &ReplicateMetrics,
    train: &Dataset,
    test: &Dataset,
    sched_secs: f64,
    total_secs: f64,
) -> String {
    let mut s = header(cfg, seed);
    let _ = writeln!(s, "\ndata: {} train rows, {} test rows, {} features, task {:?}", train.len(), test.len(), train.n_features(), train.task());
    let _ = writeln!(s, "wall time: scheduler {sched_secs:.1}s, total {total_secs:.1}s");
    let _ = writeln!(s, "\n{} train {:.6} (mc {:.2e}), test {:.6} (mc {:.2e}), active trees {}", m.metric, m.train, m.train_mc_error, m.test, m.test_mc_error, m.n_active_trees);
    let _ = writeln!(s, "tree mass by leaf count:");
    for (nl, w) in &m.leaf_mass {
        let _ = writeln!(s, "  {nl} leaves: {w:.6}");
    }
    let _ = writeln!(s, "\ntrees:");
    let weights = run.tree_weights();
    for r in run.records.iter().filter(|r| r.status != Status::Discovered) {
        let w = weights.iter().find(|(id, _)| *id == r.id).map_or(0.0, |e| e.1);
        let wd = r.warmup_diagnostics();
        let sd = r.sampling_diagnostics();
        let eps: Vec<String> = r.chains.iter().map(|c| format!("{:.3e}", c.step_size)).collect();
        let _ = writeln!(
            s,
            "  [{}] {} C={} S={} logZ={:.4} log_sigma2={:.4} weight={:.4e} warmup={} warmup_div={} div={} accept={:.3} leapfrog/transition={:.1} depth_hits={} step=[{}]",
            r.key,
            r.status,
            r.proposals,
            r.visits,
            r.evidence.log_z,
            r.log_sigma2(),
            w,
            r.warmup_used,
            wd.divergences,
            sd.divergences,
            sd.mean_accept(),
            sd.n_leapfrog as f64 / sd.transitions.max(1) as f64,
            sd.max_depth_hits,
            eps.join(" ")
        );
    }
    let _ = writeln!(s, "\nevents:");
    for e in &run.events {
        let _ = writeln!(s, "  {e}");
    }
    let _ = writeln!(s, "\niterations (selected tree, utility, proposal):");
    for it in &run.iterations {
        let _ = writeln!(s, "  {:>4} [{}] U={:.6e} {} -> [{}]", it.iteration, it.selected, it.utility, it.move_kind, it.proposal);
    }
    s
}
