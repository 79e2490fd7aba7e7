use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

use dcc_tree::cli;
use dcc_tree::config::{parse_toml, RunConfig, KEYS};

/// Short spellings for the most used keys.
const ALIASES: &[(&str, &str)] = &[
    ("dataset.name", "dataset"),
    ("dataset.csv", "csv"),
    ("dataset.test_csv", "test-csv"),
    ("dataset.target_col", "target-col"),
    ("dataset.task", "task"),
    ("run.seed", "seed"),
    ("run.replicates", "replicates"),
    ("run.out", "out"),
    ("scheduler.phi_mode", "phi-mode"),
];

fn flag_name(key: &str) -> String {
    key.replace(['.', '_'], "-")
}

fn command() -> Command {
    let mut run = Command::new("run")
        .about("Run the sampler on a dataset and write report, evidence, metrics and predictive files")
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("TOML file with flat dotted keys (or tables); command-line flags override it"),
        );
    for &key in KEYS {
        let mut arg = Arg::new(key)
            .long(flag_name(key))
            .value_name("VALUE")
            .action(ArgAction::Set)
            .help(format!("sets {key}"));
        if let Some((_, alias)) = ALIASES.iter().find(|(k, _)| *k == key) {
            arg = arg.visible_alias(*alias);
        }
        run = run.arg(arg);
    }
    let gen = Command::new("gen")
        .about("Write the train/test CSVs of a builtin generator")
        .arg(Arg::new("name").required(true).help("wu or cgm"))
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_parser(clap::value_parser!(u64))
                .default_value("1"),
        )
        .arg(Arg::new("out").long("out").default_value("."));
    Command::new("dcc-tree")
        .about("Divide-conquer-combine sampling over soft Bayesian decision trees")
        .subcommand_required(true)
        .subcommand(run)
        .subcommand(gen)
}

fn run(m: &ArgMatches) -> Result<()> {
    let mut overrides = Vec::new();
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        overrides.extend(parse_toml(&text).with_context(|| format!("in {path}"))?);
    }
    for &key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            overrides.push((key.to_string(), v.clone()));
        }
    }
    let cfg = RunConfig::resolve(&overrides).context("configuration")?;
    let summary = cli::run_command(&cfg)?;
    for r in &summary.replicates {
        println!(
            "seed {}: train {} {:.6}, test {} {:.6} (mc {:.2e}), {} active trees",
            r.seed, r.metric, r.train, r.metric, r.test, r.test_mc_error, r.n_active_trees
        );
    }
    let (mean, sd) = summary.mean_std(|r| r.test);
    println!("test {}: {mean:.6} +/- {sd:.6}; outputs in {}", summary.replicates[0].metric, summary.out.display());
    Ok(())
}

fn main() -> Result<()> {
    let matches = command().get_matches();
    match matches.subcommand() {
        Some(("run", m)) => run(m),
        Some(("gen", m)) => {
            let name = m.get_one::<String>("name").expect("required");
            let seed = *m.get_one::<u64>("seed").expect("default");
            let out = PathBuf::from(m.get_one::<String>("out").expect("default"));
            let (a, b) = cli::gen_command(name, seed, &out)?;
            println!("wrote {} and {}", a.display(), b.display());
            Ok(())
        }
        _ => unreachable!("subcommand required"),
    }
}
