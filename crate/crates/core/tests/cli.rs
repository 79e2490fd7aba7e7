use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--scheduler-n-iterations",
    "4",
    "--sampler-n-warmup",
    "150",
    "--sampler-n-samples",
    "20",
    "--run-predictive-draws",
    "100",
];

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcc-tree")).args(args).output().expect("spawn binary")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_then_run_on_csv_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let g = bin(&["gen", "wu", "--seed", "3", "--out", d]);
    assert!(g.status.success(), "{}", stderr(&g));
    let train = dir.path().join("wu_train.csv");
    let test = dir.path().join("wu_test.csv");
    assert!(read(&train).lines().count() > 100);

    let out = dir.path().join("out");
    let mut args = vec![
        "run",
        "--dataset",
        "wu",
        "--csv",
        train.to_str().unwrap(),
        "--test-csv",
        test.to_str().unwrap(),
        "--replicates",
        "2",
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    let r = bin(&args);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(String::from_utf8_lossy(&r.stdout).contains("test mse"));

    for (i, seed) in [(0, 4), (1, 5)] {
        let rep = out.join(format!("replicate_{i}_seed_{seed}"));
        for f in ["evidence.csv", "metrics.csv", "predictive_train.csv", "predictive_test.csv", "report.txt"] {
            let text = read(&rep.join(f));
            assert!(text.contains("# run.seed = 4"), "{f} lacks the config header");
            assert!(text.contains(&format!("# replicate_seed = {seed}")), "{f} lacks the replicate seed");
        }
    }
    let agg = read(&out.join("metrics.csv"));
    assert!(agg.lines().any(|l| l.starts_with("wu,mean,")), "{agg}");
    assert!(agg.lines().any(|l| l.starts_with("wu,std,")), "{agg}");
    assert!(out.join("report.txt").exists());
}

#[test]
fn classification_csv_with_string_labels() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("cls.csv");
    let mut text = String::from("a,b,label\n");
    for i in 0..80 {
        let a = (i % 10) as f64 / 10.0;
        let b = (i % 7) as f64 / 7.0;
        text.push_str(&format!("{a},{b},{}\n", if a < 0.5 { "neg" } else { "pos" }));
    }
    std::fs::write(&csv, text).unwrap();
    let out = dir.path().join("out");
    let mut args = vec![
        "run",
        "--dataset",
        "toy",
        "--csv",
        csv.to_str().unwrap(),
        "--target-col",
        "label",
        "--task",
        "classification",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(SMALL);
    let r = bin(&args);
    assert!(r.status.success(), "{}", stderr(&r));
    let pred = read(&out.join("replicate_0_seed_1/predictive_test.csv"));
    assert!(pred.lines().any(|l| l.starts_with("point_id,label,predicted,p_neg,p_pos")), "{pred}");
}

#[test]
fn invalid_delta_is_rejected_with_field_name() {
    let dir = tempfile::tempdir().unwrap();
    let r = bin(&["run", "--dataset", "wu", "--scheduler-delta", "1.5", "--out", dir.path().to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(stderr(&r).contains("delta"), "{}", stderr(&r));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[sampler]\nn_chainz = 3\n").unwrap();
    let r = bin(&["run", "--config", cfg.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(stderr(&r).contains("n_chainz"), "{}", stderr(&r));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let out = dir.path().join("out");
    std::fs::write(
        &cfg,
        format!("[dataset]\nname = \"wu\"\n[run]\nseed = 2\nout = \"{}\"\n", out.display()),
    )
    .unwrap();
    let mut args = vec!["run", "--config", cfg.to_str().unwrap(), "--seed", "9"];
    args.extend_from_slice(SMALL);
    let r = bin(&args);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(out.join("replicate_0_seed_9/evidence.csv").exists());
}

#[test]
fn unknown_builtin_without_csv_fails() {
    let r = bin(&["run", "--dataset", "nope"]);
    assert!(!r.status.success());
    let g = bin(&["gen", "nope"]);
    assert!(!g.status.success());
}
