use std::path::Path;
use std::process::{Command, Output};

use decorr_lab::config::{Architecture, ExperimentConfig, ExperimentKind};
use decorr_lab::datasets::DatasetName;
use decorr_lab::report::read_report;

fn decorr(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_decorr"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = decorr(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn config(dir: &Path, kind: ExperimentKind) -> String {
    let mut c = ExperimentConfig::preset(kind);
    c.dataset = DatasetName::Blobs;
    c.architecture = Architecture::Fc;
    c.seeds = vec![3];
    c.train.epochs = 1;
    c.classifier.epochs = 1;
    c.dverge.epochs = 1;
    c.dverge.inner_steps = 2;
    c.subsets.attack = Some(200);
    c.attacks.pgd_steps = 2;
    c.attacks.epsilons = vec![0.1];
    c.unshared = vec![2];
    c.target_distances = vec![1500.0];
    let path = dir.join(format!("{}.json", kind.as_str()));
    std::fs::write(&path, c.to_json()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn pair_commands_chain_through_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = config(d, ExperimentKind::PairDecorrelated);
    let stdout = ok(d, &["--config", &cfg, "--out", "pair", "train-pair"]);
    assert!(stdout.contains("m1 accuracy"), "{stdout}");
    assert!(d.join("pair/m2.dnac").is_file());

    ok(d, &["--config", &cfg, "--out", "tr", "eval-transfer", "pair/m1.dnac", "pair/m2.dnac", "--method", "fgsm", "--norm", "linf"]);
    let rows = read_report(&d.join("tr/results.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].metric, "transfer_rate");
    let transfers = std::fs::read_to_string(d.join("tr/transfers.csv")).unwrap();
    assert_eq!(transfers.lines().count(), 2);

    ok(d, &["--config", &cfg, "--out", "corr", "analyze-corr", "pair/m1.dnac", "pair/m2.dnac"]);
    let pca = std::fs::read_to_string(d.join("corr/pca.csv")).unwrap();
    assert_eq!(pca.lines().count(), 1 + 200);
    // same numbers again from the exported feature matrices
    let again = ok(d, &["--out", "corr2", "analyze-corr", "corr/features/a.fmat", "corr/features/b.fmat"]);
    assert!(again.contains("r_squared"));
    let a = read_report(&d.join("corr/results.csv")).unwrap();
    let b = read_report(&d.join("corr2/results.csv")).unwrap();
    let pick = |rows: &[decorr_lab::report::ReportRow], m: &str| rows.iter().find(|r| r.metric == m).unwrap().value;
    assert_eq!(pick(&a, "r_squared_all"), pick(&b, "r_squared_all"));

    ok(d, &["--config", &cfg, "--out", "dv", "dverge", "pair/m1.dnac", "pair/m2.dnac"]);
    assert!(d.join("dv/m1.dnac").is_file());

    let stdout = ok(d, &["--out", "sum", "report", "pair/results.csv", "corr/results.csv"]);
    assert!(stdout.contains("accuracy_m1"));
    let sum = std::fs::read_to_string(d.join("sum/summary.csv")).unwrap();
    assert!(sum.starts_with("experiment,epsilon,norm,method,metric,mean,std,n,n_undefined\n"));
}

#[test]
fn autoencoder_commands_and_attack() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = config(d, ExperimentKind::Dna);
    ok(d, &["--config", &cfg, "--out", "m", "train-dna"]);
    ok(d, &["--config", &cfg, "--out", "m", "train-dna", "--autoencoder"]);
    ok(d, &["--config", &cfg, "--out", "dc", "train-classifier", "--source", "m/dna.dnac"]);
    ok(d, &["--config", &cfg, "--out", "ac", "train-classifier", "--source", "m/autoencoder.dnac"]);
    let stdout = ok(d, &["--config", &cfg, "--out", "atk", "attack", "m/dna.dnac", "--classifier", "dc/classifier.dnac"]);
    assert!(stdout.contains("either_path_accuracy"), "{stdout}");
    let rows = read_report(&d.join("atk/results.csv")).unwrap();
    // natural and one pgd cell, each with either-path and average accuracy
    assert_eq!(rows.len(), 4);
    ok(d, &["--config", &cfg, "--out", "atk2", "attack", "m/autoencoder.dnac", "--classifier", "ac/classifier.dnac", "--epsilon", "0.05"]);
    let rows = read_report(&d.join("atk2/results.csv")).unwrap();
    assert!(rows.iter().all(|r| r.metric == "accuracy"));
    assert!(rows.iter().any(|r| r.epsilon == 0.05));

    let out = decorr(d, &["--config", &cfg, "attack", "m/dna.dnac"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--classifier"));
}

#[test]
fn run_writes_a_manifest_and_bad_input_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = config(d, ExperimentKind::PairDistance);
    ok(d, &["--config", &cfg, "--out", "run", "--threads", "2", "run"]);
    assert!(d.join("run/manifest.json").is_file());
    let rows = read_report(&d.join("run/results.csv")).unwrap();
    assert!(rows.iter().any(|r| r.metric == "param_distance"));

    let out = decorr(d, &["run"]);
    assert!(!out.status.success());
    std::fs::write(d.join("bad.json"), "{\"kind\": 3}").unwrap();
    let out = decorr(d, &["--config", "bad.json", "run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}
