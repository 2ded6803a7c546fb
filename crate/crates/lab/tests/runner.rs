use std::path::Path;

use decorr_core::attacks::{Method, Norm};
use decorr_lab::config::{ExperimentConfig, ExperimentKind};
use decorr_lab::datasets::DatasetName;
use decorr_lab::experiment::{load_config, run_experiment, sha256_hex, Manifest};
use decorr_lab::pnm::read_pnm;
use decorr_lab::report::{read_report, HEADER};

fn tiny(kind: ExperimentKind, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(kind);
    c.dataset = DatasetName::Blobs;
    c.seeds = vec![5];
    c.train.epochs = 1;
    c.classifier.epochs = 1;
    c.dverge.epochs = 1;
    c.dverge.inner_steps = 2;
    c.subsets.train = Some(1000);
    c.subsets.test = Some(500);
    c.attacks.pgd_steps = 3;
    c.unshared = vec![2];
    c.target_distances = vec![1000.0, 2000.0];
    c.architecture = decorr_lab::config::Architecture::Fc;
    c.out = out.to_path_buf();
    c
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn pair_grid_rows_match_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(ExperimentKind::PairDecorrelated, dir.path());
    c.attacks.methods = vec![Method::Fgsm, Method::Pgd];
    c.attacks.norms = vec![Norm::Linf, Norm::L2];
    c.attacks.epsilons = vec![0.0, 0.1];
    let run = run_experiment(&c, 2).unwrap();
    let rows = read_report(&dir.path().join("results.csv")).unwrap();
    assert_eq!(rows, run.rows);
    let transfer = rows.iter().filter(|r| r.metric == "transfer_rate").count();
    // two pair types × methods × norms × epsilons × seeds
    assert_eq!(transfer, 2 * 2 * 2 * 2 * c.seeds.len());
    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), HEADER.join(","));
    for f in ["config.json", "train_log.csv", "transfers.csv", "checkpoints/fc-baseline-s5-m1.dnac"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 2);
}

#[test]
fn outputs_do_not_depend_on_threads_and_manifest_reproduces() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut c = tiny(ExperimentKind::PairDecorrelated, a.path());
    c.attacks.methods = vec![Method::Pgd];
    c.attacks.norms = vec![Norm::Linf];
    c.attacks.epsilons = vec![0.1];
    run_experiment(&c, 1).unwrap();
    let m = manifest(a.path());
    assert!(m.complete);
    assert_eq!(m.seeds, vec![5]);
    // every recorded checksum matches the file on disk
    for s in &m.stages {
        assert!(s.error.is_none());
        for (rel, sum) in &s.outputs {
            assert_eq!(&sha256_hex(&std::fs::read(a.path().join(rel)).unwrap()), sum, "{rel}");
        }
    }
    let mut again = load_config(&a.path().join("manifest.json")).unwrap();
    assert_eq!(again, c);
    again.out = b.path().to_path_buf();
    run_experiment(&again, 3).unwrap();
    for f in ["results.csv", "train_log.csv", "transfers.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn dna_run_writes_grids_and_zero_epsilon_is_natural() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(ExperimentKind::Dna, dir.path());
    c.attacks.epsilons = vec![0.0, 0.15];
    let run = run_experiment(&c, 2).unwrap();
    for exp in ["dna-u2", "ae"] {
        let metric = if exp == "ae" { "accuracy" } else { "either_path_accuracy" };
        let pick = |eps: f64, method: &str| {
            run.rows
                .iter()
                .find(|r| r.experiment == exp && r.metric == metric && r.epsilon == eps && r.method == method)
                .unwrap()
                .value
        };
        assert_eq!(pick(0.0, "pgd"), pick(0.0, "none"), "{exp}");
    }
    assert!(dir.path().join("checkpoints/dna-u2-s5-autoencoder.dnac").is_file());
    assert!(dir.path().join("features/dna-u2-s5-a.fmat").is_file());
    let grids: Vec<_> = std::fs::read_dir(dir.path().join("grids"))
        .map(|d| d.map(|e| e.unwrap().path()).collect())
        .unwrap_or_default();
    for g in &grids {
        let p = read_pnm(g).unwrap();
        assert_eq!(p.channels, 1);
        // four rows of 28 pixels with 2-pixel gaps
        assert_eq!(p.height, 4 * 28 + 3 * 2);
        assert!(p.width <= 5 * 28 + 4 * 2);
    }
}

#[test]
fn distance_and_dverge_and_corr_kinds_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(ExperimentKind::PairDistance, dir.path().join("d").as_path());
    c.attacks.epsilons = vec![0.1];
    let run = run_experiment(&c, 2).unwrap();
    assert_eq!(run.rows.iter().filter(|r| r.metric == "param_distance").count(), 2);
    assert_eq!(run.rows.iter().filter(|r| r.metric == "pearson_distance_transfer").count(), 1);

    let mut c = tiny(ExperimentKind::Dverge, dir.path().join("v").as_path());
    c.attacks.epsilons = vec![0.1];
    let run = run_experiment(&c, 2).unwrap();
    assert!(run.rows.iter().any(|r| r.experiment == "dverge-fc-decorrelated" && r.metric == "accuracy_m1_after"));

    let mut c = tiny(ExperimentKind::CorrAnalysis, dir.path().join("c").as_path());
    c.attacks.epsilons = vec![0.1];
    let run = run_experiment(&c, 1).unwrap();
    let pca = std::fs::read_to_string(dir.path().join("c/pca/fc-baseline-s5.csv")).unwrap();
    assert_eq!(pca.lines().count(), 1 + 500);
    assert!(run.rows.iter().any(|r| r.metric == "pca_r_squared"));
    let f = decorr_lab::fmat::load(&dir.path().join("c/features/fc-decorrelated-s5-m2.fmat")).unwrap();
    assert_eq!(f.shape(), &[500, 128]);
}

#[test]
fn failing_stage_is_named_and_leaves_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(ExperimentKind::PairDecorrelated, dir.path());
    // batch larger than the training subset cannot form a single batch
    c.train.batch_size = 5000;
    let err = run_experiment(&c, 1).unwrap_err();
    assert!(err.to_string().contains("stage train"), "{err}");
    let m = manifest(dir.path());
    assert!(!m.complete);
    assert!(m.stages.last().unwrap().error.is_some());
}
