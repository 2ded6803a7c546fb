//! Config-driven experiment runs.
//!
//! A run directory holds:
//!
//! - `config.json`: the config as run
//! - `manifest.json`: config, seeds, thread count, per-stage wall times and
//!   SHA-256 checksums of every file each stage wrote
//! - `results.csv`: one metric per row (see [`crate::report`])
//! - `train_log.csv`: one line per training epoch
//! - `transfers.csv`: directional transfer counts (pair kinds)
//! - `checkpoints/*.dnac`, `features/*.fmat`, `grids/*.pgm|ppm`, `pca/*.csv`
//!
//! Independent cells (seed × variant, then model × attack cell) fan out
//! over `threads` workers. Each cell owns its tape and returns its rows;
//! files and CSVs are written by the calling thread after the cells join,
//! in cell order, so outputs do not depend on the thread count.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use decorr_core::attacks::{craft_chunked, ClassifierObjective, DnaJointObjective, AeObjective, Method, Norm, Objective};
use decorr_core::corr::{pca_project_1d, pearson_features, r_squared, FeatureBatch};
use decorr_core::data::{Dataset, Split};
use decorr_core::eval::feature_r_squared;
use decorr_core::metrics::{accuracy, either_path_accuracy, pearson, TransferRecord};
use decorr_core::models::{Dna, Model, EVAL_CHUNK};
use decorr_core::train::{
    dverge_finetune, train_autoencoder, train_classifier, train_dna, train_pair, DvergeConfig, EpochLog, InputSource,
    PairObjective, PairState, TrainConfig,
};
use decorr_core::{rng, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Descriptor};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{label, read, write, FormatError, Result};
use crate::report::{encode_report, ReportRow};
use crate::{datasets, fmat, pnm};

/// Unit of work handed to [`fan_out`].
pub type Job<'a, T> = Box<dyn FnOnce() -> Result<T> + Send + 'a>;

/// Runs `jobs` on up to `threads` scoped workers and returns their results
/// in job order.
pub fn fan_out<'a, T: Send>(threads: usize, jobs: Vec<Job<'a, T>>) -> Vec<Result<T>> {
    let n = jobs.len();
    let queue = Mutex::new(jobs.into_iter().enumerate());
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let next = queue.lock().expect("queue lock").next();
                let Some((i, job)) = next else { break };
                let r = job();
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every job ran"))
        .collect()
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub seconds: f64,
    /// Relative path → SHA-256 (hex) of each file the stage wrote.
    pub outputs: BTreeMap<String, String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub stages: Vec<StageRecord>,
    pub complete: bool,
}

/// Reads an experiment config, or the config echoed inside a run manifest.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let bytes = read(path)?;
    if let Ok(m) = serde_json::from_slice::<Manifest>(&bytes) {
        return Ok(m.config);
    }
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| FormatError::parse(&label(path), e.valid_up_to(), "config is not UTF-8"))?;
    ExperimentConfig::from_json(text, &label(path))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// One training epoch of one run, as logged.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLine {
    pub run: String,
    pub seed: u64,
    pub log: EpochLog,
}

pub const TRAIN_LOG_HEADER: [&str; 8] = ["run", "seed", "epoch", "loss_1", "loss_2", "term", "accuracy_1", "accuracy_2"];

pub fn encode_train_log(lines: &[LogLine]) -> Vec<u8> {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    let mut out = TRAIN_LOG_HEADER.join(",");
    out.push('\n');
    for l in lines {
        let loss = |i: usize| opt(l.log.loss.get(i).copied());
        let acc = |i: usize| opt(l.log.accuracy.get(i).copied().flatten());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            l.run,
            l.seed,
            l.log.epoch,
            loss(0),
            loss(1),
            l.log.term,
            acc(0),
            acc(1)
        ));
    }
    out.into_bytes()
}

pub fn encode_transfers(records: &[(String, u64, f64, TransferRecord)]) -> Vec<u8> {
    let mut out = String::from("experiment,seed,epsilon,attack,source,target,n_total,n_fooled_source,n_fooled_both,transfer_rate\n");
    for (exp, seed, eps, r) in records {
        let rate = r.rate().map_or_else(|| crate::report::UNDEFINED.to_string(), |v| v.to_string());
        out.push_str(&format!(
            "{exp},{seed},{eps},{},{},{},{},{},{},{rate}\n",
            r.attack, r.source, r.target, r.n_total, r.n_fooled_source, r.n_fooled_both
        ));
    }
    out.into_bytes()
}

/// Outcome of a finished run.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub rows: Vec<ReportRow>,
    pub manifest: Manifest,
}

struct Data {
    train: Dataset,
    test: Dataset,
    /// Attacked (and feature-analysed) prefix of the test set.
    x: Tensor<f32>,
    y: Vec<usize>,
}

struct Runner<'c> {
    cfg: &'c ExperimentConfig,
    dir: PathBuf,
    threads: usize,
    stages: Vec<StageRecord>,
    current: BTreeMap<String, String>,
    rows: Vec<ReportRow>,
    logs: Vec<LogLine>,
    transfers: Vec<(String, u64, f64, TransferRecord)>,
}

impl<'c> Runner<'c> {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write(&self.dir.join(rel), bytes)?;
        self.current.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn manifest(&self, complete: bool) -> Manifest {
        Manifest {
            config: self.cfg.clone(),
            seeds: self.cfg.seeds.clone(),
            threads: self.threads,
            stages: self.stages.clone(),
            complete,
        }
    }

    fn write_manifest(&self, complete: bool) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest(complete)).expect("manifests serialize");
        write(&self.dir.join("manifest.json"), json.as_bytes())
    }

    /// Runs `f` as a named stage. On failure the partial training log and
    /// the manifest are persisted before the error is returned.
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        let t = Instant::now();
        self.current.clear();
        let r = f(self);
        let outputs = std::mem::take(&mut self.current);
        self.stages.push(StageRecord {
            name: name.to_string(),
            seconds: t.elapsed().as_secs_f64(),
            outputs,
            error: r.as_ref().err().map(|e| e.to_string()),
        });
        match r {
            Ok(v) => {
                self.write_manifest(false)?;
                Ok(v)
            }
            Err(e) => {
                let log = encode_train_log(&self.logs);
                // best effort: the original error matters more than these
                let _ = write(&self.dir.join("train_log.csv"), &log);
                let _ = self.write_manifest(false);
                Err(FormatError::Stage {
                    stage: name.to_string(),
                    source: Box::new(e),
                })
            }
        }
    }

    fn log(&mut self, run: &str, seed: u64, logs: &[EpochLog]) {
        self.logs.extend(logs.iter().map(|l| LogLine {
            run: run.to_string(),
            seed,
            log: l.clone(),
        }));
    }
}

fn eps_tag(e: f64) -> String {
    format!("{e}")
}

pub fn method_str(m: Method) -> &'static str {
    match m {
        Method::Fgsm => "fgsm",
        Method::Pgd => "pgd",
    }
}

pub fn norm_str(n: Norm) -> &'static str {
    match n {
        Norm::Linf => "linf",
        Norm::L2 => "l2",
    }
}

fn row(exp: &str, seed: u64, cell: (Method, Norm, f64), metric: &str, value: Option<f64>) -> ReportRow {
    ReportRow {
        experiment: exp.to_string(),
        seed,
        epsilon: cell.2,
        norm: norm_str(cell.1).to_string(),
        method: method_str(cell.0).to_string(),
        metric: metric.to_string(),
        value,
    }
}

/// Perturbed copy of `x` for one grid cell; `ε = 0` returns `x` itself.
fn perturb<O: Objective<f32> + ?Sized>(
    cfg: &ExperimentConfig,
    obj: &O,
    x: &Tensor<f32>,
    y: &[usize],
    cell: (Method, Norm, f64),
    seed: u64,
) -> Result<Tensor<f32>> {
    if cell.2 == 0.0 {
        return Ok(x.clone());
    }
    let a = cfg.attacks.attack(cell.0, cell.1, cell.2, seed);
    Ok(craft_chunked(obj, x, y, &a, EVAL_CHUNK)?.perturbed)
}

fn attack_seed(seed: u64, cell: usize) -> u64 {
    rng::derive(seed, 0xa77a_c000u64.wrapping_add(cell as u64))
}

/// Transfer records 1→2 and 2→1 for one cell.
fn pair_cell(
    cfg: &ExperimentConfig,
    models: [&Model<f32>; 2],
    d: &Data,
    cell: (Method, Norm, f64),
    seed: u64,
) -> Result<[TransferRecord; 2]> {
    let id = format!("{}-{}", method_str(cell.0), norm_str(cell.1));
    let mut recs = Vec::with_capacity(2);
    for s in 0..2 {
        let xp = perturb(cfg, &ClassifierObjective { model: models[s] }, &d.x, &d.y, cell, seed)?;
        let ps = models[s].predict(&xp)?;
        let pt = models[1 - s].predict(&xp)?;
        let names = [["m1", "m2"], ["m2", "m1"]][s];
        recs.push(TransferRecord::tally(&id, names[0], names[1], &ps, &pt, &d.y)?);
    }
    let b = recs.pop().expect("two records");
    let a = recs.pop().expect("two records");
    Ok([a, b])
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Train and test splits of `cfg.dataset`, cut to the configured subsets.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let root = cfg.data_root();
    let mut train = datasets::load(cfg.dataset, Split::Train, &root)?;
    let mut test = datasets::load(cfg.dataset, Split::Test, &root)?;
    if let Some(n) = cfg.subsets.train {
        train = train.take(n);
    }
    if let Some(n) = cfg.subsets.test {
        test = test.take(n);
    }
    Ok((train, test))
}

fn load_data(cfg: &ExperimentConfig) -> Result<Data> {
    let (train, test) = load_splits(cfg)?;
    let n = cfg.subsets.attack.unwrap_or(test.len()).min(test.len());
    let (x, y) = test.batch::<f32>(&(0..n).collect::<Vec<_>>());
    Ok(Data { train, test, x, y })
}

/// Runs the experiment named by `cfg.kind`, writing into `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<Run> {
    cfg.validate()?;
    let mut r = Runner {
        cfg,
        dir: cfg.out.clone(),
        threads: threads.max(1),
        stages: Vec::new(),
        current: BTreeMap::new(),
        rows: Vec::new(),
        logs: Vec::new(),
        transfers: Vec::new(),
    };
    r.stage("setup", |r| r.put("config.json", cfg.to_json().as_bytes()))?;
    let data = r.stage("load-data", |_| load_data(cfg))?;
    match cfg.kind {
        ExperimentKind::PairDecorrelated | ExperimentKind::CorrAnalysis | ExperimentKind::Dverge => {
            run_pairs(&mut r, &data)?
        }
        ExperimentKind::PairDistance => run_distance(&mut r, &data)?,
        ExperimentKind::Dna => run_dna(&mut r, &data)?,
    }
    r.stage("report", |r| {
        let rows = encode_report(&r.rows)?;
        r.put("results.csv", &rows)?;
        let log = encode_train_log(&r.logs);
        r.put("train_log.csv", &log)?;
        if !r.transfers.is_empty() {
            let t = encode_transfers(&r.transfers);
            r.put("transfers.csv", &t)?;
        }
        Ok(())
    })?;
    r.write_manifest(true)?;
    Ok(Run {
        dir: r.dir.clone(),
        manifest: r.manifest(true),
        rows: r.rows,
    })
}

// ----- classifier pairs ---------------------------------------------------

struct TrainedPair {
    exp: String,
    seed: u64,
    state: PairState<f32>,
}

fn pair_cfg(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

fn save_pair(r: &mut Runner, p: &TrainedPair) -> Result<()> {
    let desc = serde_json::to_string(&Descriptor::Model(p.state.arch.clone())).expect("blueprints serialize");
    for (i, m) in p.state.models.iter().enumerate() {
        let bytes = checkpoint::encode(&desc, &m.params)?;
        r.put(&format!("checkpoints/{}-s{}-m{}.dnac", p.exp, p.seed, i + 1), &bytes)?;
    }
    Ok(())
}

fn natural_rows(r: &mut Runner, p: &TrainedPair, d: &Data, suffix: &str) -> Result<()> {
    let arch_batch = r.cfg.train.batch_size.min(d.x.rows());
    let accs = [p.state.models[0].accuracy(&d.test)?, p.state.models[1].accuracy(&d.test)?];
    let r2 = feature_r_squared(&p.state.models[0], &p.state.models[1], &d.x, arch_batch)?;
    for (i, a) in accs.iter().enumerate() {
        r.rows.push(ReportRow::natural(&p.exp, p.seed, format!("accuracy_m{}{suffix}", i + 1), Some(*a)));
    }
    r.rows.push(ReportRow::natural(&p.exp, p.seed, format!("r_squared{suffix}"), Some(r2)));
    Ok(())
}

fn run_pairs(r: &mut Runner, d: &Data) -> Result<()> {
    let cfg = r.cfg;
    let arch = cfg.architecture.spec();
    let arch_name = match cfg.architecture {
        crate::config::Architecture::Fc => "fc",
        crate::config::Architecture::Cnn => "cnn",
    };
    let prefix = if cfg.kind == ExperimentKind::Dverge { "dverge-" } else { "" };
    let mut specs = Vec::new();
    for &seed in &cfg.seeds {
        for dec in [false, true] {
            let variant = if dec { "decorrelated" } else { "baseline" };
            specs.push((format!("{prefix}{arch_name}-{variant}"), seed, dec));
        }
    }
    let threads = r.threads;
    let mut pairs = r.stage("train", |r| {
        let jobs: Vec<Job<TrainedPair>> = specs
            .iter()
            .map(|(exp, seed, dec)| {
                let arch = arch.clone();
                let tc = pair_cfg(cfg, *seed);
                Box::new(move || {
                    let mut state = PairState::new(arch, tc.seed, tc.learning_rate)?;
                    let obj = if *dec { PairObjective::Decorrelate } else { PairObjective::None };
                    train_pair(&mut state, obj, &tc, &d.train, Some(&d.test))?;
                    Ok(TrainedPair {
                        exp: exp.clone(),
                        seed: *seed,
                        state,
                    })
                }) as Job<TrainedPair>
            })
            .collect();
        let pairs = collect(fan_out(threads, jobs))?;
        for p in &pairs {
            r.log(&p.exp, p.seed, &p.state.log);
            save_pair(r, p)?;
            natural_rows(r, p, d, "")?;
        }
        Ok(pairs)
    })?;

    if cfg.kind == ExperimentKind::Dverge {
        pairs = r.stage("dverge", |r| {
            let jobs: Vec<Job<TrainedPair>> = pairs
                .into_iter()
                .map(|p| {
                    let dc = DvergeConfig {
                        seed: p.seed,
                        ..cfg.dverge.clone()
                    };
                    Box::new(move || {
                        let state = dverge_finetune(p.state, &dc, &d.train)?;
                        Ok(TrainedPair { state, ..p })
                    }) as Job<TrainedPair>
                })
                .collect();
            let pairs = collect(fan_out(threads, jobs))?;
            for p in &pairs {
                let tail = p.state.log[p.state.log.len() - cfg.dverge.epochs..].to_vec();
                r.log(&format!("{}-finetune", p.exp), p.seed, &tail);
                save_pair(r, p)?;
                natural_rows(r, p, d, "_after")?;
            }
            Ok(pairs)
        })?;
    }

    let cells = cfg.attacks.cells();
    let analyse = cfg.kind == ExperimentKind::CorrAnalysis;
    r.stage("attack", |r| {
        let mut jobs: Vec<Job<(Vec<ReportRow>, [TransferRecord; 2])>> = Vec::new();
        for p in &pairs {
            for (ci, &cell) in cells.iter().enumerate() {
                jobs.push(Box::new(move || {
                    let m = [&p.state.models[0], &p.state.models[1]];
                    let seed = attack_seed(p.seed, ci);
                    let recs = pair_cell(cfg, m, d, cell, seed)?;
                    let rate = mean_defined(&[recs[0].rate(), recs[1].rate()]);
                    let mut rows = vec![row(&p.exp, p.seed, cell, "transfer_rate", rate)];
                    if analyse {
                        // feature agreement on samples crafted against model 1
                        let xp = perturb(cfg, &ClassifierObjective { model: m[0] }, &d.x, &d.y, cell, seed)?;
                        let b = cfg.train.batch_size.min(xp.rows());
                        let r2 = feature_r_squared(m[0], m[1], &xp, b)?;
                        rows.push(row(&p.exp, p.seed, cell, "r_squared", Some(r2)));
                    }
                    Ok((rows, recs))
                }));
            }
        }
        let out = collect(fan_out(threads, jobs))?;
        for (k, (rows, recs)) in out.into_iter().enumerate() {
            let p = &pairs[k / cells.len()];
            let eps = cells[k % cells.len()].2;
            r.rows.extend(rows);
            for rec in recs {
                r.transfers.push((p.exp.clone(), p.seed, eps, rec));
            }
        }
        Ok(())
    })?;

    if analyse {
        r.stage("features", |r| {
            for p in &pairs {
                let z: Vec<Tensor<f64>> = p
                    .state
                    .models
                    .iter()
                    .map(|m| Ok(m.features(&d.x)?.cast::<f64>()))
                    .collect::<Result<_>>()?;
                let zb = [
                    FeatureBatch::from_batched(&z[0])?,
                    FeatureBatch::from_batched(&z[1])?,
                ];
                for (i, t) in z.iter().enumerate() {
                    let flat = t.clone().reshape(&[t.rows(), t.row_len()])?;
                    r.put(&format!("features/{}-s{}-m{}.fmat", p.exp, p.seed, i + 1), &fmat::encode(&flat)?)?;
                }
                let pc = [pca_project_1d(&zb[0])?, pca_project_1d(&zb[1])?];
                let mut csv = String::from("index,label,pc1_m1,pc1_m2\n");
                for (i, (&a, &b)) in pc[0].iter().zip(&pc[1]).enumerate() {
                    csv.push_str(&format!("{i},{},{a},{b}\n", d.y[i]));
                }
                r.put(&format!("pca/{}-s{}.csv", p.exp, p.seed), csv.as_bytes())?;
                let full = r_squared(&zb[0], &zb[1])?.r_squared;
                let rho = pearson_features(&zb[0], &zb[1])?;
                let pc_r = pearson(&pc[0], &pc[1]);
                r.rows.push(ReportRow::natural(&p.exp, p.seed, "r_squared_all", Some(full)));
                r.rows.push(ReportRow::natural(&p.exp, p.seed, "pearson_features", Some(rho)));
                r.rows.push(ReportRow::natural(&p.exp, p.seed, "pca_r_squared", pc_r.map(|v| v * v)));
            }
            Ok(())
        })?;
    }
    Ok(())
}

// ----- parametric distance --------------------------------------------------

fn run_distance(r: &mut Runner, d: &Data) -> Result<()> {
    let cfg = r.cfg;
    let arch = cfg.architecture.spec();
    let threads = r.threads;
    let mut specs = Vec::new();
    for &seed in &cfg.seeds {
        for &t in &cfg.target_distances {
            specs.push((format!("distance-{t}"), seed, t));
        }
    }
    let pairs = r.stage("train", |r| {
        let jobs: Vec<Job<(TrainedPair, f64)>> = specs
            .iter()
            .map(|(exp, seed, target)| {
                let arch = arch.clone();
                let tc = pair_cfg(cfg, *seed);
                Box::new(move || {
                    let mut state = PairState::new(arch, tc.seed, tc.learning_rate)?;
                    train_pair(&mut state, PairObjective::Distance { target: *target }, &tc, &d.train, Some(&d.test))?;
                    let dist = state.distance()?;
                    Ok((
                        TrainedPair {
                            exp: exp.clone(),
                            seed: *seed,
                            state,
                        },
                        dist,
                    ))
                }) as Job<(TrainedPair, f64)>
            })
            .collect();
        let pairs = collect(fan_out(threads, jobs))?;
        for (p, dist) in &pairs {
            r.log(&p.exp, p.seed, &p.state.log);
            save_pair(r, p)?;
            r.rows.push(ReportRow::natural(&p.exp, p.seed, "param_distance", Some(*dist)));
            natural_rows(r, p, d, "")?;
        }
        Ok(pairs)
    })?;

    let cells = cfg.attacks.cells();
    r.stage("attack", |r| {
        let mut jobs: Vec<Job<[TransferRecord; 2]>> = Vec::new();
        for (p, _) in &pairs {
            for (ci, &cell) in cells.iter().enumerate() {
                jobs.push(Box::new(move || {
                    pair_cell(cfg, [&p.state.models[0], &p.state.models[1]], d, cell, attack_seed(p.seed, ci))
                }));
            }
        }
        let out = collect(fan_out(threads, jobs))?;
        let mut per_cell: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); cells.len()];
        for (k, recs) in out.into_iter().enumerate() {
            let (p, dist) = &pairs[k / cells.len()];
            let ci = k % cells.len();
            let rate = mean_defined(&[recs[0].rate(), recs[1].rate()]);
            r.rows.push(row(&p.exp, p.seed, cells[ci], "transfer_rate", rate));
            if let Some(v) = rate {
                per_cell[ci].0.push(*dist);
                per_cell[ci].1.push(v);
            }
            for rec in recs {
                r.transfers.push((p.exp.clone(), p.seed, cells[ci].2, rec));
            }
        }
        // one summary row per cell, pooled over seeds and targets
        for (ci, (dists, rates)) in per_cell.iter().enumerate() {
            r.rows.push(row("distance-summary", 0, cells[ci], "pearson_distance_transfer", pearson(dists, rates)));
        }
        Ok(())
    })?;
    Ok(())
}

// ----- dual-neck autoencoders ------------------------------------------------

enum Recon {
    Dna(Dna<f32>),
    Ae(Model<f32>),
}

struct ReconRun {
    exp: String,
    seed: u64,
    recon: Recon,
    classifier: Model<f32>,
}

fn run_dna(r: &mut Runner, d: &Data) -> Result<()> {
    let cfg = r.cfg;
    let threads = r.threads;
    let mut specs: Vec<(u64, Option<usize>)> = Vec::new();
    for &seed in &cfg.seeds {
        specs.push((seed, None));
        for &u in &cfg.unshared {
            specs.push((seed, Some(u)));
        }
    }
    let runs = r.stage("train", |r| {
        let jobs: Vec<Job<(ReconRun, Vec<EpochLog>, Vec<EpochLog>)>> = specs
            .iter()
            .map(|&(seed, u)| {
                Box::new(move || {
                    let tc = TrainConfig {
                        seed,
                        ..cfg.train.clone()
                    };
                    let cc = TrainConfig {
                        seed: rng::derive(seed, 0xc1a5 + u.unwrap_or(0) as u64),
                        ..cfg.classifier.clone()
                    };
                    let clf_spec = cfg.eval_classifier_spec();
                    match u {
                        Some(u) => {
                            let (dna, l1) = train_dna::<f32>(&cfg.dna_spec(u)?, &tc, &d.train)?;
                            let (clf, l2) =
                                train_classifier(&clf_spec, &cc, &d.train, InputSource::Dna(&dna), Some(&d.test))?;
                            Ok((
                                ReconRun {
                                    exp: format!("dna-u{u}"),
                                    seed,
                                    recon: Recon::Dna(dna),
                                    classifier: clf,
                                },
                                l1,
                                l2,
                            ))
                        }
                        None => {
                            let (ae, l1) = train_autoencoder::<f32>(&cfg.autoencoder_spec()?, &tc, &d.train)?;
                            let (clf, l2) =
                                train_classifier(&clf_spec, &cc, &d.train, InputSource::Autoencoder(&ae), Some(&d.test))?;
                            Ok((
                                ReconRun {
                                    exp: "ae".into(),
                                    seed,
                                    recon: Recon::Ae(ae),
                                    classifier: clf,
                                },
                                l1,
                                l2,
                            ))
                        }
                    }
                }) as Job<(ReconRun, Vec<EpochLog>, Vec<EpochLog>)>
            })
            .collect();
        let out = collect(fan_out(threads, jobs))?;
        let mut runs = Vec::with_capacity(out.len());
        for (run, l1, l2) in out {
            r.log(&run.exp, run.seed, &l1);
            r.log(&format!("{}-classifier", run.exp), run.seed, &l2);
            let stem = format!("checkpoints/{}-s{}", run.exp, run.seed);
            let bytes = match &run.recon {
                Recon::Dna(dna) => {
                    let desc = serde_json::to_string(&Descriptor::Dna(dna.spec.clone())).expect("serializes");
                    checkpoint::encode(&desc, &dna.params)?
                }
                Recon::Ae(ae) => {
                    let desc = serde_json::to_string(&Descriptor::Model(ae.spec.clone())).expect("serializes");
                    checkpoint::encode(&desc, &ae.params)?
                }
            };
            r.put(&format!("{stem}-autoencoder.dnac"), &bytes)?;
            let cdesc = serde_json::to_string(&Descriptor::Model(run.classifier.spec.clone())).expect("serializes");
            r.put(&format!("{stem}-classifier.dnac"), &checkpoint::encode(&cdesc, &run.classifier.params)?)?;
            r.rows.push(ReportRow::natural(
                &run.exp,
                run.seed,
                "classifier_accuracy",
                l2.last().and_then(|l| l.accuracy[0]),
            ));
            runs.push(run);
        }
        Ok(runs)
    })?;

    let cells = cfg.attacks.cells();
    r.stage("attack", |r| {
        let mut jobs: Vec<Job<(Vec<ReportRow>, Option<Vec<Vec<Tensor<f32>>>>)>> = Vec::new();
        for run in &runs {
            // clean accuracy first, then the grid
            let natural = std::iter::once((usize::MAX, None));
            let grid = cells.iter().copied().enumerate().map(|(i, c)| (i, Some(c)));
            for (ci, cell) in natural.chain(grid) {
                jobs.push(Box::new(move || recon_cell(cfg, run, d, ci, cell)));
            }
        }
        let out = collect(fan_out(threads, jobs))?;
        let per_run = cells.len() + 1;
        for (k, (rows, images)) in out.into_iter().enumerate() {
            r.rows.extend(rows);
            let run = &runs[k / per_run];
            let ci = k % per_run;
            if let (Some(images), true) = (images, ci > 0) {
                let c = cells[ci - 1];
                let ext = if images[0].first().is_some_and(|t| t.shape()[0] == 3) { "ppm" } else { "pgm" };
                let path = format!(
                    "grids/{}-s{}-{}-{}-eps{}.{ext}",
                    run.exp,
                    run.seed,
                    method_str(c.0),
                    norm_str(c.1),
                    eps_tag(c.2)
                );
                match pnm::grid(&images, 2)? {
                    Some(p) => r.put(&path, &p.encode())?,
                    None => log::warn!("no images selected for {path}"),
                }
            }
        }
        Ok(())
    })?;

    r.stage("features", |r| {
        for run in &runs {
            if let Recon::Dna(dna) = &run.recon {
                let [a, b] = dna.features(&d.x)?;
                for (tag, f) in [("a", a), ("b", b)] {
                    let f = f.cast::<f64>();
                    let flat = f.clone().reshape(&[f.rows(), f.row_len()])?;
                    r.put(&format!("features/{}-s{}-{tag}.fmat", run.exp, run.seed), &fmat::encode(&flat)?)?;
                }
            }
        }
        Ok(())
    })?;
    Ok(())
}

/// Columns of the reconstruction figure: natural, perturbed, incorrect
/// reconstruction, correct reconstruction; at most five samples where
/// exactly one pathway is classified correctly.
pub const GRID_COLUMNS: usize = 5;

fn sample(t: &Tensor<f32>, i: usize) -> Result<Tensor<f32>> {
    let s = t.shape()[1..].to_vec();
    Ok(t.slice_rows(i, i + 1).reshape(&s)?)
}

fn recon_cell(
    cfg: &ExperimentConfig,
    run: &ReconRun,
    d: &Data,
    ci: usize,
    cell: Option<(Method, Norm, f64)>,
) -> Result<(Vec<ReportRow>, Option<Vec<Vec<Tensor<f32>>>>)> {
    let clf = &run.classifier;
    let c = cell.unwrap_or((Method::Fgsm, Norm::Linf, 0.0));
    let name = |m: &str| -> ReportRow {
        match cell {
            Some(c) => row(&run.exp, run.seed, c, m, None),
            None => ReportRow::natural(&run.exp, run.seed, m, None),
        }
    };
    let seed = attack_seed(run.seed, ci);
    match &run.recon {
        Recon::Dna(dna) => {
            let xp = if cell.is_some() {
                perturb(cfg, &DnaJointObjective { dna, classifier: clf }, &d.x, &d.y, c, seed)?
            } else {
                d.x.clone()
            };
            let [ra, rb] = dna.reconstruct(&xp)?;
            let (pa, pb) = (clf.predict(&ra)?, clf.predict(&rb)?);
            let (either, avg) = either_path_accuracy(&pa, &pb, &d.y);
            let rows = vec![
                ReportRow {
                    value: Some(either),
                    ..name("either_path_accuracy")
                },
                ReportRow {
                    value: Some(avg),
                    ..name("avg_accuracy")
                },
            ];
            let mut grid = vec![Vec::new(); 4];
            for i in 0..d.y.len() {
                let (ok_a, ok_b) = (pa[i] == d.y[i], pb[i] == d.y[i]);
                if ok_a == ok_b {
                    continue;
                }
                let (bad, good) = if ok_a { (&rb, &ra) } else { (&ra, &rb) };
                grid[0].push(sample(&d.x, i)?);
                grid[1].push(sample(&xp, i)?);
                grid[2].push(sample(bad, i)?);
                grid[3].push(sample(good, i)?);
                if grid[0].len() == GRID_COLUMNS {
                    break;
                }
            }
            let grid = (!grid[0].is_empty()).then_some(grid);
            Ok((rows, grid))
        }
        Recon::Ae(ae) => {
            let xp = if cell.is_some() {
                perturb(cfg, &AeObjective { ae, classifier: clf }, &d.x, &d.y, c, seed)?
            } else {
                d.x.clone()
            };
            let acc = accuracy(&clf.predict(&ae.outputs(&xp)?)?, &d.y);
            Ok((
                vec![ReportRow {
                    value: Some(acc),
                    ..name("accuracy")
                }],
                None,
            ))
        }
    }
}
