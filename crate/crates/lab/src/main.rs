use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use decorr_core::attacks::{AeObjective, ClassifierObjective, DnaJointObjective, Method, Norm, Objective};
use decorr_core::attacks::craft_chunked;
use decorr_core::corr::{pca_project_1d, pearson_features, r_squared, FeatureBatch};
use decorr_core::data::Dataset;
use decorr_core::eval::{ae_accuracy, dna_either_path, feature_r_squared, transfer_rate};
use decorr_core::metrics::{accuracy, pearson, TransferRecord};
use decorr_core::models::{Model, EVAL_CHUNK};
use decorr_core::train::{
    dverge_finetune, train_autoencoder, train_classifier, train_dna, train_pair, DvergeConfig, InputSource,
    PairObjective, PairState, TrainConfig,
};
use decorr_core::{rng, Tensor};
use decorr_lab::checkpoint::{self, Descriptor};
use decorr_lab::config::{Architecture, ExperimentConfig, ExperimentKind};
use decorr_lab::error::write;
use decorr_lab::experiment::{
    encode_train_log, encode_transfers, fan_out, load_config, load_splits, method_str, norm_str, run_experiment,
    Job, LogLine,
};
use decorr_lab::fmat;
use decorr_lab::report::{encode_report, read_report, ReportRow, UNDEFINED};

/// Feature decorrelation and adversarial transferability experiments.
///
/// Stage commands take their defaults from the preset of the matching
/// experiment kind, or from `--config` when given. Datasets are read from
/// `$DECORR_DATA_DIR` unless the config names a `data_dir`.
#[derive(Parser, Debug)]
#[command(name = "decorr", version)]
struct Cli {
    /// Experiment config (JSON) or the manifest of an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seeds with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a whole experiment from its config and write a run directory.
    Run {
        /// Preset to run when no config is given.
        #[arg(long, value_enum)]
        kind: Option<Kind>,
    },
    /// Train a classifier pair and save both checkpoints.
    TrainPair {
        #[arg(long, value_enum)]
        arch: Option<Arch>,
        #[arg(long, value_enum, default_value_t = Coupling::Decorrelate)]
        objective: Coupling,
        /// Target squared parameter distance for `--objective distance`.
        #[arg(long, default_value_t = 2000.0)]
        target_distance: f64,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a dual-neck autoencoder, or the single-neck baseline.
    TrainDna {
        #[arg(long)]
        unshared: Option<usize>,
        #[arg(long)]
        autoencoder: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the evaluation classifier on raw inputs or on reconstructions.
    TrainClassifier {
        /// Autoencoder checkpoint whose reconstructions the classifier sees.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Attack a classifier, or an autoencoder followed by a classifier.
    Attack {
        /// Classifier checkpoint, or autoencoder checkpoint with `--classifier`.
        model: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[command(flatten)]
        cell: CellArgs,
    },
    /// Craft attacks on one classifier and replay them on another.
    EvalTransfer {
        source: PathBuf,
        target: PathBuf,
        #[command(flatten)]
        cell: CellArgs,
    },
    /// Fine-tune a classifier pair with DVERGE-lite.
    Dverge {
        m1: PathBuf,
        m2: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Feature correlation between two classifiers or two feature matrices.
    AnalyzeCorr {
        /// Classifier checkpoint or `.fmat` feature matrix.
        a: PathBuf,
        b: PathBuf,
    },
    /// Mean and spread over seeds of one or more results files.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(clap::Args, Debug)]
struct CellArgs {
    /// Single method instead of the config's grid.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    norm: Option<NormArg>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// PGD iterations.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    PairDistance,
    PairDecorrelated,
    Dna,
    Dverge,
    CorrAnalysis,
}

impl From<Kind> for ExperimentKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::PairDistance => ExperimentKind::PairDistance,
            Kind::PairDecorrelated => ExperimentKind::PairDecorrelated,
            Kind::Dna => ExperimentKind::Dna,
            Kind::Dverge => ExperimentKind::Dverge,
            Kind::CorrAnalysis => ExperimentKind::CorrAnalysis,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Arch {
    Fc,
    Cnn,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Coupling {
    None,
    Decorrelate,
    Distance,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Fgsm,
    Pgd,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum NormArg {
    Linf,
    L2,
}

struct Ctx {
    cfg: ExperimentConfig,
    /// Whether `cfg` came from `--config` rather than a preset.
    from_file: bool,
    seed: u64,
    out: PathBuf,
    threads: usize,
}

impl Ctx {
    fn new(cli: &Cli, kind: ExperimentKind) -> Result<Self> {
        let (mut cfg, from_file) = match &cli.config {
            Some(p) => (load_config(p)?, true),
            None => (ExperimentConfig::preset(kind), false),
        };
        if let Some(s) = cli.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &cli.out {
            cfg.out.clone_from(o);
        }
        let seed = *cfg.seeds.first().context("config lists no seeds")?;
        Ok(Ctx {
            seed,
            out: cfg.out.clone(),
            threads: cli.threads.max(1),
            from_file,
            cfg,
        })
    }

    fn splits(&self) -> Result<(Dataset, Dataset)> {
        Ok(load_splits(&self.cfg)?)
    }

    /// Attacked prefix of the test split.
    fn attack_set(&self, test: &Dataset) -> (Tensor<f32>, Vec<usize>) {
        let n = self.cfg.subsets.attack.unwrap_or(test.len()).min(test.len());
        test.batch(&(0..n).collect::<Vec<_>>())
    }

    fn put(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        write(&self.out.join(rel), bytes)?;
        log::info!("wrote {}", self.out.join(rel).display());
        Ok(())
    }

    fn cells(&self, a: &CellArgs) -> Vec<(Method, Norm, f64)> {
        let g = &self.cfg.attacks;
        let methods = a.method.map_or_else(
            || g.methods.clone(),
            |m| {
                vec![match m {
                    MethodArg::Fgsm => Method::Fgsm,
                    MethodArg::Pgd => Method::Pgd,
                }]
            },
        );
        let norms = a.norm.map_or_else(
            || g.norms.clone(),
            |n| {
                vec![match n {
                    NormArg::Linf => Norm::Linf,
                    NormArg::L2 => Norm::L2,
                }]
            },
        );
        let eps = a.epsilon.map_or_else(|| g.epsilons.clone(), |e| vec![e]);
        let mut out = Vec::new();
        for &m in &methods {
            for &n in &norms {
                for &e in &eps {
                    out.push((m, n, e));
                }
            }
        }
        out
    }
}

fn row(exp: &str, seed: u64, cell: Option<(Method, Norm, f64)>, metric: &str, value: Option<f64>) -> ReportRow {
    match cell {
        None => ReportRow::natural(exp, seed, metric, value),
        Some((m, n, e)) => ReportRow {
            experiment: exp.to_string(),
            seed,
            epsilon: e,
            norm: norm_str(n).to_string(),
            method: method_str(m).to_string(),
            metric: metric.to_string(),
            value,
        },
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn log_lines(run: &str, seed: u64, logs: &[decorr_core::train::EpochLog]) -> Vec<LogLine> {
    logs.iter()
        .map(|l| LogLine {
            run: run.to_string(),
            seed,
            log: l.clone(),
        })
        .collect()
}

fn train_pair_cmd(ctx: &Ctx, arch: Option<Arch>, coupling: Coupling, target: f64, lambda: Option<f64>, epochs: Option<usize>) -> Result<()> {
    let arch = match arch {
        Some(Arch::Fc) => Architecture::Fc,
        Some(Arch::Cnn) => Architecture::Cnn,
        None => ctx.cfg.architecture,
    };
    let mut tc = match coupling {
        Coupling::Distance if !ctx.from_file => TrainConfig::pair_distance(),
        _ => ctx.cfg.train.clone(),
    };
    tc.seed = ctx.seed;
    if let Some(l) = lambda {
        tc.lambda = l;
    }
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    let obj = match coupling {
        Coupling::None => PairObjective::None,
        Coupling::Decorrelate => PairObjective::Decorrelate,
        Coupling::Distance => PairObjective::Distance { target },
    };
    let (train, test) = ctx.splits()?;
    let mut state = PairState::new(arch.spec(), tc.seed, tc.learning_rate)?;
    train_pair(&mut state, obj, &tc, &train, Some(&test))?;
    for (i, m) in state.models.iter().enumerate() {
        let path = ctx.out.join(format!("m{}.dnac", i + 1));
        checkpoint::save_model(&path, m)?;
    }
    let exp = "pair";
    let (x, _) = ctx.attack_set(&test);
    let mut rows = Vec::new();
    for (i, m) in state.models.iter().enumerate() {
        let a = m.accuracy(&test)?;
        println!("m{} accuracy {a:.4}", i + 1);
        rows.push(row(exp, ctx.seed, None, &format!("accuracy_m{}", i + 1), Some(a)));
    }
    let r2 = feature_r_squared(&state.models[0], &state.models[1], &x, tc.batch_size.min(x.rows()))?;
    let dist = state.distance()?;
    println!("feature r_squared {r2:.4}  parameter distance {dist:.1}");
    rows.push(row(exp, ctx.seed, None, "r_squared", Some(r2)));
    rows.push(row(exp, ctx.seed, None, "param_distance", Some(dist)));
    ctx.put("results.csv", &encode_report(&rows)?)?;
    ctx.put("train_log.csv", &encode_train_log(&log_lines(exp, ctx.seed, &state.log)))?;
    Ok(())
}

fn train_dna_cmd(ctx: &Ctx, unshared: Option<usize>, autoencoder: bool, epochs: Option<usize>) -> Result<()> {
    let mut tc = TrainConfig {
        seed: ctx.seed,
        ..ctx.cfg.train.clone()
    };
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    let (train, _) = ctx.splits()?;
    let (name, logs) = if autoencoder {
        let (ae, logs) = train_autoencoder::<f32>(&ctx.cfg.autoencoder_spec()?, &tc, &train)?;
        checkpoint::save_model(&ctx.out.join("autoencoder.dnac"), &ae)?;
        ("autoencoder", logs)
    } else {
        let u = unshared.or_else(|| ctx.cfg.unshared.first().copied()).unwrap_or(2);
        let (dna, logs) = train_dna::<f32>(&ctx.cfg.dna_spec(u)?, &tc, &train)?;
        checkpoint::save_dna(&ctx.out.join("dna.dnac"), &dna)?;
        ("dna", logs)
    };
    if let Some(l) = logs.last() {
        println!("{name} final reconstruction losses {:?}", l.loss);
    }
    ctx.put("train_log.csv", &encode_train_log(&log_lines(name, ctx.seed, &logs)))?;
    Ok(())
}

fn train_classifier_cmd(ctx: &Ctx, source: Option<&Path>, epochs: Option<usize>) -> Result<()> {
    let mut tc = TrainConfig {
        seed: ctx.seed,
        ..ctx.cfg.classifier.clone()
    };
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    let (train, test) = ctx.splits()?;
    let spec = ctx.cfg.eval_classifier_spec();
    let (clf, logs) = match source {
        None => train_classifier::<f32>(&spec, &tc, &train, InputSource::Raw, Some(&test))?,
        Some(p) => {
            let c = checkpoint::load(p)?;
            match c.blueprint(&p.display().to_string())? {
                Descriptor::Dna(spec_d) => {
                    let dna = decorr_core::models::Dna { spec: spec_d, params: c.params() };
                    train_classifier(&spec, &tc, &train, InputSource::Dna(&dna), Some(&test))?
                }
                Descriptor::Model(spec_m) => {
                    let ae = Model { spec: spec_m, params: c.params() };
                    train_classifier(&spec, &tc, &train, InputSource::Autoencoder(&ae), Some(&test))?
                }
            }
        }
    };
    if let Some(Some(a)) = logs.last().and_then(|l| l.accuracy.first()) {
        println!("classifier accuracy {a:.4}");
    }
    checkpoint::save_model(&ctx.out.join("classifier.dnac"), &clf)?;
    ctx.put("train_log.csv", &encode_train_log(&log_lines("classifier", ctx.seed, &logs)))?;
    Ok(())
}

/// What `attack` evaluates.
enum Target {
    Classifier(Model<f32>),
    Dna(decorr_core::models::Dna<f32>, Model<f32>),
    Autoencoder(Model<f32>, Model<f32>),
}

impl Target {
    fn load(model: &Path, classifier: Option<&Path>) -> Result<Self> {
        let c = checkpoint::load(model)?;
        let desc = c.blueprint(&model.display().to_string())?;
        Ok(match (desc, classifier) {
            (Descriptor::Model(spec), None) => Target::Classifier(Model { spec, params: c.params() }),
            (Descriptor::Dna(_), None) => bail!("attacking an autoencoder needs --classifier"),
            (Descriptor::Dna(spec), Some(k)) => {
                Target::Dna(decorr_core::models::Dna { spec, params: c.params() }, checkpoint::load_model(k)?)
            }
            (Descriptor::Model(spec), Some(k)) => {
                Target::Autoencoder(Model { spec, params: c.params() }, checkpoint::load_model(k)?)
            }
        })
    }

    fn objective(&self) -> Box<dyn Objective<f32> + Sync + '_> {
        match self {
            Target::Classifier(m) => Box::new(ClassifierObjective { model: m }),
            Target::Dna(dna, clf) => Box::new(DnaJointObjective { dna, classifier: clf }),
            Target::Autoencoder(ae, clf) => Box::new(AeObjective { ae, classifier: clf }),
        }
    }

    /// Metric name and value pairs on `x`.
    fn score(&self, x: &Tensor<f32>, y: &[usize]) -> decorr_core::Result<Vec<(&'static str, f64)>> {
        Ok(match self {
            Target::Classifier(m) => vec![("accuracy", accuracy(&m.predict(x)?, y))],
            Target::Autoencoder(ae, clf) => vec![("accuracy", ae_accuracy(ae, clf, x, y)?)],
            Target::Dna(dna, clf) => {
                let (either, avg) = dna_either_path(dna, clf, x, y)?;
                vec![("either_path_accuracy", either), ("avg_accuracy", avg)]
            }
        })
    }
}

fn attack_cmd(ctx: &Ctx, model: &Path, classifier: Option<&Path>, cell: &CellArgs) -> Result<()> {
    let target = Target::load(model, classifier)?;
    let (_, test) = ctx.splits()?;
    let (x, y) = ctx.attack_set(&test);
    let exp = stem(model);
    let cells = ctx.cells(cell);
    let steps = cell.steps;
    let jobs: Vec<Job<Vec<(&str, f64)>>> = cells
        .iter()
        .enumerate()
        .map(|(i, &(m, n, e))| {
            let (target, x, y) = (&target, &x, &y);
            let seed = rng::derive(ctx.seed, 0xa77a_c000 + i as u64);
            let mut a = ctx.cfg.attacks.attack(m, n, e, seed);
            if let Some(s) = steps {
                a.steps = s;
            }
            Box::new(move || {
                if e == 0.0 {
                    return Ok(target.score(x, y)?);
                }
                let adv = craft_chunked(target.objective().as_ref(), x, y, &a, EVAL_CHUNK)?;
                Ok(target.score(&adv.perturbed, y)?)
            }) as Job<_>
        })
        .collect();
    let mut rows = vec![];
    for s in target.score(&x, &y)? {
        rows.push(row(&exp, ctx.seed, None, s.0, Some(s.1)));
    }
    for (r, &c) in fan_out(ctx.threads, jobs).into_iter().zip(&cells) {
        for (metric, v) in r? {
            println!("{} {} eps {}: {metric} {v:.4}", method_str(c.0), norm_str(c.1), c.2);
            rows.push(row(&exp, ctx.seed, Some(c), metric, Some(v)));
        }
    }
    ctx.put("results.csv", &encode_report(&rows)?)?;
    Ok(())
}

fn eval_transfer_cmd(ctx: &Ctx, source: &Path, target: &Path, cell: &CellArgs) -> Result<()> {
    let s = checkpoint::load_model::<f32>(source)?;
    let t = checkpoint::load_model::<f32>(target)?;
    let (_, test) = ctx.splits()?;
    let (x, y) = ctx.attack_set(&test);
    let (sn, tn) = (stem(source), stem(target));
    let exp = format!("{sn}-to-{tn}");
    let cells = ctx.cells(cell);
    let jobs: Vec<Job<Option<TransferRecord>>> = cells
        .iter()
        .enumerate()
        .map(|(i, &(m, n, e))| {
            let (s, t, x, y, sn, tn) = (&s, &t, &x, &y, &sn, &tn);
            let mut a = ctx.cfg.attacks.attack(m, n, e, rng::derive(ctx.seed, 0xa77a_c000 + i as u64));
            if let Some(k) = cell.steps {
                a.steps = k;
            }
            Box::new(move || {
                if e == 0.0 {
                    return Ok(None);
                }
                let adv = craft_chunked(&ClassifierObjective { model: s }, x, y, &a, EVAL_CHUNK)?;
                let id = format!("{}-{}", method_str(m), norm_str(n));
                Ok(Some(transfer_rate((sn, s), (tn, t), &adv, &id)?))
            }) as Job<_>
        })
        .collect();
    let mut rows = Vec::new();
    let mut recs = Vec::new();
    for (r, &c) in fan_out(ctx.threads, jobs).into_iter().zip(&cells) {
        let Some(rec) = r? else { continue };
        let rate = rec.rate();
        println!(
            "{} {} eps {}: {} of {} fooled the source, transfer rate {}",
            method_str(c.0),
            norm_str(c.1),
            c.2,
            rec.n_fooled_source,
            rec.n_total,
            rate.map_or_else(|| UNDEFINED.to_string(), |v| format!("{v:.4}"))
        );
        rows.push(row(&exp, ctx.seed, Some(c), "transfer_rate", rate));
        recs.push((exp.clone(), ctx.seed, c.2, rec));
    }
    ctx.put("results.csv", &encode_report(&rows)?)?;
    ctx.put("transfers.csv", &encode_transfers(&recs))?;
    Ok(())
}

fn dverge_cmd(ctx: &Ctx, m1: &Path, m2: &Path, epochs: Option<usize>) -> Result<()> {
    let a = checkpoint::load_model::<f32>(m1)?;
    let b = checkpoint::load_model::<f32>(m2)?;
    let mut dc = DvergeConfig {
        seed: ctx.seed,
        ..ctx.cfg.dverge.clone()
    };
    if let Some(e) = epochs {
        dc.epochs = e;
    }
    let (train, test) = ctx.splits()?;
    let pair = PairState::from_trained([a, b], dc.learning_rate)?;
    let pair = dverge_finetune(pair, &dc, &train)?;
    let mut rows = Vec::new();
    for (i, m) in pair.models.iter().enumerate() {
        checkpoint::save_model(&ctx.out.join(format!("m{}.dnac", i + 1)), m)?;
        let acc = m.accuracy(&test)?;
        println!("m{} accuracy after fine-tuning {acc:.4}", i + 1);
        rows.push(row("dverge", ctx.seed, None, &format!("accuracy_m{}_after", i + 1), Some(acc)));
    }
    ctx.put("results.csv", &encode_report(&rows)?)?;
    ctx.put("train_log.csv", &encode_train_log(&log_lines("dverge", ctx.seed, &pair.log)))?;
    Ok(())
}

fn is_fmat(p: &Path) -> Result<bool> {
    let mut head = [0u8; 4];
    let mut f = std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
    Ok(std::io::Read::read(&mut f, &mut head)? == 4 && &head == fmat::MAGIC)
}

fn analyze_corr_cmd(ctx: &Ctx, a: &Path, b: &Path) -> Result<()> {
    let mut rows = Vec::new();
    let (za, zb, labels) = match (is_fmat(a)?, is_fmat(b)?) {
        (true, true) => (fmat::load(a)?, fmat::load(b)?, None),
        (false, false) => {
            let ma = checkpoint::load_model::<f32>(a)?;
            let mb = checkpoint::load_model::<f32>(b)?;
            let (_, test) = ctx.splits()?;
            let (x, y) = ctx.attack_set(&test);
            let batch = ctx.cfg.train.batch_size.min(x.rows());
            let r2 = feature_r_squared(&ma, &mb, &x, batch)?;
            println!("batched r_squared ({batch} per batch) {r2:.4}");
            rows.push(row("corr", ctx.seed, None, "r_squared", Some(r2)));
            let flat = |m: &Model<f32>| -> Result<Tensor<f64>> {
                let f = m.features(&x)?.cast::<f64>();
                let (r, c) = (f.rows(), f.row_len());
                Ok(f.reshape(&[r, c])?)
            };
            let (fa, fb) = (flat(&ma)?, flat(&mb)?);
            ctx.put("features/a.fmat", &fmat::encode(&fa)?)?;
            ctx.put("features/b.fmat", &fmat::encode(&fb)?)?;
            (fa, fb, Some(y))
        }
        _ => bail!("give two checkpoints or two feature matrices"),
    };
    let (fa, fb) = (FeatureBatch::new(za)?, FeatureBatch::new(zb)?);
    if fa.n() != fb.n() {
        bail!("feature matrices have {} and {} rows", fa.n(), fb.n());
    }
    let full = r_squared(&fa, &fb)?;
    let rho = pearson_features(&fa, &fb)?;
    let pa = pca_project_1d(&fa)?;
    let pb = pca_project_1d(&fb)?;
    let pc = pearson(&pa, &pb).map(|v| v * v);
    println!(
        "r_squared {:.4}  mean |pearson| {rho:.4}  first-component r_squared {}",
        full.r_squared,
        pc.map_or_else(|| UNDEFINED.to_string(), |v| format!("{v:.4}"))
    );
    rows.push(row("corr", ctx.seed, None, "r_squared_all", Some(full.r_squared)));
    rows.push(row("corr", ctx.seed, None, "pearson_features", Some(rho)));
    rows.push(row("corr", ctx.seed, None, "pca_r_squared", pc));
    let mut csv = String::from("index,label,pc1_a,pc1_b\n");
    for (i, (x, y)) in pa.iter().zip(&pb).enumerate() {
        let l = labels.as_ref().map_or_else(String::new, |l| l[i].to_string());
        csv.push_str(&format!("{i},{l},{x},{y}\n"));
    }
    ctx.put("pca.csv", csv.as_bytes())?;
    ctx.put("results.csv", &encode_report(&rows)?)?;
    Ok(())
}

/// Per (experiment, cell, metric): defined values and the count of
/// undefined ones.
type Groups = BTreeMap<(String, String, String, String, String), (Vec<f64>, usize)>;

fn report_cmd(ctx: &Ctx, inputs: &[PathBuf]) -> Result<()> {
    let mut groups = Groups::new();
    for p in inputs {
        for r in read_report(p)? {
            let key = (r.experiment, r.epsilon.to_string(), r.norm, r.method, r.metric);
            let g = groups.entry(key).or_default();
            match r.value {
                Some(v) => g.0.push(v),
                None => g.1 += 1,
            }
        }
    }
    let mut csv = String::from("experiment,epsilon,norm,method,metric,mean,std,n,n_undefined\n");
    for ((exp, eps, norm, method, metric), (v, undef)) in &groups {
        let n = v.len();
        let (mean, std) = if n == 0 {
            (UNDEFINED.to_string(), UNDEFINED.to_string())
        } else {
            let m = v.iter().sum::<f64>() / n as f64;
            let var = if n > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
            (m.to_string(), var.sqrt().to_string())
        };
        println!("{exp:<28} {eps:>6} {norm:>4} {method:>4} {metric:<24} {mean:>10.10} ± {std:.6} (n={n})");
        csv.push_str(&format!("{exp},{eps},{norm},{method},{metric},{mean},{std},{n},{undef}\n"));
    }
    ctx.put("summary.csv", csv.as_bytes())?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let kind = match &cli.command {
        Command::Run { kind } => kind.map_or(ExperimentKind::PairDecorrelated, Into::into),
        Command::TrainPair {
            objective: Coupling::Distance,
            ..
        } => ExperimentKind::PairDistance,
        Command::TrainDna { .. } | Command::TrainClassifier { .. } | Command::Attack { classifier: Some(_), .. } => {
            ExperimentKind::Dna
        }
        Command::Dverge { .. } => ExperimentKind::Dverge,
        Command::AnalyzeCorr { .. } => ExperimentKind::CorrAnalysis,
        _ => ExperimentKind::PairDecorrelated,
    };
    if let Command::Run { kind: None } = &cli.command {
        if cli.config.is_none() {
            bail!("run needs --config or --kind");
        }
    }
    let ctx = Ctx::new(&cli, kind)?;
    match &cli.command {
        Command::Run { .. } => {
            let run = run_experiment(&ctx.cfg, ctx.threads)?;
            println!("{} rows written to {}", run.rows.len(), run.dir.join("results.csv").display());
        }
        Command::TrainPair {
            arch,
            objective,
            target_distance,
            lambda,
            epochs,
        } => train_pair_cmd(&ctx, *arch, *objective, *target_distance, *lambda, *epochs)?,
        Command::TrainDna {
            unshared,
            autoencoder,
            epochs,
        } => train_dna_cmd(&ctx, *unshared, *autoencoder, *epochs)?,
        Command::TrainClassifier { source, epochs } => train_classifier_cmd(&ctx, source.as_deref(), *epochs)?,
        Command::Attack { model, classifier, cell } => attack_cmd(&ctx, model, classifier.as_deref(), cell)?,
        Command::EvalTransfer { source, target, cell } => eval_transfer_cmd(&ctx, source, target, cell)?,
        Command::Dverge { m1, m2, epochs } => dverge_cmd(&ctx, m1, m2, *epochs)?,
        Command::AnalyzeCorr { a, b } => analyze_corr_cmd(&ctx, a, b)?,
        Command::Report { inputs } => report_cmd(&ctx, inputs)?,
    }
    Ok(())
}
