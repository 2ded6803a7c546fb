//! Training loops.
//!
//! Every loop shuffles with a `(seed, epoch)`-derived permutation, drops a
//! trailing short batch, updates with Adam and folds batchnorm statistics
//! into the running buffers after each step. Results are deterministic for a
//! given config and build.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::corr;
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::models::{Binder, Dna, DnaSpec, Mode, Model, ModelSpec, ParamSet};
use crate::optim::Adam;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the objective-specific extra term.
    pub lambda: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Pair trained with the correlation penalty: 20 epochs, λ = 0.05.
    pub fn pair_decorrelated() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 500,
            learning_rate: 5e-3,
            lambda: 0.05,
            seed: 0,
        }
    }

    /// Pair trained towards a target parameter distance: 10 epochs, λ = 1e-5.
    pub fn pair_distance() -> Self {
        TrainConfig {
            epochs: 10,
            lambda: 1e-5,
            ..Self::pair_decorrelated()
        }
    }

    pub fn dna_mnist() -> Self {
        TrainConfig {
            epochs: 40,
            ..Self::pair_decorrelated()
        }
    }

    pub fn dna_cifar() -> Self {
        TrainConfig {
            batch_size: 1250,
            ..Self::dna_mnist()
        }
    }

    pub fn classifier() -> Self {
        TrainConfig {
            epochs: 40,
            lambda: 0.0,
            ..Self::pair_decorrelated()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be finite".into()));
        }
        batches(n, self.batch_size, 0, 0, true).map(|_| ())
    }
}

/// Per-epoch means over batches. `loss` holds one entry per trained
/// network (CE for classifiers, squared MSE for autoencoder pathways);
/// `term` is the extra objective term before weighting.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: Vec<f64>,
    pub term: f64,
    /// Natural accuracy on the monitoring set, when one was given.
    pub accuracy: Vec<Option<f64>>,
}

/// Extra term coupling the two networks of a pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairObjective {
    /// Independent training.
    None,
    /// `(D_t − ‖θ₁−θ₂‖²)²`.
    Distance { target: f64 },
    /// Correlation loss between the tagged features.
    Decorrelate,
}

/// Two identically shaped classifiers with their optimizer states.
#[derive(Debug, Clone)]
pub struct PairState<T> {
    pub arch: ModelSpec,
    pub models: [Model<T>; 2],
    pub opts: [Adam<T>; 2],
    pub log: Vec<EpochLog>,
    /// Set once the pair has been trained, here or elsewhere.
    pub trained: bool,
}

impl<T: Real> PairState<T> {
    /// Freshly initialized pair; the two members get different seeds.
    pub fn new(arch: ModelSpec, seed: u64, lr: f64) -> Result<Self> {
        let m1 = Model::init(arch.clone(), rng::derive(seed, 1))?;
        let m2 = Model::init(arch.clone(), rng::derive(seed, 2))?;
        Ok(PairState {
            arch,
            models: [m1, m2],
            opts: [Adam::new(lr), Adam::new(lr)],
            log: Vec::new(),
            trained: false,
        })
    }

    /// Pair of already trained classifiers with fresh optimizer state.
    pub fn from_trained(models: [Model<T>; 2], lr: f64) -> Result<Self> {
        if models[0].spec != models[1].spec {
            return Err(Error::Config("pair members must share an architecture".into()));
        }
        Ok(PairState {
            arch: models[0].spec.clone(),
            models,
            opts: [Adam::new(lr), Adam::new(lr)],
            log: Vec::new(),
            trained: true,
        })
    }

    pub fn distance(&self) -> Result<f64> {
        crate::models::param_distance(&self.models[0].params, &self.models[1].params)
    }
}

/// Maps numeric breakdowns to a training failure at `epoch`.
fn at_epoch(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::TrainingFailure { reason, .. } => Error::TrainingFailure { epoch, reason },
        Error::Degenerate(_) | Error::RankDeficient { .. } | Error::Domain { .. } => {
            Error::TrainingFailure {
                epoch,
                reason: e.to_string(),
            }
        }
        other => other,
    }
}

fn finite_or_fail(v: f64, epoch: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingFailure {
            epoch,
            reason: format!("{what} is {v}"),
        })
    }
}

fn accumulate(tape: &mut Tape<impl Real>, acc: Option<Var>, v: Var) -> Result<Var> {
    match acc {
        None => Ok(v),
        Some(a) => tape.add(a, v),
    }
}

fn feature_node(f: Option<Var>, name: &str) -> Result<Var> {
    f.ok_or_else(|| Error::Contract(format!("{name} has no feature layer")))
}

/// One optimizer step on `params` from a finished backward pass.
fn apply_step<T: Real>(
    params: &mut ParamSet<T>,
    opt: &mut Adam<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    stats: &[(String, crate::tape::BatchStats<T>)],
) -> Result<()> {
    opt.step(params, grads)?;
    params.apply_batch_stats(stats);
    Ok(())
}

fn monitor<T: Real>(models: &[&Model<T>], eval: Option<&Dataset>) -> Result<Vec<Option<f64>>> {
    models
        .iter()
        .map(|m| eval.map(|d| m.accuracy(d)).transpose())
        .collect()
}

/// Trains both members of `state` for `cfg.epochs` more epochs under the
/// given coupling, appending to its log.
pub fn train_pair<T: Real>(
    state: &mut PairState<T>,
    objective: PairObjective,
    cfg: &TrainConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
) -> Result<()> {
    cfg.validate(train.len())?;
    if objective == PairObjective::Decorrelate {
        let m = state.arch.feature_width()?;
        if cfg.batch_size <= m {
            return Err(Error::Config(format!(
                "batch size {} must exceed feature width {m}",
                cfg.batch_size
            )));
        }
    }
    if let PairObjective::Distance { target } = objective {
        if !(target > 0.0) {
            return Err(Error::Config(format!("target distance {target} must be positive")));
        }
    }
    for o in &mut state.opts {
        o.lr = cfg.learning_rate;
    }
    let first = state.log.len();
    for epoch in first..first + cfg.epochs {
        let fail = at_epoch(epoch);
        let (mut ce_sum, mut term_sum, mut nb) = ([0.0; 2], 0.0, 0usize);
        for idx in batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64, true)? {
            let (x, y) = train.batch::<T>(&idx);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let [m1, m2] = &state.models;
            let mut b1 = Binder::new(&m1.params, Mode::Train);
            let mut b2 = Binder::new(&m2.params, Mode::Train);
            let (o1, f1) = b1.forward(&mut tape, &state.arch, "", xv)?;
            let (o2, f2) = b2.forward(&mut tape, &state.arch, "", xv)?;
            let ce1 = tape.softmax_cross_entropy(o1, &y)?;
            let ce2 = tape.softmax_cross_entropy(o2, &y)?;
            let mut loss = tape.add(ce1, ce2)?;
            let term = match objective {
                PairObjective::None => 0.0,
                PairObjective::Distance { target } => {
                    let mut d = None;
                    for (name, &v1) in b1.vars() {
                        let v2 = *b2
                            .vars()
                            .get(name)
                            .ok_or_else(|| Error::Contract(format!("{name} unbound")))?;
                        let diff = tape.sub(v1, v2)?;
                        let sq = tape.square(diff);
                        let s = tape.sum(sq);
                        d = Some(accumulate(&mut tape, d, s)?);
                    }
                    let d = d.ok_or_else(|| Error::Contract("model has no parameters".into()))?;
                    let neg = tape.scale(d, -T::one());
                    let gap = tape.add_scalar(neg, T::of(target));
                    let t = tape.square(gap);
                    let w = tape.scale(t, T::of(cfg.lambda));
                    loss = tape.add(loss, w)?;
                    tape.value(t).item().as_f64()
                }
                PairObjective::Decorrelate => {
                    let z1 = feature_node(f1, &state.arch.name)?;
                    let z2 = feature_node(f2, &state.arch.name)?;
                    let (lr, _) = corr::correlation_loss(&mut tape, z1, z2, corr::DEFAULT_EPS).map_err(&fail)?;
                    let w = tape.scale(lr, T::of(cfg.lambda));
                    loss = tape.add(loss, w)?;
                    tape.value(lr).item().as_f64()
                }
            };
            let lv = tape.value(loss).item().as_f64();
            finite_or_fail(lv, epoch, "loss")?;
            tape.backward(loss)?;
            let (g1, s1) = (b1.grads(&tape), b1.take_stats());
            let (g2, s2) = (b2.grads(&tape), b2.take_stats());
            ce_sum[0] += tape.value(ce1).item().as_f64();
            ce_sum[1] += tape.value(ce2).item().as_f64();
            term_sum += term;
            nb += 1;
            let [m1, m2] = &mut state.models;
            let [a1, a2] = &mut state.opts;
            apply_step(&mut m1.params, a1, &g1, &s1).map_err(&fail)?;
            apply_step(&mut m2.params, a2, &g2, &s2).map_err(&fail)?;
        }
        let nbf = nb as f64;
        let accuracy = monitor(&[&state.models[0], &state.models[1]], eval)?;
        state.log.push(EpochLog {
            epoch,
            loss: vec![ce_sum[0] / nbf, ce_sum[1] / nbf],
            term: term_sum / nbf,
            accuracy,
        });
    }
    state.trained = true;
    Ok(())
}

/// Pair pulled towards squared parameter distance `target`.
pub fn train_pair_distance<T: Real>(
    arch: &ModelSpec,
    target: f64,
    cfg: &TrainConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
) -> Result<PairState<T>> {
    let mut st = PairState::new(arch.clone(), cfg.seed, cfg.learning_rate)?;
    train_pair(&mut st, PairObjective::Distance { target }, cfg, train, eval)?;
    Ok(st)
}

/// Pair with (`decorrelate`) or without the correlation penalty.
pub fn train_pair_decorrelated<T: Real>(
    arch: &ModelSpec,
    cfg: &TrainConfig,
    decorrelate: bool,
    train: &Dataset,
    eval: Option<&Dataset>,
) -> Result<PairState<T>> {
    let mut st = PairState::new(arch.clone(), cfg.seed, cfg.learning_rate)?;
    let obj = if decorrelate {
        PairObjective::Decorrelate
    } else {
        PairObjective::None
    };
    train_pair(&mut st, obj, cfg, train, eval)?;
    Ok(st)
}

/// Dual-neck autoencoder: `MSE₁² + MSE₂² + λ·L_R(bottleneck₁, bottleneck₂)`.
pub fn train_dna<T: Real>(spec: &DnaSpec, cfg: &TrainConfig, train: &Dataset) -> Result<(Dna<T>, Vec<EpochLog>)> {
    cfg.validate(train.len())?;
    let m = spec.bottleneck_a.feature_width()?;
    if cfg.batch_size <= m {
        return Err(Error::Config(format!(
            "batch size {} must exceed bottleneck width {m}",
            cfg.batch_size
        )));
    }
    let mut dna = Dna::init(spec.clone(), cfg.seed)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let fail = at_epoch(epoch);
        let (mut rec, mut term_sum, mut nb) = ([0.0; 2], 0.0, 0usize);
        for idx in batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64, true)? {
            let (x, _) = train.batch::<T>(&idx);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let mut b = Binder::new(&dna.params, Mode::Train);
            let f = spec.forward(&mut tape, &mut b, xv)?;
            let mut loss = None;
            for (p, &r) in f.recon.iter().enumerate() {
                let e = tape.mse(r, xv)?;
                let sq = tape.square(e);
                rec[p] += tape.value(sq).item().as_f64();
                loss = Some(accumulate(&mut tape, loss, sq)?);
            }
            let mut loss = loss.expect("two pathways");
            if cfg.lambda != 0.0 {
                let (lr, _) = corr::correlation_loss(&mut tape, f.features[0], f.features[1], corr::DEFAULT_EPS)
                    .map_err(&fail)?;
                term_sum += tape.value(lr).item().as_f64();
                let w = tape.scale(lr, T::of(cfg.lambda));
                loss = tape.add(loss, w)?;
            }
            finite_or_fail(tape.value(loss).item().as_f64(), epoch, "loss")?;
            tape.backward(loss)?;
            let (g, s) = (b.grads(&tape), b.take_stats());
            apply_step(&mut dna.params, &mut opt, &g, &s).map_err(&fail)?;
            nb += 1;
        }
        let nbf = nb as f64;
        log.push(EpochLog {
            epoch,
            loss: vec![rec[0] / nbf, rec[1] / nbf],
            term: term_sum / nbf,
            accuracy: Vec::new(),
        });
    }
    Ok((dna, log))
}

/// Single-bottleneck autoencoder trained on plain MSE.
pub fn train_autoencoder<T: Real>(spec: &ModelSpec, cfg: &TrainConfig, train: &Dataset) -> Result<(Model<T>, Vec<EpochLog>)> {
    cfg.validate(train.len())?;
    let mut model = Model::init(spec.clone(), cfg.seed)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let fail = at_epoch(epoch);
        let (mut total, mut nb) = (0.0, 0usize);
        for idx in batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64, true)? {
            let (x, _) = train.batch::<T>(&idx);
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let mut b = Binder::new(&model.params, Mode::Train);
            let (r, _) = b.forward(&mut tape, spec, "", xv)?;
            let loss = tape.mse(r, xv)?;
            let lv = tape.value(loss).item().as_f64();
            finite_or_fail(lv, epoch, "loss")?;
            tape.backward(loss)?;
            let (g, s) = (b.grads(&tape), b.take_stats());
            apply_step(&mut model.params, &mut opt, &g, &s).map_err(&fail)?;
            total += lv;
            nb += 1;
        }
        log.push(EpochLog {
            epoch,
            loss: vec![total / nb as f64],
            term: 0.0,
            accuracy: Vec::new(),
        });
    }
    Ok((model, log))
}

/// What a classifier sees during training.
#[derive(Clone, Copy)]
pub enum InputSource<'a, T> {
    Raw,
    /// Reconstructions of a frozen dual-neck autoencoder; each sample takes
    /// one pathway, drawn uniformly per sample and epoch.
    Dna(&'a Dna<T>),
    /// Reconstructions of a frozen single-bottleneck autoencoder.
    Autoencoder(&'a Model<T>),
}

impl<T: Real> InputSource<'_, T> {
    /// Inputs for a batch under this source. Frozen models run in inference
    /// mode, outside the training tape.
    pub fn prepare(&self, x: Tensor<T>, rng: &mut rng::Stream) -> Result<Tensor<T>> {
        match self {
            InputSource::Raw => Ok(x),
            InputSource::Autoencoder(ae) => ae.outputs(&x),
            InputSource::Dna(dna) => {
                let [a, b] = dna.reconstruct(&x)?;
                let d = a.row_len();
                let mut out = a;
                for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
                    if rng.random::<bool>() {
                        row.copy_from_slice(&b.data()[i * d..(i + 1) * d]);
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Plain cross-entropy training of one classifier.
pub fn train_classifier<T: Real>(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train: &Dataset,
    source: InputSource<'_, T>,
    eval: Option<&Dataset>,
) -> Result<(Model<T>, Vec<EpochLog>)> {
    cfg.validate(train.len())?;
    let mut model = Model::init(spec.clone(), cfg.seed)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut mix = rng::seeded(rng::derive(cfg.seed, 0x5eed));
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let fail = at_epoch(epoch);
        let (mut total, mut nb) = (0.0, 0usize);
        for idx in batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64, true)? {
            let (x, y) = train.batch::<T>(&idx);
            let x = source.prepare(x, &mut mix)?;
            let lv = classifier_step(&mut model, &mut opt, x, &y).map_err(&fail)?;
            finite_or_fail(lv, epoch, "loss")?;
            total += lv;
            nb += 1;
        }
        let accuracy = monitor(&[&model], eval)?;
        log.push(EpochLog {
            epoch,
            loss: vec![total / nb as f64],
            term: 0.0,
            accuracy,
        });
    }
    Ok((model, log))
}

/// One cross-entropy step; returns the batch loss.
fn classifier_step<T: Real>(model: &mut Model<T>, opt: &mut Adam<T>, x: Tensor<T>, y: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let mut b = Binder::new(&model.params, Mode::Train);
    let (o, _) = b.forward(&mut tape, &model.spec, "", xv)?;
    let loss = tape.softmax_cross_entropy(o, y)?;
    let lv = tape.value(loss).item().as_f64();
    if !lv.is_finite() {
        return Err(Error::TrainingFailure {
            epoch: 0,
            reason: format!("loss is {lv}"),
        });
    }
    tape.backward(loss)?;
    let (g, s) = (b.grads(&tape), b.take_stats());
    apply_step(&mut model.params, opt, &g, &s)?;
    Ok(lv)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DvergeConfig {
    pub epochs: usize,
    /// ℓ∞ radius of the feature-distillation search around the target input.
    pub eps_d: f64,
    pub inner_steps: usize,
    /// Inner sign-descent step; `None` means `eps_d / 4`.
    pub inner_step: Option<f64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DvergeConfig {
    fn default() -> Self {
        DvergeConfig {
            epochs: 10,
            eps_d: 0.07,
            inner_steps: 10,
            inner_step: None,
            batch_size: 500,
            learning_rate: 5e-3,
            seed: 0,
        }
    }
}

/// Sample near `x_t` (within `eps_d` in ℓ∞ and inside `[0, 1]`) whose
/// tagged features under `model` approach those of `x_s`. Sign-gradient
/// descent without momentum.
pub fn distill<T: Real>(
    model: &Model<T>,
    x_s: &Tensor<T>,
    x_t: &Tensor<T>,
    eps_d: f64,
    steps: usize,
    step: f64,
) -> Result<Tensor<T>> {
    if x_s.shape() != x_t.shape() {
        return Err(Error::shape("distill", x_s.shape(), x_t.shape()));
    }
    let target = model.features(x_s)?;
    let mut xp = x_t.clone();
    if eps_d == 0.0 {
        return Ok(xp);
    }
    let (r, st) = (T::of(eps_d), T::of(step));
    for _ in 0..steps {
        let mut tape = Tape::new();
        let xv = tape.param(xp.clone());
        let (_, f) = model.forward_eval(&mut tape, xv)?;
        let f = feature_node(f, &model.spec.name)?;
        let tv = tape.constant(target.clone());
        let d = tape.sub(f, tv)?;
        let sq = tape.square(d);
        let loss = tape.sum(sq);
        tape.backward(loss)?;
        let g = tape.take_grad(xv).unwrap_or_else(|| Tensor::zeros(xp.shape()));
        for ((a, &gi), &o) in xp.data_mut().iter_mut().zip(g.data()).zip(x_t.data()) {
            let v = *a - st * crate::tensor::sgn(gi);
            *a = v.max(o - r).min(o + r).max(T::zero()).min(T::one());
        }
    }
    Ok(xp)
}

/// Cross-trains a pair on each other's distilled-feature samples: model `i`
/// learns to give `y_t` to inputs that stay close to `x_t` but look like an
/// unrelated `x_s` to model `1 − i`'s feature layer. The label follows the
/// input the sample stays near, so neither model is taught to rely on the
/// other's brittle features.
pub fn dverge_finetune<T: Real>(mut pair: PairState<T>, cfg: &DvergeConfig, train: &Dataset) -> Result<PairState<T>> {
    if !pair.trained {
        return Err(Error::Contract("dverge fine-tuning needs a trained pair".into()));
    }
    if cfg.epochs == 0 || !(cfg.eps_d >= 0.0) {
        return Err(Error::Config("dverge needs epochs > 0 and eps_d ≥ 0".into()));
    }
    pair.arch.feature_width()?;
    let step = cfg.inner_step.unwrap_or(cfg.eps_d / 4.0);
    for o in &mut pair.opts {
        o.lr = cfg.learning_rate;
    }
    let first = pair.log.len();
    for epoch in first..first + cfg.epochs {
        let fail = at_epoch(epoch);
        let mut ce = [0.0; 2];
        let mut nb = 0usize;
        let src = batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64, true)?;
        let tgt = batches(train.len(), cfg.batch_size, rng::derive(cfg.seed, 0xd7), epoch as u64, true)?;
        for (si, ti) in src.zip(tgt) {
            let (xs, _) = train.batch::<T>(&si);
            let (xt, yt) = train.batch::<T>(&ti);
            let distilled = [
                distill(&pair.models[0], &xs, &xt, cfg.eps_d, cfg.inner_steps, step)?,
                distill(&pair.models[1], &xs, &xt, cfg.eps_d, cfg.inner_steps, step)?,
            ];
            for i in 0..2 {
                let x = distilled[1 - i].clone();
                ce[i] += classifier_step(&mut pair.models[i], &mut pair.opts[i], x, &yt).map_err(&fail)?;
            }
            nb += 1;
        }
        let accuracy = monitor(&[&pair.models[0], &pair.models[1]], None)?;
        pair.log.push(EpochLog {
            epoch,
            loss: vec![ce[0] / nb as f64, ce[1] / nb as f64],
            term: 0.0,
            accuracy,
        });
    }
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::models::{build_dna_mnist, build_fc_classifier, Layer, OutputKind};

    fn tiny_arch() -> ModelSpec {
        ModelSpec {
            name: "tiny".into(),
            input_shape: vec![1, 1, 8],
            layers: vec![
                Layer::Flatten,
                Layer::Linear { out: 6 },
                Layer::Relu,
                Layer::Linear { out: 3 },
            ],
            feature_tag: Some(2),
            output_kind: OutputKind::Logits,
        }
    }

    fn cfg(epochs: usize, bs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: bs,
            learning_rate: 5e-3,
            lambda: 0.05,
            seed: 3,
        }
    }

    #[test]
    fn pair_training_is_deterministic_and_learns() {
        let ds = synth_blobs(40, 3, 8, 2.0, 1).unwrap();
        let a = train_pair_decorrelated::<f64>(&tiny_arch(), &cfg(15, 20), true, &ds, Some(&ds)).unwrap();
        let b = train_pair_decorrelated::<f64>(&tiny_arch(), &cfg(15, 20), true, &ds, Some(&ds)).unwrap();
        assert_eq!(a.models[0], b.models[0]);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 15);
        let last = a.log.last().unwrap();
        assert!(last.loss[0] < a.log[0].loss[0]);
        assert!(last.accuracy[0].unwrap() > 0.9);
    }

    #[test]
    fn batch_must_exceed_feature_width() {
        let ds = synth_blobs(10, 3, 8, 2.0, 1).unwrap();
        let err = train_pair_decorrelated::<f64>(&tiny_arch(), &cfg(1, 6), true, &ds, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        // Without the penalty the same batch size is fine.
        assert!(train_pair_decorrelated::<f64>(&tiny_arch(), &cfg(1, 6), false, &ds, None).is_ok());
    }

    #[test]
    fn zero_lambda_distance_matches_independent_training() {
        let ds = synth_blobs(20, 3, 8, 2.0, 1).unwrap();
        let mut c = cfg(3, 10);
        c.lambda = 0.0;
        let d = train_pair_distance::<f64>(&tiny_arch(), 100.0, &c, &ds, None).unwrap();
        let n = train_pair_decorrelated::<f64>(&tiny_arch(), &c, false, &ds, None).unwrap();
        for i in 0..2 {
            let diff = crate::models::param_distance(&d.models[i].params, &n.models[i].params).unwrap();
            assert!(diff < 1e-20, "{diff}");
        }
    }

    #[test]
    fn distance_term_pulls_towards_target() {
        let ds = synth_blobs(20, 3, 8, 2.0, 1).unwrap();
        let mut c = cfg(30, 10);
        c.lambda = 1.0;
        let st = PairState::<f64>::new(tiny_arch(), c.seed, c.learning_rate).unwrap();
        let start = st.distance().unwrap();
        let target = start + 5.0;
        let d = train_pair_distance::<f64>(&tiny_arch(), target, &c, &ds, None).unwrap();
        let end = d.distance().unwrap();
        assert!((end - target).abs() < 0.2 * target, "start {start} end {end} target {target}");
    }

    #[test]
    fn correlation_term_reaches_both_models() {
        let ds = synth_blobs(20, 3, 8, 2.0, 1).unwrap();
        let st = PairState::<f64>::new(tiny_arch(), 1, 5e-3).unwrap();
        let (x, _) = ds.batch::<f64>(&(0..20).collect::<Vec<_>>());
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut b1 = Binder::new(&st.models[0].params, Mode::Train);
        let mut b2 = Binder::new(&st.models[1].params, Mode::Train);
        let (_, f1) = b1.forward(&mut tape, &st.arch, "", xv).unwrap();
        let (_, f2) = b2.forward(&mut tape, &st.arch, "", xv).unwrap();
        let (l, _) = corr::correlation_loss(&mut tape, f1.unwrap(), f2.unwrap(), 1e-3).unwrap();
        tape.backward(l).unwrap();
        for b in [&b1, &b2] {
            let g = &b.grads(&tape)["1.weight"];
            assert!(g.max_abs() > 0.0);
        }
    }

    #[test]
    fn nan_data_fails_with_epoch() {
        let ds = synth_blobs(10, 3, 8, 2.0, 1).unwrap();
        let mut c = cfg(2, 10);
        c.lambda = 0.0;
        let mut st = PairState::<f64>::new(tiny_arch(), 0, 1.0).unwrap();
        // Poison a weight so the very first loss is non-finite.
        st.models[0].params.params.get_mut("3.bias").unwrap().data_mut()[0] = f64::NAN;
        let err = train_pair(&mut st, PairObjective::None, &c, &ds, None).unwrap_err();
        assert!(matches!(err, Error::TrainingFailure { epoch: 0, .. }), "{err:?}");
    }

    #[test]
    fn classifier_overfits_small_subset() {
        let ds = synth_blobs(16, 4, 784, 1.0, 5).unwrap();
        let mut c = TrainConfig::classifier().with_epochs(50);
        c.batch_size = 16;
        let (m, log) = train_classifier::<f32>(&build_fc_classifier(), &c, &ds, InputSource::Raw, None).unwrap();
        // 50 epochs of 4 batches = 200 steps.
        assert_eq!(log.len(), 50);
        assert_eq!(m.accuracy(&ds).unwrap(), 1.0);
    }

    #[test]
    fn dna_training_lowers_reconstruction_error_and_leaves_dna_frozen() {
        let ds = synth_blobs(30, 3, 784, 1.0, 5).unwrap();
        let spec = build_dna_mnist(2).unwrap();
        let mut c = TrainConfig::dna_mnist().with_epochs(8);
        c.batch_size = 90;
        let (dna, log) = train_dna::<f32>(&spec, &c, &ds).unwrap();
        assert!(log[7].loss[0] < log[0].loss[0]);
        assert!(log[7].loss[1] < log[0].loss[1]);
        let before = dna.params.clone();
        let mut cc = TrainConfig::classifier().with_epochs(1);
        cc.batch_size = 30;
        train_classifier(&crate::models::build_eval_classifier_mnist(), &cc, &ds, InputSource::Dna(&dna), None)
            .unwrap();
        assert_eq!(before, dna.params);
    }

    #[test]
    fn dverge_requires_trained_pair_and_keeps_radius() {
        let ds = synth_blobs(20, 3, 8, 2.0, 1).unwrap();
        let fresh = PairState::<f64>::new(tiny_arch(), 0, 5e-3).unwrap();
        let dc = DvergeConfig {
            epochs: 1,
            batch_size: 10,
            ..DvergeConfig::default()
        };
        assert!(matches!(dverge_finetune(fresh, &dc, &ds), Err(Error::Contract(_))));

        let pair = train_pair_decorrelated::<f64>(&tiny_arch(), &cfg(2, 10), false, &ds, None).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        let (xs, _) = ds.batch::<f64>(&idx);
        let (xt, _) = ds.batch::<f64>(&(10..20).collect::<Vec<_>>());
        let xp = distill(&pair.models[0], &xs, &xt, 0.07, 10, 0.0175).unwrap();
        assert!(xp.max_abs_diff(&xt) <= 0.07 + 1e-15);
        assert_eq!(distill(&pair.models[0], &xs, &xt, 0.0, 10, 0.0).unwrap(), xt);
        let tuned = dverge_finetune(pair, &dc, &ds).unwrap();
        assert_eq!(tuned.log.len(), 3);
    }

    #[test]
    fn dverge_keeps_a_trained_pair_accurate() {
        // Distilled samples stay within eps_d of their anchor, so labelling
        // them by the anchor must not undo what the pair has learnt.
        let ds = synth_blobs(40, 3, 8, 2.0, 1).unwrap();
        let pair = train_pair_decorrelated::<f64>(&tiny_arch(), &cfg(15, 20), false, &ds, None).unwrap();
        let dc = DvergeConfig {
            epochs: 40,
            batch_size: 10,
            ..DvergeConfig::default()
        };
        let tuned = dverge_finetune(pair, &dc, &ds).unwrap();
        let (x, y) = ds.batch::<f64>(&(0..ds.len()).collect::<Vec<_>>());
        for m in &tuned.models {
            let acc = crate::metrics::accuracy(&m.predict(&x).unwrap(), &y);
            assert!(acc > 0.9, "{acc}");
        }
    }
}
