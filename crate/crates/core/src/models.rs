//! Declarative network blueprints and their parameters.
//!
//! A [`ModelSpec`] is an ordered list of [`Layer`]s over a per-sample input
//! shape, with one optional tagged layer whose flattened output serves as
//! the feature batch for correlation measurements. Parameters live in a
//! [`ParamSet`] keyed by `"{prefix}{layer}.{name}"`.
//!
//! Forward passes go through a [`Binder`], which registers each parameter
//! on the tape at most once. Two pathways that resolve to the same name thus
//! share one tape node, and their gradients add up there. This is how the
//! dual-neck autoencoder shares its outer layers.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Batchnorm variance stabilizer.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum Layer {
    Linear { out: usize },
    /// Stride-1 "same" convolution with an odd square kernel (3 or 1).
    Conv { out: usize, kernel: usize },
    MaxPool2,
    AvgPool { window: usize },
    BatchNorm,
    Relu,
    Sigmoid,
    Flatten,
    /// Per-sample target shape.
    Reshape { shape: Vec<usize> },
    /// 2×2 stride-2 transposed convolution.
    Deconv { out: usize },
    /// `x + relu(bn(conv(relu(bn(conv(x))))))` with 3×3 convolutions.
    Residual { channels: usize },
}

impl Layer {
    fn has_params(&self) -> bool {
        matches!(
            self,
            Layer::Linear { .. }
                | Layer::Conv { .. }
                | Layer::Deconv { .. }
                | Layer::Residual { .. }
                | Layer::BatchNorm
        )
    }

    /// Layers that open a new weight "stage"; batchnorm attaches to the
    /// preceding stage.
    fn starts_stage(&self) -> bool {
        self.has_params() && !matches!(self, Layer::BatchNorm)
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Error::dim("shape_inference", msg);
        let spatial = |s: &[usize]| -> Result<(usize, usize, usize)> {
            if s.len() != 3 {
                return Err(bad(format!("{self:?} needs C×H×W input, got {s:?}")));
            }
            Ok((s[0], s[1], s[2]))
        };
        Ok(match self {
            Layer::Linear { out } => {
                if s.len() != 1 {
                    return Err(bad(format!("linear needs a flat input, got {s:?}")));
                }
                vec![*out]
            }
            Layer::Conv { out, kernel } => {
                spatial(s)?;
                if kernel % 2 == 0 {
                    return Err(bad(format!("kernel {kernel} is not odd")));
                }
                vec![*out, s[1], s[2]]
            }
            Layer::MaxPool2 => {
                let (c, h, w) = spatial(s)?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(bad(format!("max pool over odd size {s:?}")));
                }
                vec![c, h / 2, w / 2]
            }
            Layer::AvgPool { window } => {
                let (c, h, w) = spatial(s)?;
                if *window == 0 || h % window != 0 || w % window != 0 {
                    return Err(bad(format!("avg pool {window} over {s:?}")));
                }
                vec![c, h / window, w / window]
            }
            Layer::BatchNorm => {
                if s.len() != 1 && s.len() != 3 {
                    return Err(bad(format!("batchnorm over {s:?}")));
                }
                s.to_vec()
            }
            Layer::Relu | Layer::Sigmoid => s.to_vec(),
            Layer::Flatten => vec![s.iter().product()],
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != s.iter().product::<usize>() {
                    return Err(Error::shape("reshape", s, shape));
                }
                shape.clone()
            }
            Layer::Deconv { out } => {
                let (_, h, w) = spatial(s)?;
                vec![*out, 2 * h, 2 * w]
            }
            Layer::Residual { channels } => {
                let (c, _, _) = spatial(s)?;
                if c != *channels {
                    return Err(bad(format!("residual({channels}) over {c} channels")));
                }
                s.to_vec()
            }
        })
    }

    /// `(suffix, shape, fan_in)` of each trainable tensor; fan-in 0 marks a
    /// bias, `usize::MAX` a batchnorm scale.
    fn param_shapes(&self, s: &[usize]) -> Vec<(String, Vec<usize>, usize)> {
        let bn = |pre: &str, c: usize| {
            vec![
                (format!("{pre}gamma"), vec![c], usize::MAX),
                (format!("{pre}beta"), vec![c], 0),
            ]
        };
        match self {
            Layer::Linear { out } => vec![
                ("weight".into(), vec![s[0], *out], s[0]),
                ("bias".into(), vec![*out], 0),
            ],
            Layer::Conv { out, kernel } => vec![
                ("weight".into(), vec![*out, s[0], *kernel, *kernel], s[0] * kernel * kernel),
                ("bias".into(), vec![*out], 0),
            ],
            Layer::Deconv { out } => vec![
                ("weight".into(), vec![s[0], *out, 2, 2], s[0]),
                ("bias".into(), vec![*out], 0),
            ],
            Layer::BatchNorm => bn("", s[0]),
            Layer::Residual { channels: c } => {
                let mut v = Vec::new();
                for k in 1..=2 {
                    v.push((format!("conv{k}.weight"), vec![*c, *c, 3, 3], c * 9));
                    v.push((format!("conv{k}.bias"), vec![*c], 0));
                    v.extend(bn(&format!("bn{k}."), *c));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Prefixes (relative to the layer) of batchnorm running statistics.
    fn bn_slots(&self, s: &[usize]) -> Vec<(String, usize)> {
        match self {
            Layer::BatchNorm => vec![(String::new(), s[0])],
            Layer::Residual { channels } => {
                vec![("bn1.".into(), *channels), ("bn2.".into(), *channels)]
            }
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OutputKind {
    Logits,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
    /// Layer whose flattened output is the feature batch.
    pub feature_tag: Option<usize>,
    pub output_kind: OutputKind,
}

impl ModelSpec {
    /// Per-sample output shape of every layer, in order.
    pub fn trace(&self) -> Result<Vec<Vec<usize>>> {
        trace_from(&self.layers, &self.input_shape)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.trace()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    /// Width of the flattened tagged layer.
    pub fn feature_width(&self) -> Result<usize> {
        let tag = self
            .feature_tag
            .ok_or_else(|| Error::Contract(format!("{} has no feature layer", self.name)))?;
        let tr = self.trace()?;
        tr.get(tag)
            .map(|s| s.iter().product())
            .ok_or_else(|| Error::Contract(format!("feature tag {tag} out of range")))
    }

    /// Checks shape inference and the feature tag.
    pub fn validate(&self) -> Result<()> {
        let tr = self.trace()?;
        if let Some(tag) = self.feature_tag {
            if tag >= tr.len() {
                return Err(Error::Contract(format!(
                    "{}: feature tag {tag} beyond {} layers",
                    self.name,
                    tr.len()
                )));
            }
        }
        Ok(())
    }

    pub fn init<T: Real>(&self, prefix: &str, rng: &mut Stream) -> Result<ParamSet<T>> {
        let mut ps = ParamSet::default();
        ps.add_fragment(&self.layers, &self.input_shape, |i| format!("{prefix}{i}."), rng)?;
        Ok(ps)
    }
}

fn trace_from(layers: &[Layer], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut s = input.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        s = l.out_shape(&s)?;
        out.push(s.clone());
    }
    Ok(out)
}

/// Named trainable tensors plus non-trainable buffers (batchnorm running
/// statistics).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    fn add_fragment(
        &mut self,
        layers: &[Layer],
        input: &[usize],
        prefix: impl Fn(usize) -> String,
        rng: &mut Stream,
    ) -> Result<()> {
        let mut s = input.to_vec();
        for (i, l) in layers.iter().enumerate() {
            let pre = prefix(i);
            for (suffix, shape, fan_in) in l.param_shapes(&s) {
                let name = format!("{pre}{suffix}");
                if self.params.contains_key(&name) {
                    continue;
                }
                let t = match fan_in {
                    0 => Tensor::zeros(&shape),
                    usize::MAX => Tensor::full(&shape, T::one()),
                    f => {
                        let bound = num_traits::Float::sqrt(6.0 / f as f64);
                        rng::uniform(rng, &shape, -bound, bound)
                    }
                };
                self.params.insert(name, t);
            }
            for (slot, c) in l.bn_slots(&s) {
                self.buffers
                    .entry(format!("{pre}{slot}running_mean"))
                    .or_insert_with(|| Tensor::zeros(&[c]));
                self.buffers
                    .entry(format!("{pre}{slot}running_var"))
                    .or_insert_with(|| Tensor::full(&[c], T::one()));
            }
            s = l.out_shape(&s)?;
        }
        Ok(())
    }

    /// Total number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_batch_stats(&mut self, stats: &[(String, BatchStats<T>)]) {
        let m = T::of(BN_MOMENTUM);
        for (pre, st) in stats {
            for (slot, vals) in [("running_mean", &st.mean), ("running_var", &st.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{pre}{slot}")) {
                    for (b, &v) in buf.data_mut().iter_mut().zip(vals) {
                        *b = (T::one() - m) * *b + m * v;
                    }
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Squared Euclidean distance over all trainable parameters (buffers are
/// excluded).
pub fn param_distance<T: Real>(p1: &ParamSet<T>, p2: &ParamSet<T>) -> Result<f64> {
    if p1.params.len() != p2.params.len() {
        return Err(Error::Contract("parameter sets differ in layout".into()));
    }
    let mut total = 0.0;
    for ((n1, a), (n2, b)) in p1.params.iter().zip(&p2.params) {
        if n1 != n2 || a.shape() != b.shape() {
            return Err(Error::Contract(format!("layout mismatch at {n1} / {n2}")));
        }
        total += a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum::<f64>();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Trainable parameters, batchnorm on batch statistics.
    Train,
    /// Frozen parameters, batchnorm on running statistics.
    Eval,
}

/// Registers parameters on a tape on first use and remembers their nodes.
pub struct Binder<'p, T: Real> {
    params: &'p ParamSet<T>,
    vars: BTreeMap<String, Var>,
    mode: Mode,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'p, T: Real> Binder<'p, T> {
    pub fn new(params: &'p ParamSet<T>, mode: Mode) -> Self {
        Binder {
            params,
            vars: BTreeMap::new(),
            mode,
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn var(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        let v = tape.leaf(t.clone(), self.mode == Mode::Train);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn buffer(&self, name: &str) -> Result<&[T]> {
        self.params
            .buffers
            .get(name)
            .map(|t| t.data())
            .ok_or_else(|| Error::Contract(format!("missing buffer {name}")))
    }

    /// Gradients of every bound parameter after a backward pass.
    pub fn grads(&self, tape: &Tape<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Batch statistics gathered by training-mode batchnorm layers.
    pub fn take_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        core::mem::take(&mut self.stats)
    }

    fn batchnorm(&mut self, tape: &mut Tape<T>, pre: &str, x: Var) -> Result<Var> {
        let g = self.var(tape, &format!("{pre}gamma"))?;
        let b = self.var(tape, &format!("{pre}beta"))?;
        let eps = T::of(BN_EPS);
        match self.mode {
            Mode::Train => {
                let (y, st) = tape.batchnorm_train(x, g, b, eps)?;
                self.stats.push((pre.to_string(), st));
                Ok(y)
            }
            Mode::Eval => {
                let rm = self.buffer(&format!("{pre}running_mean"))?.to_vec();
                let rv = self.buffer(&format!("{pre}running_var"))?.to_vec();
                tape.batchnorm_eval(x, g, b, &rm, &rv, eps)
            }
        }
    }

    fn conv(&mut self, tape: &mut Tape<T>, pre: &str, x: Var) -> Result<Var> {
        let w = self.var(tape, &format!("{pre}weight"))?;
        let b = self.var(tape, &format!("{pre}bias"))?;
        tape.conv2d(x, w, b)
    }

    /// Applies one layer to a batched input; `pre` names its parameters.
    pub fn apply(&mut self, tape: &mut Tape<T>, layer: &Layer, pre: &str, x: Var) -> Result<Var> {
        let n = tape.value(x).rows();
        match layer {
            Layer::Linear { .. } => {
                let w = self.var(tape, &format!("{pre}weight"))?;
                let b = self.var(tape, &format!("{pre}bias"))?;
                tape.affine(x, w, b)
            }
            Layer::Conv { .. } => self.conv(tape, pre, x),
            Layer::MaxPool2 => tape.max_pool2(x),
            Layer::AvgPool { window } => tape.avg_pool(x, *window),
            Layer::BatchNorm => self.batchnorm(tape, pre, x),
            Layer::Relu => Ok(tape.relu(x)),
            Layer::Sigmoid => Ok(tape.sigmoid(x)),
            Layer::Flatten => tape.flatten(x),
            Layer::Reshape { shape } => {
                let mut s = vec![n];
                s.extend_from_slice(shape);
                tape.reshape(x, &s)
            }
            Layer::Deconv { .. } => {
                let w = self.var(tape, &format!("{pre}weight"))?;
                let b = self.var(tape, &format!("{pre}bias"))?;
                tape.deconv2x2(x, w, b)
            }
            Layer::Residual { .. } => {
                let mut h = x;
                for k in 1..=2 {
                    h = self.conv(tape, &format!("{pre}conv{k}."), h)?;
                    h = self.batchnorm(tape, &format!("{pre}bn{k}."), h)?;
                    h = tape.relu(h);
                }
                tape.add(x, h)
            }
        }
    }

    /// Runs a whole spec. Returns the output and, if the spec tags one, the
    /// flattened feature node.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        spec: &ModelSpec,
        prefix: &str,
        x: Var,
    ) -> Result<(Var, Option<Var>)> {
        check_input(tape.value(x), &spec.input_shape)?;
        let mut h = x;
        let mut feat = None;
        for (i, l) in spec.layers.iter().enumerate() {
            h = self.apply(tape, l, &format!("{prefix}{i}."), h)?;
            if spec.feature_tag == Some(i) {
                feat = Some(tape.flatten(h)?);
            }
        }
        Ok((h, feat))
    }
}

fn check_input<T: Real>(x: &Tensor<T>, input_shape: &[usize]) -> Result<()> {
    if x.rank() != input_shape.len() + 1 || &x.shape()[1..] != input_shape {
        let mut want = vec![x.rows()];
        want.extend_from_slice(input_shape);
        return Err(Error::shape("forward", x.shape(), &want));
    }
    Ok(())
}

/// Output, optional feature node and batchnorm statistics of a forward pass.
pub struct Forward<T> {
    pub output: Var,
    pub features: Option<Var>,
    pub stats: Vec<(String, BatchStats<T>)>,
}

/// A spec together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParamSet<T>,
}

/// Samples per forward call in inference helpers.
pub const EVAL_CHUNK: usize = 500;

impl<T: Real> Model<T> {
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = spec.init("", &mut rng::seeded(seed))?;
        Ok(Model { spec, params })
    }

    /// Records an inference-mode forward pass on `tape`.
    pub fn forward_eval(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Option<Var>)> {
        Binder::new(&self.params, Mode::Eval).forward(tape, &self.spec, "", x)
    }

    /// Inference-mode outputs for a batch of any size, evaluated in chunks.
    pub fn outputs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut parts = Vec::new();
        let n = x.rows();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let mut tape = Tape::new();
            let xv = tape.constant(x.slice_rows(start, end));
            let (out, _) = self.forward_eval(&mut tape, xv)?;
            parts.push(tape.value(out).clone());
            start = end;
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat_rows(&refs)
    }

    /// Inference-mode flattened features (`N×M`).
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (_, f) = self.forward_eval(&mut tape, xv)?;
        let f = f.ok_or_else(|| Error::Contract(format!("{} has no feature layer", self.spec.name)))?;
        Ok(tape.value(f).clone())
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.outputs(x)?))
    }

    /// Top-1 accuracy with inference-mode batchnorm.
    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        let idx: Vec<usize> = (0..ds.len()).collect();
        let mut hits = 0;
        for chunk in idx.chunks(EVAL_CHUNK) {
            let (x, y) = ds.batch::<T>(chunk);
            let p = self.predict(&x)?;
            hits += p.iter().zip(&y).filter(|(a, b)| a == b).count();
        }
        Ok(hits as f64 / ds.len().max(1) as f64)
    }
}

/// Index of the largest entry of each row (first on ties).
pub fn argmax_rows<T: Real>(t: &Tensor<T>) -> Vec<usize> {
    let k = t.row_len();
    t.data()
        .chunks(k.max(1))
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Runs `spec` on `x` on the given tape and returns output, flattened
/// features and batch statistics.
pub fn forward_with_features<T: Real>(
    tape: &mut Tape<T>,
    spec: &ModelSpec,
    params: &ParamSet<T>,
    x: Var,
    mode: Mode,
) -> Result<(Forward<T>, BTreeMap<String, Var>)> {
    let mut b = Binder::new(params, mode);
    let (output, features) = b.forward(tape, spec, "", x)?;
    let stats = b.take_stats();
    Ok((
        Forward {
            output,
            features,
            stats,
        },
        b.vars,
    ))
}

// ----- dual-neck autoencoder ---------------------------------------------

/// Encoder, two architecturally identical bottlenecks and a decoder. The
/// `unshared` innermost weight stages of each pathway (counting outward from
/// the bottleneck) carry separate parameters; the rest are shared.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DnaSpec {
    pub name: String,
    pub encoder: ModelSpec,
    pub bottleneck_a: ModelSpec,
    pub bottleneck_b: ModelSpec,
    pub decoder: ModelSpec,
    pub unshared: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fragment {
    Encoder,
    Decoder,
}

fn stages(layers: &[Layer]) -> Vec<usize> {
    let mut g = 0usize;
    let mut seen = false;
    layers
        .iter()
        .map(|l| {
            if l.starts_stage() {
                if seen {
                    g += 1;
                }
                seen = true;
            }
            g
        })
        .collect()
}

fn stage_count(layers: &[Layer]) -> usize {
    layers.iter().filter(|l| l.starts_stage()).count()
}

impl DnaSpec {
    /// Checks shapes, the identical-bottleneck rule and the unshared count.
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_a.layers != self.bottleneck_b.layers
            || self.bottleneck_a.feature_tag != self.bottleneck_b.feature_tag
        {
            return Err(Error::Config("bottlenecks must be architecturally identical".into()));
        }
        let enc = self.encoder.output_shape()?;
        if self.bottleneck_a.input_shape != enc {
            return Err(Error::shape("dna", &enc, &self.bottleneck_a.input_shape));
        }
        let neck = self.bottleneck_a.output_shape()?;
        if self.decoder.input_shape != neck {
            return Err(Error::shape("dna", &neck, &self.decoder.input_shape));
        }
        let out = self.decoder.output_shape()?;
        if out != self.encoder.input_shape {
            return Err(Error::shape("dna", &self.encoder.input_shape, &out));
        }
        self.bottleneck_a.feature_width()?;
        let neck_stages = stage_count(&self.bottleneck_a.layers);
        let max_extra = stage_count(&self.encoder.layers).min(stage_count(&self.decoder.layers));
        let u = self.unshared;
        if u < neck_stages || !(u - neck_stages).is_multiple_of(2) || (u - neck_stages) / 2 > max_extra {
            return Err(Error::Config(format!(
                "unshared layer count {u} not in {{{}}}",
                (0..=max_extra)
                    .map(|k| (neck_stages + 2 * k).to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(())
    }

    fn extra_unshared(&self) -> usize {
        (self.unshared - stage_count(&self.bottleneck_a.layers)) / 2
    }

    fn prefix(&self, frag: Fragment, i: usize, pathway: usize) -> String {
        let k = self.extra_unshared();
        let tag = if pathway == 0 { "a" } else { "b" };
        let (name, layers) = match frag {
            Fragment::Encoder => ("enc", &self.encoder.layers),
            Fragment::Decoder => ("dec", &self.decoder.layers),
        };
        let st = stages(layers)[i];
        let unshared = match frag {
            Fragment::Encoder => st + k >= stage_count(layers),
            Fragment::Decoder => st < k,
        };
        if unshared {
            format!("{name}_{tag}.{i}.")
        } else {
            format!("{name}.{i}.")
        }
    }

    /// Number of weight stages along one pathway.
    pub fn pathway_stages(&self) -> usize {
        stage_count(&self.encoder.layers)
            + stage_count(&self.bottleneck_a.layers)
            + stage_count(&self.decoder.layers)
    }

    pub fn init<T: Real>(&self, rng: &mut Stream) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut ps = ParamSet::default();
        for p in 0..2 {
            ps.add_fragment(&self.encoder.layers, &self.encoder.input_shape, |i| {
                self.prefix(Fragment::Encoder, i, p)
            }, rng)?;
        }
        let neck = [&self.bottleneck_a, &self.bottleneck_b];
        for (p, spec) in neck.iter().enumerate() {
            let name = if p == 0 { "neck_a" } else { "neck_b" };
            ps.add_fragment(&spec.layers, &spec.input_shape, |i| format!("{name}.{i}."), rng)?;
        }
        for p in 0..2 {
            ps.add_fragment(&self.decoder.layers, &self.decoder.input_shape, |i| {
                self.prefix(Fragment::Decoder, i, p)
            }, rng)?;
        }
        Ok(ps)
    }

    /// Both pathways on one tape. Layers shared by both pathways and fed the
    /// same node are evaluated once.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        binder: &mut Binder<'_, T>,
        x: Var,
    ) -> Result<DnaForward> {
        check_input(tape.value(x), &self.encoder.input_shape)?;
        let mut h = [x, x];
        for (i, l) in self.encoder.layers.iter().enumerate() {
            let pa = self.prefix(Fragment::Encoder, i, 0);
            let pb = self.prefix(Fragment::Encoder, i, 1);
            if h[0] == h[1] && pa == pb {
                let o = binder.apply(tape, l, &pa, h[0])?;
                h = [o, o];
            } else {
                h[0] = binder.apply(tape, l, &pa, h[0])?;
                h[1] = binder.apply(tape, l, &pb, h[1])?;
            }
        }
        let mut feats = [None, None];
        let neck = [(&self.bottleneck_a, "neck_a"), (&self.bottleneck_b, "neck_b")];
        for (p, (spec, name)) in neck.iter().enumerate() {
            for (i, l) in spec.layers.iter().enumerate() {
                h[p] = binder.apply(tape, l, &format!("{name}.{i}."), h[p])?;
                if spec.feature_tag == Some(i) {
                    feats[p] = Some(tape.flatten(h[p])?);
                }
            }
        }
        for (i, l) in self.decoder.layers.iter().enumerate() {
            for (p, hp) in h.iter_mut().enumerate() {
                *hp = binder.apply(tape, l, &self.prefix(Fragment::Decoder, i, p), *hp)?;
            }
        }
        let missing = || Error::Contract("bottleneck has no feature layer".into());
        Ok(DnaForward {
            recon: h,
            features: [feats[0].ok_or_else(missing)?, feats[1].ok_or_else(missing)?],
        })
    }
}

/// Node handles of a dual-neck forward pass.
#[derive(Debug, Clone, Copy)]
pub struct DnaForward {
    pub recon: [Var; 2],
    pub features: [Var; 2],
}

/// A dual-neck autoencoder with parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Dna<T> {
    pub spec: DnaSpec,
    pub params: ParamSet<T>,
}

impl<T: Real> Dna<T> {
    pub fn init(spec: DnaSpec, seed: u64) -> Result<Self> {
        let params = spec.init(&mut rng::seeded(seed))?;
        Ok(Dna { spec, params })
    }

    /// Inference-mode reconstructions from both pathways.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 2]> {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let n = x.rows();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let mut tape = Tape::new();
            let xv = tape.constant(x.slice_rows(start, end));
            let mut binder = Binder::new(&self.params, Mode::Eval);
            let f = self.spec.forward(&mut tape, &mut binder, xv)?;
            a.push(tape.value(f.recon[0]).clone());
            b.push(tape.value(f.recon[1]).clone());
            start = end;
        }
        let ra: Vec<&Tensor<T>> = a.iter().collect();
        let rb: Vec<&Tensor<T>> = b.iter().collect();
        Ok([Tensor::concat_rows(&ra)?, Tensor::concat_rows(&rb)?])
    }

    /// Inference-mode bottleneck features of both pathways.
    pub fn features(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 2]> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut binder = Binder::new(&self.params, Mode::Eval);
        let f = self.spec.forward(&mut tape, &mut binder, xv)?;
        Ok([tape.value(f.features[0]).clone(), tape.value(f.features[1]).clone()])
    }
}

// ----- builders --------------------------------------------------------------

fn spec(
    name: &str,
    input: &[usize],
    layers: Vec<Layer>,
    tag: Option<usize>,
    kind: OutputKind,
) -> ModelSpec {
    ModelSpec {
        name: name.into(),
        input_shape: input.to_vec(),
        layers,
        feature_tag: tag,
        output_kind: kind,
    }
}

fn conv(out: usize) -> Layer {
    Layer::Conv { out, kernel: 3 }
}

/// Small CNN for MNIST pairs: two conv/pool stages, 7×7 average pooling,
/// a 32-wide feature vector and a linear head.
pub fn build_cnn_classifier() -> ModelSpec {
    use Layer::*;
    spec(
        "cnn_classifier",
        &[1, 28, 28],
        vec![
            conv(16),
            Relu,
            MaxPool2,
            conv(32),
            Relu,
            MaxPool2,
            AvgPool { window: 7 },
            Flatten,
            Linear { out: 10 },
        ],
        Some(7),
        OutputKind::Logits,
    )
}

/// Fully connected MNIST classifier with batchnorm; features are the
/// 128-wide post-activation.
pub fn build_fc_classifier() -> ModelSpec {
    use Layer::*;
    spec(
        "fc_classifier",
        &[1, 28, 28],
        vec![
            Flatten,
            Linear { out: 256 },
            BatchNorm,
            Relu,
            Linear { out: 128 },
            BatchNorm,
            Relu,
            Linear { out: 10 },
        ],
        Some(6),
        OutputKind::Logits,
    )
}

/// MNIST dual-neck autoencoder with `unshared` ∈ {2, 4, 6}.
pub fn build_dna_mnist(unshared: usize) -> Result<DnaSpec> {
    use Layer::*;
    let neck = spec(
        "neck",
        &[128],
        vec![Linear { out: 64 }, Relu, Linear { out: 128 }, Relu],
        Some(1),
        OutputKind::Image,
    );
    let d = DnaSpec {
        name: "dna_mnist".into(),
        encoder: spec(
            "encoder",
            &[1, 28, 28],
            vec![Flatten, Linear { out: 256 }, Relu, Linear { out: 128 }, Relu],
            None,
            OutputKind::Image,
        ),
        bottleneck_a: neck.clone(),
        bottleneck_b: neck,
        decoder: spec(
            "decoder",
            &[128],
            vec![
                Linear { out: 256 },
                Relu,
                Linear { out: 784 },
                Sigmoid,
                Reshape {
                    shape: vec![1, 28, 28],
                },
            ],
            None,
            OutputKind::Image,
        ),
        unshared,
    };
    d.validate()?;
    Ok(d)
}

/// CIFAR-10 dual-neck autoencoder; each bottleneck compresses to
/// 28×4×4 = 448 features.
pub fn build_dna_cifar() -> DnaSpec {
    use Layer::*;
    let neck = spec(
        "neck",
        &[64, 8, 8],
        vec![
            conv(28),
            BatchNorm,
            Relu,
            MaxPool2,
            Flatten,
            Reshape {
                shape: vec![28, 4, 4],
            },
            Deconv { out: 64 },
        ],
        Some(4),
        OutputKind::Image,
    );
    DnaSpec {
        name: "dna_cifar".into(),
        encoder: spec(
            "encoder",
            &[3, 32, 32],
            vec![
                conv(32),
                BatchNorm,
                Relu,
                MaxPool2,
                Residual { channels: 32 },
                conv(64),
                BatchNorm,
                Relu,
                MaxPool2,
            ],
            None,
            OutputKind::Image,
        ),
        bottleneck_a: neck.clone(),
        bottleneck_b: neck,
        decoder: spec(
            "decoder",
            &[64, 8, 8],
            vec![
                Residual { channels: 64 },
                Deconv { out: 32 },
                conv(32),
                BatchNorm,
                Relu,
                Deconv { out: 32 },
                Layer::Conv { out: 3, kernel: 1 },
                Sigmoid,
            ],
            None,
            OutputKind::Image,
        ),
        unshared: 2,
    }
}

/// Single-bottleneck autoencoder with the same fragments as `dna`.
pub fn build_autoencoder_baseline(dna: &DnaSpec) -> ModelSpec {
    let mut layers = dna.encoder.layers.clone();
    let offset = layers.len();
    layers.extend(dna.bottleneck_a.layers.iter().cloned());
    layers.extend(dna.decoder.layers.iter().cloned());
    spec(
        &format!("{}_baseline_ae", dna.name),
        &dna.encoder.input_shape,
        layers,
        dna.bottleneck_a.feature_tag.map(|t| t + offset),
        OutputKind::Image,
    )
}

/// Classifier for MNIST reconstructions.
pub fn build_eval_classifier_mnist() -> ModelSpec {
    use Layer::*;
    spec(
        "eval_classifier_mnist",
        &[1, 28, 28],
        vec![conv(16), Relu, MaxPool2, conv(32), Relu, MaxPool2, Flatten, Linear { out: 10 }],
        Some(6),
        OutputKind::Logits,
    )
}

/// Classifier for CIFAR-10 reconstructions.
pub fn build_eval_classifier_cifar() -> ModelSpec {
    use Layer::*;
    let mut layers = Vec::new();
    for c in [32, 64, 128] {
        layers.extend([conv(c), BatchNorm, Relu, MaxPool2]);
    }
    layers.extend([Flatten, Linear { out: 10 }]);
    spec(
        "eval_classifier_cifar",
        &[3, 32, 32],
        layers,
        Some(12),
        OutputKind::Logits,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cnn_trace() {
        let s = build_cnn_classifier();
        let tr = s.trace().unwrap();
        assert_eq!(tr[2], vec![16, 14, 14]);
        assert_eq!(tr[5], vec![32, 7, 7]);
        assert_eq!(tr[6], vec![32, 1, 1]);
        assert_eq!(tr[7], vec![32]);
        assert_eq!(tr[8], vec![10]);
        assert_eq!(s.feature_width().unwrap(), 32);
    }

    #[test]
    fn fc_trace() {
        let s = build_fc_classifier();
        let widths: Vec<usize> = s.trace().unwrap().iter().map(|t| t[0]).collect();
        assert_eq!(widths, vec![784, 256, 256, 256, 128, 128, 128, 10]);
        assert_eq!(s.feature_width().unwrap(), 128);
    }

    #[test]
    fn cnn_zero_input_is_finite_and_deterministic() {
        let m = Model::<f32>::init(build_cnn_classifier(), 1).unwrap();
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        let a = m.outputs(&x).unwrap();
        assert!(a.all_finite());
        assert_eq!(a, m.outputs(&x).unwrap());
    }

    #[test]
    fn dna_unshared_variants() {
        for u in [2, 4, 6] {
            let d = build_dna_mnist(u).unwrap();
            assert_eq!(d.pathway_stages(), 6);
            let ps: ParamSet<f32> = d.init(&mut rng::seeded(0)).unwrap();
            let unshared_names = ps.params.keys().filter(|k| k.contains("_a.")).count();
            // weight + bias per unshared stage
            assert_eq!(unshared_names, 2 * u, "{u}");
        }
        assert!(matches!(build_dna_mnist(3), Err(Error::Config(_))));
        assert!(matches!(build_dna_mnist(8), Err(Error::Config(_))));
    }

    #[test]
    fn dna_six_shares_nothing() {
        let d = build_dna_mnist(6).unwrap();
        let ps: ParamSet<f32> = d.init(&mut rng::seeded(0)).unwrap();
        assert!(ps.params.keys().all(|k| k.contains("_a.") || k.contains("_b.")));
    }

    #[test]
    fn cifar_dna_round_trip_shapes() {
        let d = build_dna_cifar();
        d.validate().unwrap();
        assert_eq!(d.bottleneck_a.feature_width().unwrap(), 448);
        let tr = d.decoder.trace().unwrap();
        assert_eq!(tr[1], vec![32, 16, 16]);
        assert_eq!(tr.last().unwrap(), &vec![3, 32, 32]);
        let m = Dna::<f32>::init(d, 3).unwrap();
        let [a, b] = m.reconstruct(&Tensor::full(&[2, 3, 32, 32], 0.5)).unwrap();
        assert_eq!(a.shape(), &[2, 3, 32, 32]);
        assert_eq!(b.shape(), &[2, 3, 32, 32]);
    }

    #[test]
    fn baseline_ae_has_one_bottleneck_fewer() {
        let d = build_dna_mnist(2).unwrap();
        let dna: ParamSet<f32> = d.init(&mut rng::seeded(0)).unwrap();
        let neck: ParamSet<f32> = d.bottleneck_a.init("", &mut rng::seeded(0)).unwrap();
        let ae = Model::<f32>::init(build_autoencoder_baseline(&d), 0).unwrap();
        assert_eq!(ae.params.count(), dna.count() - neck.count());
        assert_eq!(ae.spec.output_shape().unwrap(), vec![1, 28, 28]);
        assert_eq!(ae.spec.feature_width().unwrap(), 64);
    }

    #[test]
    fn param_distance_cases() {
        let mut a = ParamSet::<f64>::default();
        a.params.insert("w".into(), Tensor::scalar(3.0));
        let mut b = a.clone();
        assert_eq!(param_distance(&a, &b).unwrap(), 0.0);
        b.params.insert("w".into(), Tensor::scalar(1.0));
        assert_eq!(param_distance(&a, &b).unwrap(), 4.0);
        b.params.insert("v".into(), Tensor::scalar(1.0));
        assert!(matches!(param_distance(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let s = build_fc_classifier();
        let a = Model::<f32>::init(s.clone(), 5).unwrap();
        let b = Model::<f32>::init(s.clone(), 5).unwrap();
        let c = Model::<f32>::init(s, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params.params.keys().any(|k| k == "1.weight"));
        assert_eq!(a.params.buffers.len(), 4);
    }

    #[test]
    fn eval_forward_ignores_input_grad_flag() {
        let m = Model::<f64>::init(build_fc_classifier(), 2).unwrap();
        let x = rng::uniform::<f64>(&mut rng::seeded(1), &[4, 1, 28, 28], 0.0, 1.0);
        let eval = m.outputs(&x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let (out, _) = m.forward_eval(&mut tape, xv).unwrap();
        assert_eq!(tape.value(out), &eval);
    }

    #[test]
    fn input_shape_is_checked() {
        let m = Model::<f32>::init(build_fc_classifier(), 2).unwrap();
        assert!(matches!(
            m.outputs(&Tensor::zeros(&[2, 1, 27, 28])),
            Err(Error::Shape { .. })
        ));
    }
}
