//! FGSM and PGD under ℓ∞ and ℓ2 budgets, with pluggable objectives.
//!
//! `epsilon` is always given on the ℓ∞ scale. Under ℓ2 the radius becomes
//! `√D·ε` (and the PGD step `√D·α`), `D` being the flattened input size, so
//! that 784-pixel images get a budget of `28ε`.
//!
//! All models are evaluated in inference mode, so the per-sample objective
//! of one sample does not depend on the rest of the batch and a single
//! backward pass over the summed objective yields every per-sample input
//! gradient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::{Binder, Dna, Mode, Model};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Method {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttackConfig {
    pub method: Method,
    pub norm: Norm,
    pub epsilon: f64,
    /// PGD iterations.
    pub steps: usize,
    /// PGD step on the ℓ∞ scale; `None` means `min(2.5·ε/steps, ε)`.
    pub alpha: Option<f64>,
    pub data_range: (f64, f64),
    pub seed: u64,
    /// Start PGD from a uniform point in the ball instead of `x`.
    pub random_init: bool,
}

impl AttackConfig {
    pub fn fgsm(norm: Norm, epsilon: f64) -> Self {
        AttackConfig {
            method: Method::Fgsm,
            norm,
            epsilon,
            steps: 1,
            alpha: None,
            data_range: (0.0, 1.0),
            seed: 0,
            random_init: false,
        }
    }

    pub fn pgd(norm: Norm, epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            method: Method::Pgd,
            steps,
            random_init: true,
            ..Self::fgsm(norm, epsilon)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn step_size(&self) -> f64 {
        self.alpha
            .unwrap_or_else(|| (2.5 * self.epsilon / self.steps.max(1) as f64).min(self.epsilon))
    }

    /// Factor turning ℓ∞-scale quantities into the norm's own scale.
    pub fn scale(&self, dim: usize) -> f64 {
        match self.norm {
            Norm::Linf => 1.0,
            Norm::L2 => (dim as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.data_range;
        if !(lo < hi) {
            return Err(Error::Config(format!("data range [{lo}, {hi}] is empty")));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if self.method == Method::Pgd {
            if self.steps == 0 {
                return Err(Error::Config("pgd needs at least one step".into()));
            }
            let a = self.step_size();
            if !(a > 0.0) || a > self.epsilon {
                return Err(Error::Config(format!(
                    "step size {a} must lie in (0, epsilon = {}]",
                    self.epsilon
                )));
            }
        }
        Ok(())
    }
}

/// A per-sample quantity the attacker maximizes.
pub trait Objective<T: Real> {
    /// Objective of every sample, shape `[N]`.
    fn per_sample(&self, tape: &mut Tape<T>, x: Var, y: &[usize]) -> Result<Var>;
}

/// Cross-entropy of a classifier.
pub struct ClassifierObjective<'a, T> {
    pub model: &'a Model<T>,
}

impl<T: Real> Objective<T> for ClassifierObjective<'_, T> {
    fn per_sample(&self, tape: &mut Tape<T>, x: Var, y: &[usize]) -> Result<Var> {
        let (logits, _) = self.model.forward_eval(tape, x)?;
        tape.cross_entropy_per_sample(logits, y)
    }
}

/// `CE(C(F₁(x)), y)² + CE(C(F₂(x)), y)²` over both pathways of a dual-neck
/// autoencoder `F` followed by the classifier `C`.
pub struct DnaJointObjective<'a, T> {
    pub dna: &'a Dna<T>,
    pub classifier: &'a Model<T>,
}

impl<T: Real> Objective<T> for DnaJointObjective<'_, T> {
    fn per_sample(&self, tape: &mut Tape<T>, x: Var, y: &[usize]) -> Result<Var> {
        let mut fb = Binder::new(&self.dna.params, Mode::Eval);
        let f = self.dna.spec.forward(tape, &mut fb, x)?;
        let mut cb = Binder::new(&self.classifier.params, Mode::Eval);
        let mut total = None;
        for r in f.recon {
            let (logits, _) = cb.forward(tape, &self.classifier.spec, "", r)?;
            let ce = tape.cross_entropy_per_sample(logits, y)?;
            let sq = tape.square(ce);
            total = Some(match total {
                None => sq,
                Some(t) => tape.add(t, sq)?,
            });
        }
        Ok(total.expect("two pathways"))
    }
}

/// `CE(C(F(x)), y)` through a single-bottleneck autoencoder.
pub struct AeObjective<'a, T> {
    pub ae: &'a Model<T>,
    pub classifier: &'a Model<T>,
}

impl<T: Real> Objective<T> for AeObjective<'_, T> {
    fn per_sample(&self, tape: &mut Tape<T>, x: Var, y: &[usize]) -> Result<Var> {
        let (r, _) = self.ae.forward_eval(tape, x)?;
        let (logits, _) = self.classifier.forward_eval(tape, r)?;
        tape.cross_entropy_per_sample(logits, y)
    }
}

/// Result of crafting one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch<T> {
    pub original: Tensor<T>,
    pub perturbed: Tensor<T>,
    pub labels: Vec<usize>,
    /// Objective at the clean inputs.
    pub before: Vec<f64>,
    /// Objective at the returned inputs.
    pub after: Vec<f64>,
    /// Samples left unperturbed because their ℓ2 gradient vanished.
    pub flagged: Vec<bool>,
    /// PGD only: per-sample objective at each iterate, starting point first.
    pub trace: Vec<Vec<f64>>,
}

impl<T: Real> AdvBatch<T> {
    /// Largest per-sample ℓ∞ and ℓ2 distance from the originals.
    pub fn max_distances(&self) -> (f64, f64) {
        let d = self.original.row_len();
        let mut linf = 0.0f64;
        let mut l2 = 0.0f64;
        for (a, b) in self
            .original
            .data()
            .chunks(d)
            .zip(self.perturbed.data().chunks(d))
        {
            let mut s = 0.0;
            for (&u, &v) in a.iter().zip(b) {
                let diff = (v.as_f64() - u.as_f64()).abs();
                linf = linf.max(diff);
                s += diff * diff;
            }
            l2 = l2.max(s.sqrt());
        }
        (linf, l2)
    }
}

/// Per-sample objective values and the input gradient of their sum.
pub fn value_and_grad<T: Real, O: Objective<T> + ?Sized>(
    obj: &O,
    x: &Tensor<T>,
    y: &[usize],
) -> Result<(Vec<f64>, Tensor<T>)> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let j = obj.per_sample(&mut tape, xv, y)?;
    if tape.value(j).shape() != [x.rows()] {
        return Err(Error::shape("objective", tape.value(j).shape(), &[x.rows()]));
    }
    let vals = tape.value(j).data().iter().map(|v| v.as_f64()).collect();
    let s = tape.sum(j);
    tape.backward(s)?;
    let g = tape.take_grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((vals, g))
}

pub fn objective_values<T: Real, O: Objective<T> + ?Sized>(
    obj: &O,
    x: &Tensor<T>,
    y: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let j = obj.per_sample(&mut tape, xv, y)?;
    Ok(tape.value(j).data().iter().map(|v| v.as_f64()).collect())
}

fn check_batch<T: Real>(x: &Tensor<T>, y: &[usize]) -> Result<()> {
    if x.rank() < 2 || x.rows() != y.len() {
        return Err(Error::shape("attack", x.shape(), &[y.len()]));
    }
    Ok(())
}

fn l2_norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|a| a.as_f64() * a.as_f64()).sum::<f64>().sqrt()
}

/// Moves every row of `x` by `step` along the normalized gradient (ℓ2) or
/// its sign (ℓ∞). Returns which rows had a vanishing ℓ2 gradient.
fn ascend<T: Real>(x: &mut Tensor<T>, g: &Tensor<T>, norm: Norm, step: f64) -> Vec<bool> {
    let d = x.row_len();
    let mut flagged = vec![false; x.rows()];
    for (i, (xr, gr)) in x
        .data_mut()
        .chunks_mut(d)
        .zip(g.data().chunks(d))
        .enumerate()
    {
        match norm {
            Norm::Linf => {
                let s = T::of(step);
                for (a, &b) in xr.iter_mut().zip(gr) {
                    *a = *a + s * crate::tensor::sgn(b);
                }
            }
            Norm::L2 => {
                let n = l2_norm(gr);
                if n == 0.0 {
                    flagged[i] = true;
                    continue;
                }
                let s = step / n;
                for (a, &b) in xr.iter_mut().zip(gr) {
                    *a = T::of(a.as_f64() + s * b.as_f64());
                }
            }
        }
    }
    flagged
}

/// Pulls `x` back into the budget around `orig`, then into the data range.
fn project<T: Real>(x: &mut Tensor<T>, orig: &Tensor<T>, norm: Norm, radius: f64, range: (f64, f64)) {
    let d = x.row_len();
    let (lo, hi) = (T::of(range.0), T::of(range.1));
    for (xr, or) in x.data_mut().chunks_mut(d).zip(orig.data().chunks(d)) {
        match norm {
            Norm::Linf => {
                let r = T::of(radius);
                for (a, &o) in xr.iter_mut().zip(or) {
                    *a = a.max(o - r).min(o + r);
                }
            }
            Norm::L2 => {
                let n = xr
                    .iter()
                    .zip(or)
                    .map(|(&a, &o)| {
                        let t = a.as_f64() - o.as_f64();
                        t * t
                    })
                    .sum::<f64>()
                    .sqrt();
                if n > radius {
                    // Shrink slightly below the radius so rounding cannot
                    // push the result outside.
                    let f = radius / n * (1.0 - 1e-12);
                    for (a, &o) in xr.iter_mut().zip(or) {
                        *a = T::of(o.as_f64() + f * (a.as_f64() - o.as_f64()));
                    }
                }
            }
        }
        for a in xr.iter_mut() {
            *a = a.max(lo).min(hi);
        }
    }
}

/// Fast gradient (sign) method.
pub fn fgsm<T: Real, O: Objective<T> + ?Sized>(
    obj: &O,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AdvBatch<T>> {
    cfg.validate()?;
    check_batch(x, y)?;
    let scale = cfg.scale(x.row_len());
    let (before, g) = value_and_grad(obj, x, y)?;
    let mut xp = x.clone();
    let flagged = ascend(&mut xp, &g, cfg.norm, cfg.epsilon * scale);
    project(&mut xp, x, cfg.norm, cfg.epsilon * scale, cfg.data_range);
    let after = objective_values(obj, &xp, y)?;
    Ok(AdvBatch {
        original: x.clone(),
        perturbed: xp,
        labels: y.to_vec(),
        before,
        after,
        flagged,
        trace: Vec::new(),
    })
}

/// Uniform point of the budget ball around each row of `x`.
fn random_start<T: Real>(x: &Tensor<T>, norm: Norm, radius: f64, rng: &mut rng::Stream) -> Tensor<T> {
    let d = x.row_len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        match norm {
            Norm::Linf => {
                for a in row.iter_mut() {
                    *a = T::of(a.as_f64() + rng.random_range(-radius..=radius));
                }
            }
            Norm::L2 => {
                let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let u: f64 = rng.random();
                let r = radius * u.powf(1.0 / d as f64);
                for (a, v) in row.iter_mut().zip(&dir) {
                    *a = T::of(a.as_f64() + r * v / n);
                }
            }
        }
    }
    out
}

/// Projected gradient ascent from a random start inside the budget.
pub fn pgd<T: Real, O: Objective<T> + ?Sized>(
    obj: &O,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AdvBatch<T>> {
    cfg.validate()?;
    check_batch(x, y)?;
    let scale = cfg.scale(x.row_len());
    let radius = cfg.epsilon * scale;
    let step = cfg.step_size() * scale;
    let mut xt = if cfg.random_init {
        let mut r = rng::seeded(cfg.seed);
        random_start(x, cfg.norm, radius, &mut r)
    } else {
        x.clone()
    };
    project(&mut xt, x, cfg.norm, radius, cfg.data_range);
    let before = objective_values(obj, x, y)?;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut flagged = vec![false; y.len()];
    for _ in 0..cfg.steps {
        let (vals, g) = value_and_grad(obj, &xt, y)?;
        trace.push(vals);
        let f = ascend(&mut xt, &g, cfg.norm, step);
        for (a, b) in flagged.iter_mut().zip(f) {
            *a |= b;
        }
        project(&mut xt, x, cfg.norm, radius, cfg.data_range);
    }
    let after = objective_values(obj, &xt, y)?;
    trace.push(after.clone());
    Ok(AdvBatch {
        original: x.clone(),
        perturbed: xt,
        labels: y.to_vec(),
        before,
        after,
        flagged,
        trace,
    })
}

pub fn craft<T: Real, O: Objective<T> + ?Sized>(
    obj: &O,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AdvBatch<T>> {
    match cfg.method {
        Method::Fgsm => fgsm(obj, x, y, cfg),
        Method::Pgd => pgd(obj, x, y, cfg),
    }
}

/// Crafts over `x` in chunks of `chunk` rows. Chunk `k` uses the seed
/// `derive(cfg.seed, k)`, so results do not depend on how chunks are
/// scheduled.
pub fn craft_chunked<T: Real, O: Objective<T> + ?Sized>(
    obj: &O,
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
    chunk: usize,
) -> Result<AdvBatch<T>> {
    check_batch(x, y)?;
    if chunk == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let mut parts = Vec::new();
    let mut start = 0;
    let mut k = 0;
    while start < y.len() {
        let end = (start + chunk).min(y.len());
        let c = AttackConfig {
            seed: rng::derive(cfg.seed, k),
            ..cfg.clone()
        };
        parts.push(craft(obj, &x.slice_rows(start, end), &y[start..end], &c)?);
        start = end;
        k += 1;
    }
    let originals: Vec<&Tensor<T>> = parts.iter().map(|p| &p.original).collect();
    let perturbed: Vec<&Tensor<T>> = parts.iter().map(|p| &p.perturbed).collect();
    let steps = parts.first().map_or(0, |p| p.trace.len());
    let trace = (0..steps)
        .map(|t| parts.iter().flat_map(|p| p.trace[t].iter().copied()).collect())
        .collect();
    Ok(AdvBatch {
        original: Tensor::concat_rows(&originals)?,
        perturbed: Tensor::concat_rows(&perturbed)?,
        labels: y.to_vec(),
        before: parts.iter().flat_map(|p| p.before.iter().copied()).collect(),
        after: parts.iter().flat_map(|p| p.after.iter().copied()).collect(),
        flagged: parts.iter().flat_map(|p| p.flagged.iter().copied()).collect(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_autoencoder_baseline, build_dna_mnist, build_eval_classifier_mnist};

    /// `J = x·w` per sample.
    struct Linear(Tensor<f64>);

    impl Objective<f64> for Linear {
        fn per_sample(&self, tape: &mut Tape<f64>, x: Var, _y: &[usize]) -> Result<Var> {
            let n = tape.value(x).rows();
            let flat = tape.flatten(x)?;
            let w = tape.constant(self.0.clone());
            let j = tape.matmul(flat, w)?;
            tape.reshape(j, &[n])
        }
    }

    fn lin(w: &[f64]) -> Linear {
        Linear(Tensor::new(&[w.len(), 1], w.to_vec()).unwrap())
    }

    #[test]
    fn fgsm_linear_moves_by_sign() {
        let w = [0.3, -2.0, 0.0, 5.0];
        let x = Tensor::full(&[2, 4], 0.5);
        let adv = fgsm(&lin(&w), &x, &[0, 0], &AttackConfig::fgsm(Norm::Linf, 0.1)).unwrap();
        for r in 0..2 {
            for (j, &wj) in w.iter().enumerate() {
                let d = adv.perturbed.at2(r, j) - 0.5;
                assert!((d - 0.1 * crate::tensor::sgn(wj)).abs() < 1e-15);
            }
        }
        assert!(adv.after[0] > adv.before[0]);
    }

    #[test]
    fn zero_gradient_cases() {
        let x = Tensor::full(&[1, 4], 0.5);
        let zero = lin(&[0.0; 4]);
        let a = fgsm(&zero, &x, &[0], &AttackConfig::fgsm(Norm::Linf, 0.1)).unwrap();
        assert_eq!(a.perturbed, x);
        let b = fgsm(&zero, &x, &[0], &AttackConfig::fgsm(Norm::L2, 0.1)).unwrap();
        assert_eq!(b.perturbed, x);
        assert_eq!(b.flagged, vec![true]);
    }

    #[test]
    fn l2_fgsm_uses_sqrt_d_budget() {
        let x = Tensor::full(&[1, 784], 0.5);
        let w: Vec<f64> = (0..784).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let a = fgsm(&lin(&w), &x, &[0], &AttackConfig::fgsm(Norm::L2, 0.001)).unwrap();
        let (_, l2) = a.max_distances();
        assert!((l2 - 28.0 * 0.001).abs() < 1e-9, "{l2}");
    }

    #[test]
    fn single_step_pgd_equals_fgsm() {
        let m = Model::<f64>::init(build_eval_classifier_mnist(), 4).unwrap();
        let x = rng::uniform::<f64>(&mut rng::seeded(2), &[3, 1, 28, 28], 0.0, 1.0);
        let y = [1, 2, 3];
        let obj = ClassifierObjective { model: &m };
        let f = fgsm(&obj, &x, &y, &AttackConfig::fgsm(Norm::Linf, 0.1)).unwrap();
        let mut cfg = AttackConfig::pgd(Norm::Linf, 0.1, 1);
        cfg.random_init = false;
        cfg.alpha = Some(0.1);
        let p = pgd(&obj, &x, &y, &cfg).unwrap();
        assert_eq!(f.perturbed, p.perturbed);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::pgd(Norm::Linf, 0.1, 0).validate().is_err());
        assert!(AttackConfig::fgsm(Norm::Linf, 0.0).validate().is_err());
        let mut c = AttackConfig::pgd(Norm::Linf, 0.1, 10);
        c.alpha = Some(0.2);
        assert!(c.validate().is_err());
        c.alpha = None;
        assert!((c.step_size() - 0.025).abs() < 1e-15);
        c.data_range = (1.0, 1.0);
        assert!(c.validate().is_err());
        assert_eq!(AttackConfig::pgd(Norm::Linf, 0.1, 1).step_size(), 0.1);
    }

    #[test]
    fn pgd_is_seed_deterministic() {
        let m = Model::<f32>::init(build_eval_classifier_mnist(), 4).unwrap();
        let x = rng::uniform::<f32>(&mut rng::seeded(2), &[2, 1, 28, 28], 0.0, 1.0);
        let obj = ClassifierObjective { model: &m };
        let cfg = AttackConfig::pgd(Norm::L2, 0.05, 3).with_seed(9);
        let a = pgd(&obj, &x, &[0, 1], &cfg).unwrap();
        let b = pgd(&obj, &x, &[0, 1], &cfg).unwrap();
        let c = pgd(&obj, &x, &[0, 1], &cfg.clone().with_seed(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.perturbed, c.perturbed);
        assert_eq!(a.trace.len(), 4);
    }

    #[test]
    fn dna_joint_is_twice_squared_ce_for_identical_pathways() {
        let spec = build_dna_mnist(2).unwrap();
        let mut dna = Dna::<f64>::init(spec.clone(), 1).unwrap();
        let copies: Vec<_> = dna
            .params
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("neck_a."))
            .map(|(k, v)| (k.replace("neck_a.", "neck_b."), v.clone()))
            .collect();
        dna.params.params.extend(copies);
        let clf = Model::<f64>::init(build_eval_classifier_mnist(), 2).unwrap();
        let x = rng::uniform::<f64>(&mut rng::seeded(3), &[3, 1, 28, 28], 0.0, 1.0);
        let y = [4, 5, 6];
        let joint = objective_values(&DnaJointObjective { dna: &dna, classifier: &clf }, &x, &y).unwrap();
        let [ra, _] = dna.reconstruct(&x).unwrap();
        let ce = objective_values(&ClassifierObjective { model: &clf }, &ra, &y).unwrap();
        for (j, c) in joint.iter().zip(&ce) {
            assert!((j - 2.0 * c * c).abs() < 1e-10 * j.abs().max(1.0));
        }
        // Baseline objective reduces to the classifier on reconstructions.
        let ae = Model::<f64>::init(build_autoencoder_baseline(&spec), 5).unwrap();
        let a = objective_values(&AeObjective { ae: &ae, classifier: &clf }, &x, &y).unwrap();
        let r = ae.outputs(&x).unwrap();
        let b = objective_values(&ClassifierObjective { model: &clf }, &r, &y).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chunking_does_not_change_fgsm() {
        let m = Model::<f32>::init(build_eval_classifier_mnist(), 4).unwrap();
        let x = rng::uniform::<f32>(&mut rng::seeded(2), &[5, 1, 28, 28], 0.0, 1.0);
        let y = [0, 1, 2, 3, 4];
        let obj = ClassifierObjective { model: &m };
        let cfg = AttackConfig::fgsm(Norm::Linf, 0.1);
        let whole = fgsm(&obj, &x, &y, &cfg).unwrap();
        let parts = craft_chunked(&obj, &x, &y, &cfg, 2).unwrap();
        assert_eq!(whole.perturbed, parts.perturbed);
    }
}
