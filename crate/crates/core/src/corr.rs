//! Linear predictability between two feature batches.
//!
//! Given features `Z1` (N×M₁) and `Z2` (N×M₂) from the same inputs, an
//! ordinary-least-squares fit of `Z2` on `[Z1, 1]` gives a residual sum of
//! squares. The coefficient of determination `R² = 1 − SS_res/SS_total`
//! measures how much of `Z2` is an affine image of `Z1`, and the correlation
//! loss
//!
//! ```text
//! L = log(SS_total + ε) − log(SS_res + ε)
//! ```
//!
//! is its differentiable, log-stabilized counterpart. Columns of `Z1` that
//! are numerically dependent (by the Householder `R` diagonal) are dropped
//! before the fit, so the Gram matrix can be inverted by Cholesky.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Column-independence threshold on `|R_jj| / max |R_ii|`.
pub const DEFAULT_ETA: f64 = 0.0005;
/// Stabilizer inside both logarithms of the loss.
pub const DEFAULT_EPS: f64 = 0.001;
/// Ridge added to the Gram diagonal, relative to its mean diagonal entry.
pub const RIDGE: f64 = 1e-8;

/// An `N×M` matrix of vectorized features with `N ≥ 2` and finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch(Tensor<f64>);

impl FeatureBatch {
    pub fn new(matrix: Tensor<f64>) -> Result<Self> {
        if matrix.rank() != 2 {
            return Err(Error::dim("feature_batch", "expected an N×M matrix"));
        }
        if matrix.shape()[0] < 2 {
            return Err(Error::DegenerateBatch {
                op: "feature_batch",
                n: matrix.shape()[0],
            });
        }
        if !matrix.all_finite() {
            return Err(Error::Domain {
                op: "feature_batch",
                msg: "non-finite feature".into(),
            });
        }
        Ok(FeatureBatch(matrix))
    }

    /// Flattens a batched tensor of any rank to `N×(rest)` in 64-bit.
    pub fn from_batched<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let m = t.cast::<f64>().reshape(&[t.rows(), t.row_len()])?;
        Self::new(m)
    }

    pub fn matrix(&self) -> &Tensor<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Kept columns of `Z1` plus a trailing ones column.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedDesign {
    pub keep_mask: Vec<bool>,
    pub design: Tensor<f64>,
}

impl PrunedDesign {
    pub fn kept(&self) -> Vec<usize> {
        kept_indices(&self.keep_mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationResult {
    pub ss_res: f64,
    pub ss_total: f64,
    pub r_squared: f64,
    pub loss: f64,
}

fn kept_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect()
}

/// Mask of numerically independent columns: keep `j` iff
/// `|R_jj| / max_i |R_ii| > eta`.
pub fn independent_columns(z1: &Tensor<f64>, eta: f64) -> Result<Vec<bool>> {
    let (_, r) = linalg::qr_factor(z1)?;
    let m = r.shape()[0];
    let diag: Vec<f64> = (0..m).map(|i| r.at2(i, i).abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::Degenerate("all feature columns are zero".into()));
    }
    let mask: Vec<bool> = diag.iter().map(|&d| d / max > eta).collect();
    if !mask.iter().any(|&k| k) {
        return Err(Error::Degenerate("every feature column was pruned".into()));
    }
    Ok(mask)
}

pub fn prune_columns(z1: &FeatureBatch, eta: f64) -> Result<PrunedDesign> {
    let mask = independent_columns(z1.matrix(), eta)?;
    let kept = kept_indices(&mask);
    let (n, m) = (z1.n(), z1.m());
    let mut design = Vec::with_capacity(n * (kept.len() + 1));
    for i in 0..n {
        design.extend(kept.iter().map(|&j| z1.matrix().data()[i * m + j]));
        design.push(1.0);
    }
    let design = Tensor::new(&[n, kept.len() + 1], design)?;
    Ok(PrunedDesign {
        keep_mask: mask,
        design,
    })
}

/// Records the regression on an f64 tape. Returns `(ss_res, ss_total)`.
fn regression(tape: &mut Tape<f64>, z1: Var, z2: Var, eta: f64) -> Result<(Var, Var)> {
    let n1 = tape.value(z1).shape()[0];
    let n2 = tape.value(z2).shape()[0];
    if n1 != n2 {
        return Err(Error::shape("correlation", tape.value(z1).shape(), tape.value(z2).shape()));
    }
    let mask = independent_columns(tape.value(z1), eta)?;
    let kept = kept_indices(&mask);
    let sel = tape.select_columns(z1, &kept)?;
    let d = tape.append_ones_column(sel)?;
    let gram = tape.matmul_t(d, d, true, false)?;
    let g = tape.value(gram);
    let cols = g.shape()[0];
    let trace: f64 = (0..cols).map(|i| g.at2(i, i)).sum();
    let gram = tape.add_diagonal(gram, RIDGE * trace / cols as f64)?;
    let inv = tape.chol_inverse(gram)?;
    let dtz = tape.matmul_t(d, z2, true, false)?;
    let beta = tape.matmul(inv, dtz)?;
    let fit = tape.matmul(d, beta)?;
    let res = tape.sub(z2, fit)?;
    let res2 = tape.square(res);
    let ss_res = tape.sum(res2);
    let centered = tape.center_columns(z2)?;
    let c2 = tape.square(centered);
    let ss_total = tape.sum(c2);
    Ok((ss_res, ss_total))
}

/// Goodness of the OLS fit of `z2` on the pruned, augmented `z1`.
pub fn r_squared(z1: &FeatureBatch, z2: &FeatureBatch) -> Result<CorrelationResult> {
    let mut tape = Tape::new();
    let a = tape.constant(z1.matrix().clone());
    let b = tape.constant(z2.matrix().clone());
    let (res, tot) = regression(&mut tape, a, b, DEFAULT_ETA)?;
    let (ss_res, ss_total) = (tape.value(res).item(), tape.value(tot).item());
    if ss_total == 0.0 {
        return Err(Error::Degenerate("target features are constant".into()));
    }
    Ok(CorrelationResult {
        ss_res,
        ss_total,
        r_squared: 1.0 - ss_res / ss_total,
        loss: (ss_total + DEFAULT_EPS).ln() - (ss_res + DEFAULT_EPS).ln(),
    })
}

/// Adds the correlation loss between two batched feature tensors already on
/// `tape` and returns it as a scalar node, together with its components.
///
/// The regression runs in 64-bit on a private tape; its gradients with
/// respect to both inputs are carried back as a fused node, so calling
/// [`Tape::backward`] on anything built from the result reaches both.
pub fn correlation_loss<T: Real>(
    tape: &mut Tape<T>,
    z1: Var,
    z2: Var,
    eps: f64,
) -> Result<(Var, CorrelationResult)> {
    correlation_loss_with(tape, z1, z2, eps, DEFAULT_ETA)
}

pub fn correlation_loss_with<T: Real>(
    tape: &mut Tape<T>,
    z1: Var,
    z2: Var,
    eps: f64,
    eta: f64,
) -> Result<(Var, CorrelationResult)> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("stabilizer must be positive, got {eps}")));
    }
    let flat = |t: &Tensor<T>| t.cast::<f64>().reshape(&[t.rows(), t.row_len()]);
    let (a, b) = (flat(tape.value(z1))?, flat(tape.value(z2))?);
    let mut inner = Tape::<f64>::new();
    let va = inner.param(a);
    let vb = inner.param(b);
    let (res, tot) = regression(&mut inner, va, vb, eta)?;
    let res_e = inner.add_scalar(res, eps);
    let tot_e = inner.add_scalar(tot, eps);
    let lt = inner.log(tot_e)?;
    let lr = inner.log(res_e)?;
    let loss = inner.sub(lt, lr)?;
    let (ss_res, ss_total) = (inner.value(res).item(), inner.value(tot).item());
    let value = inner.value(loss).item();
    let mut inputs = Vec::new();
    let need = tape.requires_grad(z1) || tape.requires_grad(z2);
    if need {
        inner.backward(loss)?;
        for (outer, v) in [(z1, va), (z2, vb)] {
            let g = inner.grad(v).expect("inner param grad");
            inputs.push((outer, g.data().iter().map(|&x| T::of(x)).collect()));
        }
    }
    let out = tape.fused_scalar(T::of(value), inputs)?;
    let r2 = if ss_total > 0.0 { 1.0 - ss_res / ss_total } else { f64::NAN };
    Ok((
        out,
        CorrelationResult {
            ss_res,
            ss_total,
            r_squared: r2,
            loss: value,
        },
    ))
}

/// Pearson correlation between two flattened feature arrays.
pub fn pearson_features(z1: &FeatureBatch, z2: &FeatureBatch) -> Result<f64> {
    let (a, b) = (z1.matrix().data(), z2.matrix().data());
    if a.len() != b.len() {
        return Err(Error::shape("pearson", z1.matrix().shape(), z2.matrix().shape()));
    }
    crate::metrics::pearson(a, b).ok_or_else(|| Error::Degenerate("zero feature variance".into()))
}

/// Scores of the centered rows along the top principal component, found by
/// power iteration on the covariance. The first non-negligible loading of
/// the component is made positive.
pub fn pca_project_1d(z: &FeatureBatch) -> Result<Vec<f64>> {
    let (n, m) = (z.n(), z.m());
    let x = z.matrix().data();
    let mut means = vec![0.0; m];
    for row in x.chunks(m) {
        means.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    means.iter_mut().for_each(|v| *v /= n as f64);
    let xc: Vec<f64> = x.iter().enumerate().map(|(i, &v)| v - means[i % m]).collect();
    let xc = Tensor::new(&[n, m], xc)?;
    let cov = xc.transpose().matmul(&xc)?.map(|v| v / (n - 1) as f64);
    if cov.max_abs() == 0.0 {
        return Err(Error::Degenerate("zero covariance".into()));
    }
    // Deterministic start with no special alignment to the coordinate axes.
    let mut v: Vec<f64> = (0..m).map(|j| 1.0 + ((j as f64 * 0.618_034) % 1.0)).collect();
    normalize(&mut v);
    for _ in 0..10_000 {
        let mut w = vec![0.0; m];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = (0..m).map(|j| cov.at2(i, j) * v[j]).sum();
        }
        if normalize(&mut w) == 0.0 {
            // Start vector orthogonal to every populated direction.
            w = (0..m).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect();
        }
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = w;
        if delta < 1e-9 {
            break;
        }
    }
    if let Some(&first) = v.iter().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok((0..n)
        .map(|i| (0..m).map(|j| xc.at2(i, j) * v[j]).sum())
        .collect())
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn gauss(seed: u64, n: usize, m: usize) -> Tensor<f64> {
        rng::normal(&mut rng::seeded(seed), &[n, m], 0.0, 1.0)
    }

    #[test]
    fn duplicated_column_is_dropped_once() {
        let z = gauss(1, 40, 3);
        let mut data = Vec::new();
        for i in 0..40 {
            let r = &z.data()[i * 3..i * 3 + 3];
            data.extend_from_slice(&[r[0], r[1], r[1], r[2]]);
        }
        let fb = FeatureBatch::new(Tensor::new(&[40, 4], data).unwrap()).unwrap();
        let p = prune_columns(&fb, DEFAULT_ETA).unwrap();
        assert_eq!(p.keep_mask, vec![true, true, false, true]);
        assert_eq!(p.design.shape(), &[40, 4]);
        assert!((0..40).all(|i| p.design.at2(i, 3) == 1.0));
    }

    #[test]
    fn zero_features_are_degenerate() {
        let fb = FeatureBatch::new(Tensor::zeros(&[10, 3])).unwrap();
        assert!(matches!(prune_columns(&fb, DEFAULT_ETA), Err(Error::Degenerate(_))));
        let wide = FeatureBatch::new(Tensor::zeros(&[3, 10])).unwrap();
        assert!(matches!(prune_columns(&wide, DEFAULT_ETA), Err(Error::Dimension { .. })));
    }

    #[test]
    fn affine_target_is_perfectly_predicted() {
        let z1 = gauss(2, 100, 5);
        let a = gauss(3, 5, 4);
        let z2 = z1.matmul(&a).unwrap().map(|v| v + 2.5);
        let r = r_squared(
            &FeatureBatch::new(z1).unwrap(),
            &FeatureBatch::new(z2).unwrap(),
        )
        .unwrap();
        assert!(r.r_squared > 1.0 - 1e-9, "{r:?}");
        assert!(r.loss > 5.0);
    }

    #[test]
    fn constant_target_is_rejected() {
        let z1 = FeatureBatch::new(gauss(4, 20, 2)).unwrap();
        let z2 = FeatureBatch::new(Tensor::full(&[20, 3], 1.0)).unwrap();
        assert!(matches!(r_squared(&z1, &z2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn pca_of_rank_one_data_recovers_scores() {
        let s: Vec<f64> = (0..30).map(|i| (i as f64 - 14.5) * 0.3).collect();
        let v = [0.6, -0.8, 0.0];
        let data: Vec<f64> = s.iter().flat_map(|&si| v.iter().map(move |&vj| si * vj)).collect();
        let fb = FeatureBatch::new(Tensor::new(&[30, 3], data).unwrap()).unwrap();
        let p = pca_project_1d(&fb).unwrap();
        for (a, b) in p.iter().zip(&s) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn pearson_sign_cases() {
        let z1 = gauss(5, 20, 3);
        let z2 = z1.map(|v| 3.0 * v + 7.0);
        let z3 = z1.map(|v| -v);
        let f1 = FeatureBatch::new(z1).unwrap();
        assert!((pearson_features(&f1, &FeatureBatch::new(z2).unwrap()).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_features(&f1, &FeatureBatch::new(z3).unwrap()).unwrap() + 1.0).abs() < 1e-12);
    }
}
