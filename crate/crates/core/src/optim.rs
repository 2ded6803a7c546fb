//! Adam over named parameter sets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_LR: f64 = 5e-3;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter named in `grads`. Parameters without a
    /// gradient are left alone. A non-finite gradient aborts before anything
    /// is written; the caller supplies the epoch.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::TrainingFailure {
                    epoch: 0,
                    reason: format!("non-finite gradient for {name}"),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - num_traits::Float::powi(self.beta1, t));
        let c2 = T::of(1.0 - num_traits::Float::powi(self.beta2, t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        let one = T::one();
        for (name, g) in grads {
            let p = params.params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::default();
        ps.params.insert("w".into(), Tensor::scalar(v));
        ps
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut g = BTreeMap::new();
        g.insert("w".into(), Tensor::scalar(v));
        g
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes the first step lr·sign(g) (up to eps).
        let mut ps = single(1.0);
        let mut opt = Adam::new(0.01);
        opt.step(&mut ps, &grad(3.7)).unwrap();
        let w = ps.params["w"].item();
        assert!((w - 0.99).abs() < 1e-9, "{w}");
    }

    #[test]
    fn minimizes_quadratic() {
        let mut ps = single(4.0);
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let w = ps.params["w"].item();
            opt.step(&mut ps, &grad(2.0 * (w - 1.5))).unwrap();
        }
        assert!((ps.params["w"].item() - 1.5).abs() < 1e-3);
    }

    #[test]
    fn rejects_nan_without_writing() {
        let mut ps = single(1.0);
        let mut opt = Adam::new(0.01);
        let err = opt.step(&mut ps, &grad(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::TrainingFailure { .. }));
        assert_eq!(ps.params["w"].item(), 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }
}
