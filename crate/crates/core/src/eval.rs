//! Model-level evaluation: transfer between classifiers and either-path
//! accuracy of dual-neck autoencoders.

use alloc::string::String;
use alloc::vec::Vec;

use crate::attacks::{craft_chunked, AdvBatch, AttackConfig, ClassifierObjective, Method, Norm};
use crate::corr::{r_squared, FeatureBatch};
use crate::error::Result;
use crate::metrics::{either_path_accuracy, TransferRecord};
use crate::models::{Dna, Model, EVAL_CHUNK};
use crate::tensor::{Real, Tensor};

/// Short id such as `fgsm-linf`.
pub fn attack_id(cfg: &AttackConfig) -> String {
    let m = match cfg.method {
        Method::Fgsm => "fgsm",
        Method::Pgd => "pgd",
    };
    let n = match cfg.norm {
        Norm::Linf => "linf",
        Norm::L2 => "l2",
    };
    alloc::format!("{m}-{n}")
}

/// Replays `adv` (crafted against `source`) on `target`.
pub fn transfer_rate<T: Real>(
    source: (&str, &Model<T>),
    target: (&str, &Model<T>),
    adv: &AdvBatch<T>,
    attack: &str,
) -> Result<TransferRecord> {
    let ps = source.1.predict(&adv.perturbed)?;
    let pt = target.1.predict(&adv.perturbed)?;
    TransferRecord::tally(attack, source.0, target.0, &ps, &pt, &adv.labels)
}

/// Crafts against each member of a pair and replays on the other.
/// Returns the records for 1→2 and 2→1.
pub fn pair_transfer<T: Real>(
    models: [&Model<T>; 2],
    x: &Tensor<T>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<[TransferRecord; 2]> {
    let id = attack_id(cfg);
    let names = ["m1", "m2"];
    let mut out = Vec::with_capacity(2);
    for s in 0..2 {
        let adv = craft_chunked(&ClassifierObjective { model: models[s] }, x, y, cfg, EVAL_CHUNK)?;
        out.push(transfer_rate(
            (names[s], models[s]),
            (names[1 - s], models[1 - s]),
            &adv,
            &id,
        )?);
    }
    let b = out.pop().expect("two records");
    let a = out.pop().expect("two records");
    Ok([a, b])
}

/// Mean of the defined rates, `None` if neither is defined.
pub fn mean_rate(records: &[TransferRecord]) -> Option<f64> {
    let r: Vec<f64> = records.iter().filter_map(|r| r.rate()).collect();
    (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
}

/// Mean R² of `b`'s tagged features regressed on `a`'s, over consecutive
/// batches of `batch` samples of `x` (a short tail is dropped). Evaluating
/// at the training batch size keeps the sample-to-feature ratio the same as
/// in the correlation penalty.
pub fn feature_r_squared<T: Real>(a: &Model<T>, b: &Model<T>, x: &Tensor<T>, batch: usize) -> Result<f64> {
    let k = if batch == 0 { 0 } else { x.rows() / batch };
    if k == 0 {
        return Err(crate::Error::Config(alloc::format!(
            "need at least one batch of {batch} samples, have {}",
            x.rows()
        )));
    }
    let mut total = 0.0;
    for i in 0..k {
        let xb = x.slice_rows(i * batch, (i + 1) * batch);
        let za = FeatureBatch::from_batched(&a.features(&xb)?)?;
        let zb = FeatureBatch::from_batched(&b.features(&xb)?)?;
        total += r_squared(&za, &zb)?.r_squared;
    }
    Ok(total / k as f64)
}

/// `(either, avg)` of `classifier` on both reconstructions of `x`.
pub fn dna_either_path<T: Real>(dna: &Dna<T>, classifier: &Model<T>, x: &Tensor<T>, y: &[usize]) -> Result<(f64, f64)> {
    let [a, b] = dna.reconstruct(x)?;
    let pa = classifier.predict(&a)?;
    let pb = classifier.predict(&b)?;
    Ok(either_path_accuracy(&pa, &pb, y))
}

/// Accuracy of `classifier` on the reconstructions of a single autoencoder.
pub fn ae_accuracy<T: Real>(ae: &Model<T>, classifier: &Model<T>, x: &Tensor<T>, y: &[usize]) -> Result<f64> {
    let r = ae.outputs(x)?;
    Ok(crate::metrics::accuracy(&classifier.predict(&r)?, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::build_eval_classifier_mnist;
    use crate::rng;

    #[test]
    fn self_transfer_is_one() {
        let m = Model::<f32>::init(build_eval_classifier_mnist(), 1).unwrap();
        let x = rng::uniform::<f32>(&mut rng::seeded(1), &[6, 1, 28, 28], 0.0, 1.0);
        let y = m.predict(&x).unwrap();
        let cfg = AttackConfig::fgsm(Norm::Linf, 0.3);
        let adv = craft_chunked(&ClassifierObjective { model: &m }, &x, &y, &cfg, 4).unwrap();
        let r = transfer_rate(("a", &m), ("a", &m), &adv, "fgsm-linf").unwrap();
        if r.n_fooled_source > 0 {
            assert_eq!(r.rate(), Some(1.0));
        }
        assert!(r.n_fooled_both <= r.n_fooled_source && r.n_fooled_source <= r.n_total);
    }

    #[test]
    fn r_squared_of_a_model_with_itself_is_one() {
        let m = Model::<f64>::init(crate::models::build_fc_classifier(), 2).unwrap();
        let x = rng::uniform::<f64>(&mut rng::seeded(3), &[450, 1, 28, 28], 0.0, 1.0);
        let r = feature_r_squared(&m, &m, &x, 200).unwrap();
        assert!(r > 1.0 - 1e-6, "{r}");
        assert!(feature_r_squared(&m, &m, &x, 500).is_err());
    }

    #[test]
    fn ids_and_means() {
        assert_eq!(attack_id(&AttackConfig::pgd(Norm::L2, 0.1, 3)), "pgd-l2");
        let mk = |s, b| TransferRecord {
            attack: "x".into(),
            source: "a".into(),
            target: "b".into(),
            n_total: 10,
            n_fooled_source: s,
            n_fooled_both: b,
        };
        assert_eq!(mean_rate(&[mk(4, 2), mk(0, 0)]), Some(0.5));
        assert_eq!(mean_rate(&[mk(0, 0)]), None);
    }
}
