use decorr_core::attacks::{craft, craft_chunked, AttackConfig, ClassifierObjective, DnaJointObjective, Norm};
use decorr_core::corr::{correlation_loss, r_squared, FeatureBatch, DEFAULT_EPS};
use decorr_core::data::batches;
use decorr_core::metrics::{either_path_accuracy, TransferRecord};
use decorr_core::models::{build_dna_mnist, build_eval_classifier_mnist, build_fc_classifier, Dna, Model};
use decorr_core::{rng, Tape, Tensor};
use proptest::prelude::*;

fn images(seed: u64, n: usize) -> (Tensor<f32>, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let x = rng::uniform::<f32>(&mut r, &[n, 1, 28, 28], 0.0, 1.0);
    let y = (0..n).map(|i| (i * 7 + seed as usize) % 10).collect();
    (x, y)
}

fn in_range(t: &Tensor<f32>) -> bool {
    t.data().iter().all(|&v| (0.0..=1.0).contains(&v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attacks_stay_in_the_ball_and_the_data_range(
        seed in 0u64..1000,
        eps in 0.01f64..0.3,
        pgd in any::<bool>(),
        l2 in any::<bool>(),
        steps in 1usize..6,
    ) {
        let model = Model::<f32>::init(build_fc_classifier(), seed).unwrap();
        let (x, y) = images(seed, 3);
        let norm = if l2 { Norm::L2 } else { Norm::Linf };
        let cfg = if pgd { AttackConfig::pgd(norm, eps, steps) } else { AttackConfig::fgsm(norm, eps) }.with_seed(seed);
        let adv = craft(&ClassifierObjective { model: &model }, &x, &y, &cfg).unwrap();
        let (linf, l2d) = adv.max_distances();
        // f32 storage rounds the perturbed values
        let slack = 1e-5;
        match norm {
            Norm::Linf => prop_assert!(linf <= eps + slack, "linf {linf} > {eps}"),
            Norm::L2 => prop_assert!(l2d <= eps * 28.0 + slack, "l2 {l2d} > {}", eps * 28.0),
        }
        prop_assert!(in_range(&adv.perturbed));
        // same seed, same perturbation
        let again = craft(&ClassifierObjective { model: &model }, &x, &y, &cfg).unwrap();
        prop_assert_eq!(again.perturbed, adv.perturbed);
    }

    #[test]
    fn batches_partition_the_index_range(
        n in 1usize..400,
        size in 1usize..64,
        seed in any::<u64>(),
        epoch in 0u64..5,
    ) {
        prop_assume!(size <= n);
        let all: Vec<Vec<usize>> = batches(n, size, seed, epoch, false).unwrap().collect();
        let mut seen: Vec<usize> = all.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        prop_assert!(all[..all.len() - 1].iter().all(|b| b.len() == size));

        let kept: Vec<Vec<usize>> = batches(n, size, seed, epoch, true).unwrap().collect();
        prop_assert_eq!(kept.len(), n / size);
        prop_assert!(kept.iter().all(|b| b.len() == size));
        // dropping the tail keeps the same order for the full batches
        prop_assert_eq!(&kept[..], &all[..kept.len()]);
        let again: Vec<Vec<usize>> = batches(n, size, seed, epoch, false).unwrap().collect();
        prop_assert_eq!(again, all);
    }

    #[test]
    fn r_squared_is_a_fraction_and_ignores_invertible_maps_of_the_regressors(
        seed in any::<u64>(),
        n in 30usize..80,
        m1 in 1usize..8,
        m2 in 1usize..6,
    ) {
        let mut r = rng::seeded(seed);
        let z1 = rng::normal::<f64>(&mut r, &[n, m1], 0.0, 1.0);
        let z2 = rng::normal::<f64>(&mut r, &[n, m2], 0.0, 1.0);
        let base = r_squared(&FeatureBatch::new(z1.clone()).unwrap(), &FeatureBatch::new(z2.clone()).unwrap()).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&base.r_squared));
        prop_assert!(base.ss_res <= base.ss_total * (1.0 + 1e-12));

        // a well-conditioned mix of the regressors spans the same space
        let mut a = rng::normal::<f64>(&mut r, &[m1, m1], 0.0, 0.3);
        for i in 0..m1 {
            a.data_mut()[i * m1 + i] += 2.0;
        }
        let mixed = z1.matmul(&a).unwrap();
        let moved = r_squared(&FeatureBatch::new(mixed).unwrap(), &FeatureBatch::new(z2.clone()).unwrap()).unwrap();
        prop_assert!((moved.r_squared - base.r_squared).abs() < 1e-8);

        // the loss node reports the same decomposition
        let mut tape = Tape::<f64>::new();
        let (a1, b1) = (tape.constant(z1), tape.constant(z2));
        let (loss, res) = correlation_loss(&mut tape, a1, b1, DEFAULT_EPS).unwrap();
        let expect = (base.ss_total + DEFAULT_EPS).ln() - (base.ss_res + DEFAULT_EPS).ln();
        prop_assert!((tape.value(loss).item() - expect).abs() < 1e-9);
        prop_assert!((res.r_squared - base.r_squared).abs() < 1e-12);
    }

    #[test]
    fn transfer_rate_is_conditional_on_fooling_the_source(
        seed in any::<u64>(),
        n in 1usize..60,
    ) {
        let mut r = rng::seeded(seed);
        let labels: Vec<usize> = rng::permutation(&mut r, n).into_iter().map(|v| v % 3).collect();
        let ps: Vec<usize> = rng::permutation(&mut r, n).into_iter().map(|v| v % 3).collect();
        let pt: Vec<usize> = rng::permutation(&mut r, n).into_iter().map(|v| v % 3).collect();
        let rec = TransferRecord::tally("a", "s", "t", &ps, &pt, &labels).unwrap();
        let fooled = ps.iter().zip(&labels).filter(|(p, y)| p != y).count();
        prop_assert_eq!(rec.n_fooled_source, fooled);
        prop_assert!(rec.n_fooled_both <= rec.n_fooled_source);
        match rec.rate() {
            None => prop_assert_eq!(fooled, 0),
            Some(v) => prop_assert!((0.0..=1.0).contains(&v)),
        }
        let (either, avg) = either_path_accuracy(&ps, &pt, &labels);
        prop_assert!(either + 1e-12 >= avg);
    }
}

#[test]
fn chunked_crafting_matches_chunk_by_chunk_crafting() {
    let model = Model::<f32>::init(build_fc_classifier(), 8).unwrap();
    let (x, y) = images(8, 7);
    let cfg = AttackConfig::pgd(Norm::Linf, 0.1, 3).with_seed(5);
    let obj = ClassifierObjective { model: &model };
    let whole = craft_chunked(&obj, &x, &y, &cfg, 3).unwrap();
    for (k, start) in [0usize, 3, 6].into_iter().enumerate() {
        let end = (start + 3).min(7);
        let c = AttackConfig {
            seed: rng::derive(5, k as u64),
            ..cfg.clone()
        };
        let part = craft(&obj, &x.slice_rows(start, end), &y[start..end], &c).unwrap();
        assert_eq!(part.perturbed, whole.perturbed.slice_rows(start, end));
    }
}

#[test]
fn joint_autoencoder_attack_respects_the_budget() {
    let dna = Dna::<f32>::init(build_dna_mnist(2).unwrap(), 3).unwrap();
    let clf = Model::<f32>::init(build_eval_classifier_mnist(), 4).unwrap();
    let (x, y) = images(2, 2);
    let cfg = AttackConfig::pgd(Norm::Linf, 0.05, 4).with_seed(1);
    let adv = craft(&DnaJointObjective { dna: &dna, classifier: &clf }, &x, &y, &cfg).unwrap();
    assert!(adv.max_distances().0 <= 0.05 + 1e-6);
    assert!(in_range(&adv.perturbed));
    // one trace row per iterate, starting point first, ending at the result
    assert_eq!(adv.trace.len(), 5);
    assert_eq!(adv.trace.last().unwrap(), &adv.after);
}
