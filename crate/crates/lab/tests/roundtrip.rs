use decorr_core::data::Split;
use decorr_core::Tensor;
use decorr_lab::{fmat, idx, pnm};
use proptest::collection::vec;
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = Tensor<f64>> {
    (1usize..12, 1usize..12).prop_flat_map(|(r, c)| {
        vec(any::<f64>(), r * c).prop_map(move |d| Tensor::new(&[r, c], d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fmat_is_bit_exact(m in matrix()) {
        let bytes = fmat::encode(&m).unwrap();
        let back = fmat::decode(&bytes, "m.fmat").unwrap();
        prop_assert_eq!(back.shape(), m.shape());
        let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn truncated_fmat_is_rejected(m in matrix(), cut in any::<prop::sample::Index>()) {
        let bytes = fmat::encode(&m).unwrap();
        let at = cut.index(bytes.len());
        prop_assert!(fmat::decode(&bytes[..at], "m.fmat").is_err());
    }

    #[test]
    fn idx_pixels_and_labels_survive(
        n in 1usize..6,
        seed in any::<u64>(),
    ) {
        let pixels: Vec<u8> = (0..n * 784).map(|i| (seed.wrapping_mul(31).wrapping_add(i as u64 * 2654435761) >> 7) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| ((seed as usize + i) % 10) as u8).collect();
        let ds = idx::decode(&idx::encode_images(n, &pixels), &idx::encode_labels(&labels), Split::Test, ("i", "l")).unwrap();
        prop_assert_eq!(ds.images().shape(), &[n, 1, 28, 28][..]);
        let bytes: Vec<u8> = ds.images().data().iter().map(|&v| pnm::to_byte(v)).collect();
        prop_assert_eq!(bytes, pixels);
        let got: Vec<u8> = ds.labels().iter().map(|&l| l as u8).collect();
        prop_assert_eq!(got, labels);
    }
}
