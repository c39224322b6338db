use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mimkit::mask::{blockwise_mask, masked_count, random_mask, BlockShape};
use mimkit::objective::{pairwise_loss, LossKind, NormKind};
use mimkit::patch::patchify;
use mimkit::train::{clip_grad_norm, cosine_lr, global_norm};
use mimkit::{Tape, Tensor};

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_round_trips(grid in 1usize..4, p in 1usize..5, c in 1usize..4, seed: u64) {
        let side = grid * p;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..side * side * c).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let image = Tensor::new(&[side, side, c], data).unwrap();
        let seq = patchify(&image, p).unwrap();
        prop_assert_eq!(seq.len(), grid * grid);
        prop_assert_eq!(seq.patch_dim(), p * p * c);
        prop_assert!(seq.unpatchify().bit_eq(&image));
    }

    #[test]
    fn random_mask_count_is_exact(n in 1usize..300, ratio in 0.0f64..=1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(n, ratio, &mut rng).unwrap();
        prop_assert_eq!(m.len(), masked_count(n, ratio));
        prop_assert!(m.indices().windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.indices().iter().all(|&i| i < n));
    }

    #[test]
    fn blockwise_mask_count_is_exact(h in 2usize..16, w in 2usize..16, ratio in 0.0f64..=1.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = blockwise_mask((h, w), ratio, &BlockShape::default(), &mut rng).unwrap();
        prop_assert_eq!(m.len(), masked_count(h * w, ratio));
        prop_assert!(m.indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn layer_norm_rows_are_standardised(row in vec_strategy(16)) {
        let spread = row.iter().cloned().fold(f64::MIN, f64::max) - row.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-3);
        let t = Tensor::new(&[1, 16], row).unwrap();
        let out = NormKind::LayerNorm { eps: 1e-6 }.apply(&t).unwrap();
        let mean = out.data().iter().sum::<f64>() / 16.0;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        prop_assert!(mean.abs() < 1e-6);
        prop_assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn l2_rows_have_unit_norm(row in vec_strategy(8)) {
        prop_assume!(row.iter().any(|v| v.abs() > 1e-3));
        let t = Tensor::new(&[1, 8], row).unwrap();
        let out = NormKind::L2 { eps: 1e-6 }.apply(&t).unwrap();
        let norm = out.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one(row in vec_strategy(7)) {
        let t = Tensor::new(&[1, 7], row).unwrap();
        let out = Tape::no_grad().softmax(&t, 1).unwrap();
        prop_assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(out.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn clipped_norm_never_exceeds_max(a in vec_strategy(5), b in vec_strategy(3), max in 0.01f64..10.0) {
        let mut x = Tensor::new(&[5], a).unwrap();
        let mut y = Tensor::new(&[3], b).unwrap();
        let before = clip_grad_norm(&mut [&mut x, &mut y], max).unwrap();
        let after = global_norm(&[&x, &y]);
        prop_assert!(after <= max + 1e-6);
        if before <= max {
            prop_assert!((after - before).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_vanish_only_at_mimicry(o in vec_strategy(6)) {
        for kind in [LossKind::Mse, LossKind::L1, LossKind::SmoothL1 { beta: 1.0 }] {
            prop_assert_eq!(pairwise_loss(&o, &o, kind).unwrap(), 0.0);
            let shifted: Vec<f64> = o.iter().map(|v| v + 0.5).collect();
            prop_assert!(pairwise_loss(&o, &shifted, kind).unwrap() > 0.0);
        }
        prop_assume!(o.iter().any(|v| v.abs() > 1e-3));
        prop_assert!(pairwise_loss(&o, &o, LossKind::Cosine).unwrap().abs() < 1e-8);
    }

    #[test]
    fn cosine_lr_stays_in_range(warmup in 0usize..50, extra in 1usize..500, step_frac in 0.0f64..=1.0) {
        let total = warmup + extra;
        let step = (step_frac * total as f64) as usize;
        let lr = cosine_lr(step, warmup, total, 1.5e-3, 1e-5);
        prop_assert!((0.0..=1.5e-3 + 1e-18).contains(&lr));
        if step >= warmup {
            prop_assert!(lr >= 1e-5 - 1e-18);
        }
    }
}
