//! Property tests over the numeric invariants.

use bia_core::data::{augment, AugmentPolicy};
use bia_core::generator::project;
use bia_core::objectives::{attention_map, cosine_feature_loss};
use bia_core::rng::seed_everything;
use ndarray::Array4;
use proptest::prelude::*;

fn tensor_strategy(lo: f64, hi: f64) -> impl Strategy<Value = Array4<f64>> {
    proptest::collection::vec(lo..hi, 48)
        .prop_map(|v| Array4::from_shape_vec((1, 3, 4, 4), v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_stays_inside_ball_and_range(
        x in tensor_strategy(0.0, 1.0),
        candidate in tensor_strategy(-0.5, 1.5),
        eps in 0.0f64..0.5,
    ) {
        let out = project(&candidate, &x, eps).unwrap();
        let linf = (&out - &x).iter().map(|v| v.abs()).fold(0.0, f64::max);
        prop_assert!(linf <= eps + 1e-6);
        prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again = project(&out, &x, eps).unwrap();
        prop_assert_eq!(again, out);
    }

    #[test]
    fn cosine_stays_bounded(
        f_adv in tensor_strategy(-2.0, 2.0),
        f_clean in tensor_strategy(0.1, 2.0),
    ) {
        let v = cosine_feature_loss(&f_adv, &f_clean).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
    }

    #[test]
    fn attention_is_non_negative(f in tensor_strategy(-3.0, 3.0)) {
        let a = attention_map(&f);
        prop_assert!(a.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn augment_preserves_shape_and_range(
        batch in tensor_strategy(0.0, 1.0),
        flip in 0.0f64..1.0,
        jitter in 0.0f64..0.5,
        crop_low in 0.5f64..1.0,
        seed in 0u64..1000,
    ) {
        let policy = AugmentPolicy {
            enabled: true,
            crop_scale_range: (crop_low, 1.0),
            horizontal_flip_prob: flip,
            jitter_strength: jitter,
        };
        let mut rng = seed_everything(seed).stream("prop-augment");
        let out = augment(&batch, &policy, &mut rng).unwrap();
        prop_assert_eq!(out.dim(), batch.dim());
        prop_assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
