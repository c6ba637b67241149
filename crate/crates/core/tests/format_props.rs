//! Property tests over the projection and the perturbation format.

use proptest::prelude::*;
use uaplab_core::styshapes::{IMG_C, IMG_ELEMS, IMG_H, IMG_W};
use uaplab_core::tensor::Tensor;
use uaplab_core::uap::{
    load_perturbation, project_linf, random_noise_baseline, save_perturbation, AttackMode,
    Perturbation, SourceModel,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent_and_in_ball(
        values in prop::collection::vec(-2.0f32..2.0, 16),
        epsilon in 0.5f32..16.0,
    ) {
        let t = Tensor::new(vec![16], values).unwrap();
        let once = project_linf(&t, epsilon).unwrap();
        let twice = project_linf(&once, epsilon).unwrap();
        prop_assert_eq!(once.data(), twice.data());
        let bound = epsilon / 255.0;
        prop_assert!(once.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn perturbation_stream_roundtrips_bit_exactly(
        seed in any::<u64>(),
        epsilon in 1.0f32..12.0,
        target in prop::option::of(0u16..10),
        achieved in 0.0f64..1.0,
    ) {
        let noise = random_noise_baseline(epsilon, seed).unwrap();
        let p = Perturbation {
            mode: target.map_or(AttackMode::Untargeted, AttackMode::Targeted),
            achieved,
            clean_target_freq: target.map(|_| achieved / 2.0),
            source: SourceModel { arch: "convnet-M".into(), regime: "SIN+IN".into() },
            ..noise
        };
        let bytes = save_perturbation(&p);
        let loaded = load_perturbation(&bytes).unwrap();
        prop_assert_eq!(save_perturbation(&loaded), bytes);
        prop_assert_eq!(loaded.delta.shape(), &[IMG_C, IMG_H, IMG_W]);
        prop_assert_eq!(loaded.delta.numel(), IMG_ELEMS);
    }
}
