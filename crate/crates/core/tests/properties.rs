mod common;

use proptest::prelude::*;

use common::{batch, family, rng, tiny};
use wemoe_core::model::{accuracy, forward};
use wemoe_core::synth::{corrupt, corrupt_at_level, gen_task, Corruption, TaskSpec};
use wemoe_core::tta::entropy_loss;
use wemoe_core::{Batch, Tensor};

const KINDS: [Corruption; 4] = [
    Corruption::GaussianNoise,
    Corruption::ImpulseNoise,
    Corruption::Contrast,
    Corruption::Pixelate,
];

fn small_task(seed: u64) -> (Batch, Batch) {
    let cfg = tiny(1);
    let spec = TaskSpec {
        n_train: 40,
        n_test: 20,
        subspace: 2,
        ..TaskSpec::new(0, cfg.n_classes[0], seed)
    };
    gen_task(&spec, &cfg).unwrap()
}

#[test]
fn forward_is_row_equivariant() {
    let cfg = tiny(2);
    let (theta_0, _) = family(&cfg, 41);
    let b = batch(&cfg, 6, 1, 42);
    let all = forward(&theta_0, &cfg, &b, None).unwrap();
    let perm = [4, 0, 5, 2, 1, 3];
    let shuffled = forward(&theta_0, &cfg, &b.gather(&perm).unwrap(), None).unwrap();
    let c = all.shape()[1];
    for (i, &p) in perm.iter().enumerate() {
        for j in 0..c {
            assert!((shuffled.get(&[i, j]) - all.get(&[p, j])).abs() <= 1e-6);
        }
    }
    for i in 0..6 {
        let one = forward(&theta_0, &cfg, &b.slice(i, i + 1).unwrap(), None).unwrap();
        for j in 0..c {
            assert!((one.get(&[0, j]) - all.get(&[i, j])).abs() <= 1e-6);
        }
    }
}

#[test]
fn uniform_logits_have_maximal_entropy() {
    let e = entropy_loss(&Tensor::<f64>::zeros([3, 5])).unwrap();
    assert!((e - 5f64.ln()).abs() < 1e-12);
    let sharp = entropy_loss(&Tensor::<f64>::new([1, 2], vec![200.0, -200.0]).unwrap()).unwrap();
    assert!((0.0..1e-9).contains(&sharp));
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let (a, b) = small_task(1);
    let (c, d) = small_task(1);
    assert!(a.inputs.bit_eq(&c.inputs) && b.inputs.bit_eq(&d.inputs));
    assert_eq!(a.labels, c.labels);
    let (e, _) = small_task(2);
    assert!(!a.inputs.bit_eq(&e.inputs));
}

#[test]
fn corruption_limits() {
    let (_, test) = small_task(3);
    let same = corrupt_at_level(&test, Corruption::GaussianNoise, 0.0, 1).unwrap();
    assert!(same.inputs.bit_eq(&test.inputs));
    let same = corrupt_at_level(&test, Corruption::Contrast, 1.0, 1).unwrap();
    assert!(same.inputs.max_abs_diff(&test.inputs) <= 1e-6);
    let same = corrupt_at_level(&test, Corruption::Pixelate, 1.0, 1).unwrap();
    assert!(same.inputs.bit_eq(&test.inputs));
    let peak = test.inputs.data().iter().fold(0f32, |m, v| m.max(v.abs()));
    let all = corrupt_at_level(&test, Corruption::ImpulseNoise, 1.0, 1).unwrap();
    assert!(all.inputs.data().iter().all(|v| v.abs() == peak));
    assert!(corrupt(&test, Corruption::GaussianNoise, 6, 1).is_err());
    assert!(corrupt_at_level(&test, Corruption::ImpulseNoise, 1.5, 1).is_err());
}

#[test]
fn corruption_kinds_round_trip_their_names() {
    for k in KINDS {
        assert_eq!(Corruption::parse(k.as_str()).unwrap(), k);
    }
    assert!(Corruption::parse("motion_blur").is_err());
}

#[test]
fn accuracy_counts_argmax_hits() {
    let logits = Tensor::new([3, 2], vec![1.0f32, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
    assert_eq!(accuracy(&logits, &[0, 1, 0]), 2.0 / 3.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn corruptions_keep_labels_shapes_and_determinism(kind in 0usize..4, severity in 1u8..=5, seed in any::<u64>()) {
        let (_, test) = small_task(4);
        let k = KINDS[kind];
        let a = corrupt(&test, k, severity, seed).unwrap();
        let b = corrupt(&test, k, severity, seed).unwrap();
        prop_assert!(a.inputs.bit_eq(&b.inputs));
        prop_assert_eq!(a.inputs.shape(), test.inputs.shape());
        prop_assert_eq!(&a.labels, &test.labels);
        prop_assert_eq!(a.task_id, test.task_id);
        prop_assert!(a.inputs.is_finite());
    }

    #[test]
    fn stronger_gaussian_noise_moves_inputs_further(seed in any::<u64>()) {
        let (_, test) = small_task(5);
        let dist = |s: u8| {
            let c = corrupt(&test, Corruption::GaussianNoise, s, seed).unwrap();
            c.inputs.sub(&test.inputs).unwrap().l2_norm()
        };
        prop_assert!(dist(1) < dist(3) && dist(3) < dist(5));
    }

    #[test]
    fn routing_weights_do_not_depend_on_batch_neighbours(seed in 0u64..1000) {
        let cfg = tiny(2);
        let (theta_0, ft) = family(&cfg, 43);
        let m = wemoe_core::wemoe::upscale(&theta_0, &ft, &cfg, &Default::default(), &mut rng(44)).unwrap();
        let a = batch(&cfg, 1, 0, seed);
        let b = batch(&cfg, 3, 0, seed + 1);
        let alone = m.routing_weights(&a).unwrap();
        let mixed = m.routing_weights(&Batch::concat(&[b, a]).unwrap()).unwrap();
        for (x, y) in alone.iter().zip(&mixed) {
            for j in 0..2 {
                prop_assert!((x.get(&[0, j]) - y.get(&[3, j])).abs() <= 1e-6);
            }
        }
    }
}
