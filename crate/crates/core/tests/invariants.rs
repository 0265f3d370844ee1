mod common;

use hello_core::archive::{load_archive, save_archive, ElementWidth, NamedTensor, TensorArchive, TensorData};
use hello_core::config::{HardTargetMode, OutputSpace};
use hello_core::downstream::{hard_targets, mixup_with, Mix};
use hello_core::evalsuite::{partition_classes, storage_report};
use hello_core::nn::{ConvNet, ConvNetSpec};
use hello_core::projector::LabelOutput;
use hello_core::rng::seeded_rng;
use hello_core::synthesis::degrade;
use hello_core::teachers::{ensemble_soft_labels, select_teachers, TeacherCheckpoint};
use hello_core::Error;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, d| m.max(d.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fresh_adapters_leave_logits_unchanged(seed in any::<u64>(), re in 1usize..4, rh in 1usize..4) {
        let base = common::micro_projector([3, 8, 8], 8, seed % 1000);
        let mut adapted = base.clone();
        adapted.attach_lora(&|n| n.starts_with("conv"), re, rh, 1.0, &mut seeded_rng(seed)).unwrap();
        let x = common::uniform_images(4, [3, 8, 8], seed);
        let a = base.forward(x.view()).unwrap();
        let b = adapted.forward(x.view()).unwrap();
        prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn merged_forward_matches_adapter_forward(seed in any::<u64>(), scale in 0.1f64..3.0) {
        let mut p = common::micro_projector([3, 8, 8], 8, 7);
        let mut rng = seeded_rng(seed);
        p.attach_lora(&|n| n.starts_with("conv"), 2, 2, scale, &mut rng).unwrap();
        let mut params = p.adapter_params();
        for v in params.values_mut() {
            v.mapv_inplace(|_| rng.random::<f64>() * 0.2 - 0.1);
        }
        p.set_adapter_params(&params).unwrap();
        let x = common::uniform_images(4, [3, 8, 8], seed ^ 1);
        let a = p.forward(x.view()).unwrap();
        let m = p.merge().unwrap();
        prop_assert!(max_abs_diff(&a, &m.forward(x.view()).unwrap()) <= 1e-9);
        prop_assert!(m.adapters().is_empty());
    }

    #[test]
    fn probability_labels_are_distributions(seed in any::<u64>(), temperature in 0.01f64..2.0) {
        let mut p = common::micro_projector([3, 8, 8], 8, seed % 50);
        p.meta.output = LabelOutput { space: OutputSpace::Probabilities, temperature };
        let y = p.labels(common::uniform_images(3, [3, 8, 8], seed).view()).unwrap();
        for row in y.outer_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
        let z = p.labels_in(common::uniform_images(3, [3, 8, 8], seed).view(), OutputSpace::Logits).unwrap();
        let raw = p.forward(common::uniform_images(3, [3, 8, 8], seed).view()).unwrap();
        prop_assert!(max_abs_diff(&z, &(raw / temperature)) <= 1e-12);
    }

    #[test]
    fn storage_is_the_exact_product(k in 1u64..5000, n in 1u64..100_000, c in 1u64..30_000, w in prop::sample::select(vec![4u64, 8])) {
        let r = storage_report(k, n, c, ElementWidth::from_bytes(w).unwrap(), 0, None, None).unwrap();
        prop_assert_eq!(r.soft_label_bytes as u128, k as u128 * n as u128 * c as u128 * w as u128);
        prop_assert_eq!(r.projector_bytes, 0);
    }

    #[test]
    fn partition_covers_every_class_once(classes in 1usize..200, steps_frac in 0.0f64..1.0) {
        let steps = ((classes as f64 * steps_frac) as usize).clamp(1, classes);
        let parts = partition_classes(classes, steps).unwrap();
        prop_assert_eq!(parts.len(), steps);
        let flat: Vec<usize> = parts.iter().flatten().copied().collect();
        prop_assert_eq!(flat, (0..classes).collect::<Vec<_>>());
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1 && lo >= 1);
    }

    #[test]
    fn mixed_hard_targets_are_distributions(labels in prop::collection::vec(0usize..5, 1..12), lam in 0.0f64..=1.0, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..labels.len()).collect();
        perm.shuffle(&mut seeded_rng(seed));
        let mix = Mix { lam, perm };
        for mode in [HardTargetMode::Mixed, HardTargetMode::Unmixed] {
            let t = hard_targets(&labels, 5, &mix, mode);
            for row in t.outer_iter() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degraded_pixels_stay_in_range(seed in any::<u64>(), factor in 2usize..5) {
        let x = common::uniform_images(2, [3, 12, 12], seed);
        let d = degrade(x.view(), factor).unwrap();
        prop_assert_eq!(d.dim(), x.dim());
        prop_assert!(d.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
    }

    #[test]
    fn archive_round_trip_is_bit_exact(values in prop::collection::vec(-1e6f64..1e6, 1..64), eight in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.arc");
        let data = if eight {
            TensorData::F64(values.clone())
        } else {
            TensorData::F32(values.iter().map(|v| *v as f32).collect())
        };
        let mut a = TensorArchive::new();
        a.insert("x/values", NamedTensor::new(vec![values.len()], data).unwrap()).unwrap();
        save_archive(&path, &a).unwrap();
        let b = load_archive(&path).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn identity_mix_is_a_no_op() {
    let x = common::uniform_images(3, [3, 4, 4], 0);
    let mix = Mix::identity(3);
    assert_eq!(mixup_with(&x, mix.lam, &mix.perm), x);
}

#[test]
fn ensemble_is_the_mean_of_member_outputs() {
    let spec = ConvNetSpec::named("convnet-xs", [3, 8, 8], 4).unwrap();
    let checkpoints: Vec<TeacherCheckpoint> = (1..=6)
        .map(|epoch| TeacherCheckpoint {
            epoch,
            net: ConvNet::init(spec.clone(), &mut seeded_rng(epoch as u64)).unwrap(),
        })
        .collect();
    let x = common::uniform_images(5, [3, 8, 8], 3);
    for space in [OutputSpace::Probabilities, OutputSpace::Logits] {
        let ens = select_teachers(&checkpoints, (2, 5), 4, space).unwrap();
        assert_eq!(ens.epochs(), vec![2, 3, 4, 5]);
        let got = ensemble_soft_labels(&ens, x.view()).unwrap();
        let mut want = Array2::<f64>::zeros((5, 4));
        for m in &ens.members {
            let z = m.net.predict(x.view()).unwrap();
            let out = match space {
                OutputSpace::Logits => z,
                OutputSpace::Probabilities => {
                    let mut p = z.clone();
                    for mut row in p.outer_iter_mut() {
                        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        row.mapv_inplace(|v| (v - mx).exp());
                        let s = row.sum();
                        row /= s;
                    }
                    p
                }
            };
            want = want + out;
        }
        want /= 4.0;
        assert!(max_abs_diff(&got, &want) < 1e-12);
    }
    assert!(matches!(
        select_teachers(&checkpoints, (5, 6), 3, OutputSpace::Probabilities),
        Err(Error::InsufficientTeachers { needed: 3, available: 2, .. })
    ));
}

#[test]
fn storage_overflow_is_an_error() {
    let r = storage_report(u64::MAX / 2, 1 << 20, 1 << 20, ElementWidth::Eight, 0, None, None);
    assert!(matches!(r, Err(Error::Overflow(_))));
}
