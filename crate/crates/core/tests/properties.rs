//! Property tests over metrics, mining and the replay buffer.

use std::collections::BTreeSet;

use proptest::prelude::*;

use cod_mining::bbox::BBox;
use cod_mining::importance::frozen_count;
use cod_mining::metrics::{average_precision, omega, rpd, rsd, ClassAPTable, Interpolation, IouSpec, ScoredBox};
use cod_mining::mining::{topk_count, topk_mask};
use cod_mining::replay::ReplayBuffer;

fn gts() -> Vec<(usize, BBox)> {
    (0..4)
        .map(|i| (i % 2, BBox::new(20.0 * i as f32, 0.0, 20.0 * i as f32 + 10.0, 10.0)))
        .collect()
}

fn detections(spec: &[(usize, bool, f32)]) -> Vec<ScoredBox> {
    let g = gts();
    spec.iter()
        .map(|&(k, hit, score)| {
            let (image, b) = g[k % 4];
            ScoredBox {
                image,
                bbox: if hit { b } else { BBox::new(200.0, 200.0, 210.0, 210.0) },
                score,
            }
        })
        .collect()
}

fn table(values: &[f64]) -> ClassAPTable {
    ClassAPTable::from_percent(values.iter().copied().enumerate(), IouSpec::Fixed50)
}

proptest! {
    #[test]
    fn ap_is_a_probability(spec in prop::collection::vec((0usize..4, any::<bool>(), 0.0f32..1.0), 0..10)) {
        for interp in [Interpolation::AllPoint, Interpolation::ElevenPoint] {
            let ap = average_precision(&detections(&spec), &gts(), 0.5, interp).ap;
            prop_assert!((0.0..=1.0).contains(&ap));
        }
    }

    #[test]
    fn dropping_false_positives_never_lowers_ap(spec in prop::collection::vec((0usize..4, any::<bool>(), 0.0f32..1.0), 1..10)) {
        let all = average_precision(&detections(&spec), &gts(), 0.5, Interpolation::AllPoint).ap;
        let hits: Vec<_> = spec.iter().copied().filter(|s| s.1).collect();
        let clean = average_precision(&detections(&hits), &gts(), 0.5, Interpolation::AllPoint).ap;
        prop_assert!(clean >= all - 1e-12);
    }

    #[test]
    fn deficits_are_scale_free(
        joint in prop::collection::vec(1.0f64..100.0, 4),
        ratio in prop::collection::vec(0.0f64..1.5, 4),
        scale in 0.1f64..1.0,
    ) {
        let inc: Vec<f64> = joint.iter().zip(&ratio).map(|(j, r)| (j * r).min(100.0)).collect();
        let old: BTreeSet<usize> = [0, 1].into();
        let new: BTreeSet<usize> = [2, 3].into();
        let (j, i) = (table(&joint), table(&inc));
        let sj: Vec<f64> = joint.iter().map(|v| v * scale).collect();
        let si: Vec<f64> = inc.iter().map(|v| v * scale).collect();
        let (js, is) = (table(&sj), table(&si));
        prop_assert!((rsd(&j, &i, &old).unwrap() - rsd(&js, &is, &old).unwrap()).abs() < 1e-9);
        prop_assert!((rpd(&j, &i, &new).unwrap() - rpd(&js, &is, &new).unwrap()).abs() < 1e-9);
        prop_assert!(rsd(&j, &j, &old).unwrap() == 0.0);
        prop_assert!((omega(i.map(), j.map()).unwrap() * j.map() - i.map()).abs() < 1e-9);
    }

    #[test]
    fn topk_ignores_sign_and_scale(
        values in prop::collection::vec(-4i32..=4, 1..60),
        fraction in 0.0f64..=1.0,
        exp in -3i32..3,
    ) {
        let v: Vec<f32> = values.iter().map(|x| *x as f32 * 0.25).collect();
        let flipped: Vec<f32> = v.iter().map(|x| -x).collect();
        let scaled: Vec<f32> = v.iter().map(|x| x * 2f32.powi(exp)).collect();
        let m = topk_mask(&v, fraction);
        prop_assert_eq!(m.iter().filter(|b| **b).count(), topk_count(fraction, v.len()));
        prop_assert_eq!(&m, &topk_mask(&flipped, fraction));
        prop_assert_eq!(&m, &topk_mask(&scaled, fraction));
    }

    #[test]
    fn frozen_count_is_bounded_and_monotone(a in 0.0f64..=100.0, b in 0.0f64..=100.0, n in 1usize..40) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(frozen_count(lo, n) <= frozen_count(hi, n));
        prop_assert!(frozen_count(hi, n) <= n);
        prop_assert!(lo == 0.0 || frozen_count(lo, n) >= 1);
    }

    #[test]
    fn replay_invariants_hold(
        capacity in 1usize..30,
        ops in prop::collection::vec((0u8..10, 0usize..5, 0usize..12), 1..200),
        seed in any::<u64>(),
    ) {
        let mut b = ReplayBuffer::new(capacity, seed).unwrap();
        let mut next = 0usize;
        for (kind, task, n) in ops {
            match kind {
                0 => {
                    if b.tasks().iter().all(|t| t.task_id != next) {
                        b.start_task(next).unwrap();
                    }
                    next += 1;
                }
                1 if !b.is_empty() => {
                    let batch = b.sample_batch(n, seed).unwrap();
                    prop_assert_eq!(batch.len(), n);
                }
                _ => b.observe(task * 1000 + n, task),
            }
            prop_assert!(b.check_invariants().is_ok());
            prop_assert!(b.len() <= capacity);
        }
    }
}
