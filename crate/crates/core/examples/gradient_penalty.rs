//! Scales the gradient of mined entries by a penalty instead of freezing
//! them. Smaller penalties keep the mined weights closer to where they were.

use cod_mining::data::{generate_synthetic_benchmark, SyntheticSpec};
use cod_mining::mining::{attach_gradient_penalty, dump_hooks, mine_topk_weights};
use cod_mining::model::{Detector, DetectorConfig, Scope};
use cod_mining::trainer::{train_task, PhaseConfig};

fn main() -> cod_mining::Result<()> {
    let seq = generate_synthetic_benchmark(&SyntheticSpec {
        train_per_task: 40,
        test_per_task: 10,
        ..SyntheticSpec::class_incremental_4_4(3)
    })?;
    let base = Detector::new(DetectorConfig::default(), 3)?;
    let mask = mine_topk_weights(&base, 0.5, &Scope::TRAINABLE)?;
    let phase = PhaseConfig {
        steps: 40,
        lr: 0.005,
        batch_size: 8,
        momentum: 0.9,
        weight_decay: 0.0,
        warmup_steps: 10,
        max_grad_norm: Some(10.0),
        seed: 3,
        hflip: false,
    };
    for penalty in [0.0f32, 0.1, 0.5, 1.0] {
        let mut model = base.clone();
        let hooks = attach_gradient_penalty(&mut model, &mask, penalty)?;
        train_task(&mut model, &seq.tasks[1], &phase, None)?;
        let after = model.snapshot();
        let drift: f32 = mask
            .entries
            .iter()
            .flat_map(|(n, bits)| {
                let (b, a) = (&base.param(n).unwrap().value, &after[n]);
                bits.iter().zip(b.iter().zip(a)).filter(|(m, _)| **m).map(|(_, (x, y))| (x - y) * (x - y))
            })
            .sum::<f32>()
            .sqrt();
        println!("penalty {penalty:.1}: {} hooks, mined-weight drift {drift:.4}", hooks.len());
        dump_hooks(&mut model);
        assert!(model.hooks().is_empty());
    }
    Ok(())
}
