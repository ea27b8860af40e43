//! Mines the largest-magnitude 75% of every trainable tensor, fixes them and
//! shows that a few optimizer steps leave them untouched.

use cod_mining::data::{generate_synthetic_benchmark, SyntheticSpec};
use cod_mining::mining::{fix_masked_weights, mine_topk_weights, save_mask, load_mask};
use cod_mining::model::{Detector, DetectorConfig, Scope};
use cod_mining::trainer::{train_task, PhaseConfig};

fn main() -> cod_mining::Result<()> {
    let seq = generate_synthetic_benchmark(&SyntheticSpec {
        train_per_task: 40,
        test_per_task: 10,
        ..SyntheticSpec::class_incremental_4_4(2)
    })?;
    let mut model = Detector::new(DetectorConfig::default(), 2)?;
    let mask = mine_topk_weights(&model, 0.75, &Scope::TRAINABLE)?;
    println!("mined {} of {} entries", mask.selected(), mask.total());

    let dir = std::env::temp_dir().join("cod_mining_mask");
    save_mask(&mask, &dir, "mmn75")?;
    assert_eq!(load_mask(&dir, "mmn75")?, mask);

    fix_masked_weights(&mut model, &mask)?;
    let before = model.snapshot();
    let phase = PhaseConfig {
        steps: 30,
        lr: 0.001,
        batch_size: 8,
        momentum: 0.9,
        weight_decay: 0.0,
        warmup_steps: 0,
        max_grad_norm: Some(10.0),
        seed: 0,
        hflip: false,
    };
    train_task(&mut model, &seq.tasks[1], &phase, None)?;
    let after = model.snapshot();
    for (name, bits) in &mask.entries {
        let (mut mined, mut free) = (0.0f32, 0.0f32);
        for ((b, x), y) in bits.iter().zip(&before[name]).zip(&after[name]) {
            let d = (x - y).abs();
            if *b { mined = mined.max(d) } else { free = free.max(d) }
        }
        println!("{name:<22} mined max |dw| {mined:.1e}  free max |dw| {free:.1e}");
    }
    Ok(())
}
