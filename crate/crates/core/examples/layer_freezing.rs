//! Trains on the first task, scores every neck/head layer by each activation
//! criterion and freezes the top half by entropy.

use cod_mining::data::{generate_synthetic_benchmark, SyntheticSpec};
use cod_mining::importance::{collect_summaries, rank_and_plan, score, Criterion, SummaryConfig};
use cod_mining::mining::apply_freeze_plan;
use cod_mining::model::{Detector, DetectorConfig, Scope};
use cod_mining::trainer::{train_task, PhaseConfig};

fn main() -> cod_mining::Result<()> {
    let seq = generate_synthetic_benchmark(&SyntheticSpec {
        train_per_task: 80,
        test_per_task: 10,
        ..SyntheticSpec::class_incremental_4_4(1)
    })?;
    let mut model = Detector::new(DetectorConfig::default(), 1)?;
    let phase = PhaseConfig {
        steps: 150,
        lr: 0.01,
        batch_size: 8,
        momentum: 0.9,
        weight_decay: 0.0,
        warmup_steps: 50,
        max_grad_norm: Some(10.0),
        seed: 1,
        hflip: true,
    };
    let report = train_task(&mut model, &seq.tasks[0], &phase, None)?;
    println!("task 0 trained, final loss {:.3}", report.final_loss);

    let summaries = collect_summaries(
        &model,
        &seq.tasks[0].train,
        0.25,
        &Scope::TRAINABLE,
        3,
        &SummaryConfig::default(),
    )?;
    let order: Vec<_> = model.layer_inventory(&Scope::TRAINABLE).into_iter().map(|l| l.name).collect();
    for c in [Criterion::Mean, Criterion::Median, Criterion::Std, Criterion::Entropy] {
        let values: Vec<String> = order
            .iter()
            .map(|n| format!("{n}={:.3}", score(&summaries[n], c).unwrap().value))
            .collect();
        println!("{:>8}: {}", c.as_str(), values.join(" "));
    }

    let scores: Vec<_> = order
        .iter()
        .map(|n| score(&summaries[n], Criterion::Entropy))
        .collect::<cod_mining::Result<_>>()?;
    let plan = rank_and_plan(&scores, 50.0)?;
    apply_freeze_plan(&mut model, &plan)?;
    println!("frozen {}/{}: {:?}", plan.frozen_layers.len(), plan.candidate_count, plan.frozen_layers);
    Ok(())
}
