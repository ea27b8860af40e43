//! Two-task run comparing fine-tuning, entropy layer freezing, MMN and replay
//! against joint training on a shortened first task.

use cod_mining::data::{generate_synthetic_benchmark, SyntheticSpec};
use cod_mining::importance::Criterion;
use cod_mining::model::DetectorConfig;
use cod_mining::trainer::{run_sequence, StrategyConfig, TrainSchedule};

fn main() -> cod_mining::Result<()> {
    let seq = generate_synthetic_benchmark(&SyntheticSpec {
        train_per_task: 120,
        test_per_task: 40,
        ..SyntheticSpec::class_incremental_4_4(0)
    })?;
    let schedule = TrainSchedule {
        first_task_steps: 800,
        ..TrainSchedule::default()
    };
    let strategies = [
        StrategyConfig::joint(),
        StrategyConfig::fine_tune(),
        StrategyConfig::layer_freezing(Criterion::Entropy, 50.0, 0.25),
        StrategyConfig::mmn(75.0),
        StrategyConfig::replay(50),
    ];
    for s in &strategies {
        let report = run_sequence(&DetectorConfig::default(), &seq, s, &schedule)?;
        let per_task: Vec<String> = report
            .evaluations
            .iter()
            .map(|e| format!("{:.1?}", e.task_map50().values().collect::<Vec<_>>()))
            .collect();
        println!("{:<28} task mAP50 after each task: {}", s.label(), per_task.join(" -> "));
    }
    Ok(())
}
