//! Config-driven runs written to disk, then a comparison report against the
//! joint-training upper bound.

use cod_mining::data::SyntheticSpec;
use cod_mining::experiment::{cmd_report, cmd_run, cmd_upper_bound, DataConfig, ExperimentConfig, Overrides};
use cod_mining::importance::Criterion;
use cod_mining::model::DetectorConfig;
use cod_mining::trainer::{Strategy, StrategyConfig, TrainSchedule};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("cod_mining_pipeline");
    let cfg = ExperimentConfig {
        name: "shapes".into(),
        out_dir: root.join("runs"),
        model: DetectorConfig::default(),
        schedule: TrainSchedule {
            first_task_steps: 200,
            incremental_steps: 100,
            regularize_steps: 10,
            warmup_steps: 20,
            ..TrainSchedule::default()
        },
        strategy: StrategyConfig::layer_freezing(Criterion::Entropy, 25.0, 0.25),
        data: DataConfig::Synthetic(SyntheticSpec {
            train_per_task: 60,
            test_per_task: 20,
            ..SyntheticSpec::class_incremental_4_4(0)
        }),
        seeds: vec![0, 1],
    };
    std::fs::create_dir_all(&root)?;
    let path = root.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg)?)?;

    let lf = cmd_run(&path, &Overrides::default())?;
    let ft = cmd_run(&path, &Overrides { strategy: Some(Strategy::FineTune), ..Overrides::default() })?;
    let ub = cmd_upper_bound(&path, &Overrides::default())?;
    let manifests: Vec<_> = [&lf, &ft, &ub]
        .iter()
        .map(|m| m.summary_csv.with_file_name("manifest.json"))
        .collect();
    let report = cmd_report(&manifests, &root.join("report"))?;
    println!("{}", std::fs::read_to_string(&report.table)?);
    Ok(())
}
