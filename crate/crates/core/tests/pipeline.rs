//! End-to-end runs through the trainer, the experiment runner and the CLI on
//! a tiny benchmark.

use std::path::{Path, PathBuf};
use std::process::Command;

use cod_mining::data::{generate_synthetic_benchmark, SyntheticSpec};
use cod_mining::experiment::{
    cmd_report, cmd_run, cmd_upper_bound, DataConfig, ExperimentConfig, ExperimentManifest, Overrides,
};
use cod_mining::importance::Criterion;
use cod_mining::model::DetectorConfig;
use cod_mining::trainer::{run_sequence, Strategy, StrategyConfig, TrainSchedule};
use cod_mining::Error;

fn tiny_model() -> DetectorConfig {
    DetectorConfig {
        num_classes: 4,
        image_size: (32, 32),
        backbone_channels: vec![6, 8, 12],
        neck_channels: 8,
        head_depth: 1,
        grid_stride: 4,
        train_backbone: false,
    }
}

fn tiny_data(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 4,
        image_size: (32, 32),
        train_per_task: 16,
        val_per_task: 2,
        test_per_task: 8,
        class_groups: vec![vec![0, 1], vec![2, 3]],
        min_shape_size: 6,
        max_shape_size: 12,
        max_instances: 3,
        ..SyntheticSpec::class_incremental_4_4(seed)
    }
}

fn tiny_schedule() -> TrainSchedule {
    TrainSchedule {
        first_task_steps: 150,
        incremental_steps: 60,
        regularize_steps: 5,
        warmup_steps: 20,
        batch_size: 4,
        ..TrainSchedule::default()
    }
}

fn write_config(dir: &Path, strategy: StrategyConfig, data_seed: u64) -> PathBuf {
    let cfg = ExperimentConfig {
        name: "tiny".into(),
        out_dir: dir.join("runs"),
        model: tiny_model(),
        schedule: tiny_schedule(),
        strategy,
        data: DataConfig::Synthetic(tiny_data(data_seed)),
        seeds: vec![0, 1],
    };
    let path = dir.join(format!("config_{data_seed}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn manifest_path(m: &ExperimentManifest) -> PathBuf {
    m.summary_csv.with_file_name("manifest.json")
}

#[test]
fn penalty_zero_sequence_matches_mmn() {
    let seq = generate_synthetic_benchmark(&tiny_data(2)).unwrap();
    let schedule = TrainSchedule {
        momentum: 0.0,
        max_grad_norm: None,
        ..tiny_schedule()
    };
    let run = |s: StrategyConfig| {
        run_sequence(&tiny_model(), &seq, &s, &schedule)
            .unwrap()
            .final_model
            .unwrap()
            .snapshot()
    };
    assert_eq!(run(StrategyConfig::gradient_mining(60.0, 0.0)), run(StrategyConfig::mmn(60.0)));
}

#[test]
fn runs_write_artifacts_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), StrategyConfig::layer_freezing(Criterion::Std, 50.0, 0.5), 0);
    let lf = cmd_run(&path, &Overrides::default()).unwrap();
    let ft = cmd_run(
        &path,
        &Overrides {
            strategy: Some(Strategy::FineTune),
            ..Overrides::default()
        },
    )
    .unwrap();
    let ub = cmd_upper_bound(&path, &Overrides::default()).unwrap();
    assert!(ub.is_upper_bound());
    for m in [&lf, &ft, &ub] {
        assert!(m.summary_csv.exists());
        assert!(m.plots.iter().all(|p| p.exists()));
        assert!(m.runs.iter().flat_map(|r| &r.checkpoints).all(|p| p.exists()));
        assert_eq!(ExperimentManifest::load(&manifest_path(m)).unwrap().config_hash, m.config_hash);
    }
    assert_eq!(lf.benchmark_hash, ft.benchmark_hash);
    assert_ne!(lf.config_hash, ft.config_hash);

    let paths: Vec<_> = [&lf, &ft, &ub].iter().map(|m| manifest_path(m)).collect();
    let report = cmd_report(&paths, &dir.path().join("report")).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.class_level);
    let upper = report.upper_bound.as_ref().unwrap();
    for row in &report.rows {
        let omega = row.omega.unwrap();
        assert!((omega - row.map50 / upper.map50).abs() < 1e-9, "{omega} vs {}", row.map50 / upper.map50);
    }
    assert!(report.csv.exists() && report.table.exists());
    assert!(report.plots.iter().all(|p| p.exists()));
    let table = std::fs::read_to_string(&report.table).unwrap();
    assert!(table.contains("layer_freezing/std/50"));
}

#[test]
fn report_rejects_mismatched_benchmarks() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_run(&write_config(dir.path(), StrategyConfig::fine_tune(), 0), &Overrides {
        seeds: Some(vec![0]),
        ..Overrides::default()
    })
    .unwrap();
    let b = cmd_run(&write_config(dir.path(), StrategyConfig::fine_tune(), 9), &Overrides {
        seeds: Some(vec![0]),
        out_dir: Some(dir.path().join("other")),
        ..Overrides::default()
    })
    .unwrap();
    let err = cmd_report(&[manifest_path(&a), manifest_path(&b)], &dir.path().join("r")).unwrap_err();
    assert!(matches!(err, Error::Comparison(_)));
}

#[test]
fn cli_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), StrategyConfig::fine_tune(), 1);
    let bin = env!("CARGO_BIN_EXE_codmine");
    let run = Command::new(bin)
        .args(["run", "--config"])
        .arg(&path)
        .args(["--strategy", "replay", "--replay-capacity", "6", "--seeds", "3"])
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let summary = PathBuf::from(String::from_utf8(run.stdout).unwrap().trim());
    let manifest = ExperimentManifest::load(&summary.with_file_name("manifest.json")).unwrap();
    assert_eq!(manifest.seeds, vec![3]);
    assert_eq!(manifest.config.strategy, StrategyConfig::replay(6));

    let report = Command::new(bin)
        .arg("report")
        .arg(summary.with_file_name("manifest.json"))
        .arg("--out-dir")
        .arg(dir.path().join("report"))
        .output()
        .unwrap();
    assert!(report.status.success(), "{}", String::from_utf8_lossy(&report.stderr));

    let bad = Command::new(bin)
        .args(["run", "--config"])
        .arg(&path)
        .args(["--strategy", "layer_freezing"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error"));
}

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/shapes_4_4.json");
    let cfg = ExperimentConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.seeds, vec![0, 1, 2]);
    assert_eq!(cfg.schedule, TrainSchedule::default());
}
