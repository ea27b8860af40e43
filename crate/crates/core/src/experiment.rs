//! Config-driven experiments: run a strategy over several seeds, train the
//! joint upper bound, and build comparison tables and plots from the
//! resulting manifests.
//!
//! A run directory holds `manifest.json`, one `eval_matrix_seed{s}.csv` per
//! seed, `summary.csv`, `map_over_tasks.png` and per-task checkpoints.
//! Summary and evaluation CSVs depend only on the config and seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_synthetic_benchmark, load_coco_detection, split_class_incremental, DatasetSplits,
    SyntheticSpec, TaskSequence,
};
use crate::error::{Error, IoContext, Result};
use crate::importance::Criterion;
use crate::metrics::{self, ClassAPTable, IouSpec};
use crate::model::DetectorConfig;
use crate::plot;
use crate::trainer::{
    run_sequence_with, EvalReport, ExperimentReport, RunOptions, Strategy, StrategyConfig,
    TrainSchedule,
};

/// Where task data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Coco(CocoSource),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoSource {
    pub annotations: PathBuf,
    pub image_root: PathBuf,
    pub class_groups: Vec<Vec<usize>>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_val_fraction() -> f64 {
    0.1
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Run directory name; the strategy label when empty.
    pub name: String,
    pub out_dir: PathBuf,
    pub model: DetectorConfig,
    pub schedule: TrainSchedule,
    pub strategy: StrategyConfig,
    pub data: DataConfig,
    pub seeds: Vec<u64>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig::fine_tune()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            out_dir: PathBuf::from("runs"),
            model: DetectorConfig::default(),
            schedule: TrainSchedule::default(),
            strategy: StrategyConfig::default(),
            data: DataConfig::default(),
            seeds: vec![0],
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Field-level checks of every section.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |section: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{section}: {e}"));
            }
        };
        check("model", self.model.validate());
        check("schedule", self.schedule.validate());
        check("strategy", self.strategy.validate());
        if let DataConfig::Synthetic(spec) = &self.data {
            check("data", spec.validate());
            if spec.image_size != self.model.image_size {
                problems.push("data: image_size differs from model.image_size".into());
            }
            if spec.num_classes != self.model.num_classes {
                problems.push("data: num_classes differs from model.num_classes".into());
            }
        }
        if self.seeds.is_empty() {
            problems.push("seeds: at least one seed is required".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// SHA-256 of the canonical JSON of the config.
    pub fn hash(&self) -> String {
        hex_digest(&serde_json::to_vec(self).expect("config serializes"))
    }

    /// Identifies the benchmark (data and model shape) for comparisons.
    pub fn benchmark_hash(&self) -> String {
        let key = (&self.data, &self.model);
        hex_digest(&serde_json::to_vec(&key).expect("config serializes"))
    }

    /// Output directory name: the strategy label, prefixed by `name`.
    fn run_name(&self) -> String {
        let label = self.strategy.label().replace('/', "_");
        if self.name.is_empty() {
            label
        } else {
            format!("{}_{label}", self.name)
        }
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Command-line overrides; every set field replaces the config value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub strategy: Option<Strategy>,
    pub criterion: Option<Criterion>,
    pub percentage: Option<f64>,
    pub penalty: Option<f64>,
    pub sample_fraction: Option<f64>,
    pub replay_capacity: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
}

impl Overrides {
    /// Switching strategy drops the fields the new strategy does not use;
    /// explicit flags are then applied verbatim.
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let s = &mut cfg.strategy;
        if let Some(strategy) = self.strategy {
            if strategy != s.strategy {
                let mut fresh = StrategyConfig {
                    strategy,
                    ..StrategyConfig::fine_tune()
                };
                use Strategy::*;
                if strategy == LayerFreezing {
                    fresh.criterion = s.criterion;
                    fresh.sample_fraction = s.sample_fraction;
                }
                if matches!(strategy, Mmn | GradientMining | LayerFreezing) {
                    fresh.freeze_percentage = s.freeze_percentage;
                }
                if strategy == GradientMining {
                    fresh.penalty = s.penalty;
                }
                if strategy == Replay {
                    fresh.replay_capacity = s.replay_capacity;
                }
                *s = fresh;
            }
        }
        if self.criterion.is_some() {
            s.criterion = self.criterion;
        }
        if self.percentage.is_some() {
            s.freeze_percentage = self.percentage;
        }
        if self.penalty.is_some() {
            s.penalty = self.penalty;
        }
        if self.sample_fraction.is_some() {
            s.sample_fraction = self.sample_fraction;
        }
        if self.replay_capacity.is_some() {
            s.replay_capacity = self.replay_capacity;
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
    }
}

/// Builds the task sequence described by `data`.
pub fn build_tasks(data: &DataConfig) -> Result<TaskSequence> {
    match data {
        DataConfig::Synthetic(spec) => generate_synthetic_benchmark(spec),
        DataConfig::Coco(src) => {
            let ds = load_coco_detection(&src.annotations, &src.image_root)?;
            if !(src.val_fraction >= 0.0
                && src.test_fraction > 0.0
                && src.val_fraction + src.test_fraction < 1.0)
            {
                return Err(Error::Config("invalid val/test fractions".into()));
            }
            let mut images = ds.images;
            images.shuffle(&mut ChaCha8Rng::seed_from_u64(src.split_seed));
            let n = images.len();
            let n_test = ((n as f64) * src.test_fraction).round() as usize;
            let n_val = ((n as f64) * src.val_fraction).round() as usize;
            let test = images.split_off(n - n_test);
            let val = images.split_off(images.len() - n_val);
            let splits = DatasetSplits {
                train: images,
                val,
                test,
                num_classes: ds.class_names.len(),
                class_names: ds.class_names,
            };
            split_class_incremental(&splits, &src.class_groups)
        }
    }
}

/// Wall-clock seconds of one task of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub seed: u64,
    pub task: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: ExperimentReport,
    pub eval_matrix_csv: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config_hash: String,
    pub benchmark_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub strategy: String,
    pub runs: Vec<SeedRun>,
    pub summary_csv: PathBuf,
    pub plots: Vec<PathBuf>,
    /// Mean and spread over seeds of every summary metric.
    pub aggregate: BTreeMap<String, MeanStd>,
    pub wall_clock: Vec<PhaseTiming>,
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn is_upper_bound(&self) -> bool {
        self.config.strategy.strategy == Strategy::Joint
    }
}

/// Per-seed metrics written to the summary CSV.
fn seed_metrics(report: &ExperimentReport, tasks: &[(usize, BTreeSet<usize>)]) -> Vec<(String, f64)> {
    let last = report.final_eval();
    let task_maps = last.task_map50();
    let (last_task, _) = tasks.last().expect("non-empty");
    let earlier: Vec<f64> = tasks
        .iter()
        .filter(|(t, _)| t != last_task)
        .map(|(t, _)| task_maps[t])
        .collect();
    let mut out = vec![
        ("final_map".to_string(), last.class_level.averaged.map()),
        ("final_map50".to_string(), last.class_level.at50.map()),
        (
            "old_map50".to_string(),
            if earlier.is_empty() {
                f64::NAN
            } else {
                earlier.iter().sum::<f64>() / earlier.len() as f64
            },
        ),
        ("new_map50".to_string(), task_maps[last_task]),
    ];
    for (c, ap) in &last.class_level.at50.per_class_ap {
        out.push((format!("ap50_c{c}"), *ap));
    }
    out
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.6}")
    }
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().at(path)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::State(format!("{}: {other:?}", path.display())),
    }
}

fn write_eval_matrix(report: &ExperimentReport, path: &Path) -> Result<()> {
    let header = ["after_task", "eval_task", "class_id", "ap"].map(String::from);
    let rows: Vec<Vec<String>> = report
        .eval_matrix()
        .iter()
        .map(|r| {
            vec![
                r.after_task.to_string(),
                r.eval_task.to_string(),
                r.class_id.to_string(),
                fmt(r.ap),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Mean over eval tasks of task mAP[.5] after each task.
fn map_over_tasks(report: &ExperimentReport) -> Vec<(f64, f64)> {
    report
        .train_reports
        .iter()
        .zip(&report.evaluations)
        .enumerate()
        .map(|(i, (_, e))| {
            let m = e.task_map50();
            (i as f64, m.values().sum::<f64>() / m.len() as f64)
        })
        .collect()
}

fn execute(cfg: &ExperimentConfig) -> Result<ExperimentManifest> {
    cfg.validate()?;
    let tasks = build_tasks(&cfg.data)?;
    tasks.validate()?;
    if tasks.image_size() != Some(cfg.model.image_size) {
        return Err(Error::Config(format!(
            "data: image size {:?} differs from model.image_size {:?}",
            tasks.image_size(),
            cfg.model.image_size
        )));
    }
    let dir = cfg.out_dir.join(cfg.run_name());
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).at(&ckpt_dir)?;

    let task_classes: Vec<(usize, BTreeSet<usize>)> =
        tasks.tasks.iter().map(|t| (t.id, t.class_set.clone())).collect();
    let mut runs = Vec::new();
    let mut timings = Vec::new();
    let mut summary_rows = Vec::new();
    let mut metric_names: Vec<String> = Vec::new();
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &seed in &cfg.seeds {
        let schedule = TrainSchedule {
            seed,
            ..cfg.schedule.clone()
        };
        let options = RunOptions {
            keep_checkpoints: true,
            ..RunOptions::default()
        };
        let mut report = run_sequence_with(&cfg.model, &tasks, &cfg.strategy, &schedule, &options)?;
        let mut checkpoints = Vec::new();
        let ids: Vec<usize> = report.train_reports.iter().map(|r| r.task_id).collect();
        for ((bytes, task), tr) in report
            .checkpoints
            .iter()
            .zip(&ids)
            .zip(report.train_reports.iter_mut())
        {
            let path = ckpt_dir.join(format!("seed{seed}_task{task}.ckpt"));
            fs::write(&path, bytes).at(&path)?;
            tr.checkpoint_path = Some(path.clone());
            checkpoints.push(path);
        }
        for tr in &report.train_reports {
            timings.push(PhaseTiming {
                seed,
                task: tr.task_id,
                seconds: tr.seconds,
            });
        }
        let matrix = dir.join(format!("eval_matrix_seed{seed}.csv"));
        write_eval_matrix(&report, &matrix)?;

        let metrics = seed_metrics(&report, &task_classes);
        if metric_names.is_empty() {
            metric_names = metrics.iter().map(|(k, _)| k.clone()).collect();
        }
        let mut row = vec![seed.to_string()];
        for (k, v) in &metrics {
            row.push(fmt(*v));
            per_metric.entry(k.clone()).or_default().push(*v);
        }
        summary_rows.push(row);
        report.checkpoints.clear();
        report.final_model = None;
        runs.push(SeedRun {
            seed,
            report,
            eval_matrix_csv: matrix,
            checkpoints,
        });
    }

    let aggregate: BTreeMap<String, MeanStd> = per_metric
        .iter()
        .map(|(k, v)| (k.clone(), MeanStd::of(v)))
        .collect();
    for (label, pick) in [("mean", 0), ("std", 1)] {
        let mut row = vec![label.to_string()];
        for k in &metric_names {
            let a = aggregate[k];
            row.push(fmt(if pick == 0 { a.mean } else { a.std }));
        }
        summary_rows.push(row);
    }
    let mut header = vec!["seed".to_string()];
    header.extend(metric_names);
    let summary_csv = dir.join("summary.csv");
    write_csv(&summary_csv, &header, &summary_rows)?;

    let plot_path = dir.join("map_over_tasks.png");
    let series: Vec<Vec<(f64, f64)>> = runs.iter().map(|r| map_over_tasks(&r.report)).collect();
    let x_max = (tasks.tasks.len().max(2) - 1) as f64;
    plot::line_chart(&series, (0.0, x_max), (0.0, 100.0), &plot_path)?;

    let manifest = ExperimentManifest {
        config_hash: cfg.hash(),
        benchmark_hash: cfg.benchmark_hash(),
        config: cfg.clone(),
        seeds: cfg.seeds.clone(),
        strategy: cfg.strategy.label(),
        runs,
        summary_csv,
        plots: vec![plot_path],
        aggregate,
        wall_clock: timings,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).at(&path)?;
    Ok(manifest)
}

/// Loads a config, applies overrides and runs every seed.
pub fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<ExperimentManifest> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    overrides.apply(&mut cfg);
    execute(&cfg)
}

/// Runs the config in memory, without reading a file.
pub fn run_config(cfg: &ExperimentConfig) -> Result<ExperimentManifest> {
    execute(cfg)
}

/// Joint training on the union of all tasks, stored as a manifest whose
/// evaluations serve as denominators for Ω, RSD and RPD.
pub fn cmd_upper_bound(config_path: &Path, overrides: &Overrides) -> Result<ExperimentManifest> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    overrides.apply(&mut cfg);
    cfg.strategy = StrategyConfig::joint();
    execute(&cfg)
}

/// One row of a comparison table; metric columns are `None` when no
/// upper bound was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub per_class_ap50: BTreeMap<usize, f64>,
    pub per_task_map50: BTreeMap<usize, f64>,
    pub map50: f64,
    pub map: f64,
    pub omega: Option<f64>,
    pub rsd: Option<f64>,
    pub rpd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ReportRow>,
    pub upper_bound: Option<ReportRow>,
    /// `true` when deficits are over classes; `false` for task-level ones.
    pub class_level: bool,
    pub csv: PathBuf,
    pub table: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn mean_tables(evals: &[&EvalReport]) -> (ClassAPTable, BTreeMap<usize, f64>, f64) {
    let n = evals.len() as f64;
    let mut classes: BTreeMap<usize, f64> = BTreeMap::new();
    let mut tasks: BTreeMap<usize, f64> = BTreeMap::new();
    let mut map = 0.0;
    for e in evals {
        for (c, v) in &e.class_level.at50.per_class_ap {
            *classes.entry(*c).or_default() += v / n;
        }
        for (t, v) in e.task_map50() {
            *tasks.entry(t).or_default() += v / n;
        }
        map += e.class_level.averaged.map() / n;
    }
    (ClassAPTable::from_percent(classes, IouSpec::Fixed50), tasks, map)
}

struct Deficits {
    omega: f64,
    rsd: f64,
    rpd: f64,
}

/// Ω on mAP[.5]; RSD/RPD class-level when no class recurs across tasks,
/// task-level otherwise.
fn deficits(
    eval: &EvalReport,
    joint_classes: &ClassAPTable,
    joint_tasks: &BTreeMap<usize, f64>,
    tasks: &[(usize, BTreeSet<usize>)],
    class_level: bool,
) -> Result<Deficits> {
    let inc = &eval.class_level.at50;
    let omega = metrics::omega(inc.map(), joint_classes.map())?;
    let (last_task, new_classes) = tasks.last().expect("non-empty");
    if class_level {
        let old: BTreeSet<usize> = tasks
            .iter()
            .filter(|(t, _)| t != last_task)
            .flat_map(|(_, c)| c.iter().copied())
            .collect();
        let rsd = if old.is_empty() {
            f64::NAN
        } else {
            metrics::rsd(joint_classes, inc, &old)?
        };
        let rpd = metrics::rpd(joint_classes, inc, new_classes)?;
        Ok(Deficits { omega, rsd, rpd })
    } else {
        let (rsd, rpd) = metrics::task_level_rsd_rpd(joint_tasks, &eval.task_map50(), *last_task)?;
        Ok(Deficits {
            omega,
            rsd: rsd.unwrap_or(f64::NAN),
            rpd,
        })
    }
}

fn task_classes(m: &ExperimentManifest) -> Vec<(usize, BTreeSet<usize>)> {
    let e = m.runs[0].report.final_eval();
    e.per_task
        .iter()
        .map(|(t, tables)| (*t, tables.at50.per_class_ap.keys().copied().collect()))
        .collect()
}

/// Builds the comparison table (CSV and monospace text) and plots from run
/// manifests. A manifest whose strategy is `joint` supplies the upper
/// bound; without one the Ω/RSD/RPD columns are empty.
pub fn cmd_report(manifest_paths: &[PathBuf], out_dir: &Path) -> Result<ComparisonReport> {
    if manifest_paths.is_empty() {
        return Err(Error::Argument("no manifests given".into()));
    }
    let manifests = manifest_paths
        .iter()
        .map(|p| ExperimentManifest::load(p))
        .collect::<Result<Vec<_>>>()?;
    let bench = &manifests[0].benchmark_hash;
    if let Some(m) = manifests.iter().find(|m| &m.benchmark_hash != bench) {
        return Err(Error::Comparison(format!(
            "manifest `{}` was run on a different benchmark",
            m.strategy
        )));
    }
    let joints: Vec<&ExperimentManifest> = manifests.iter().filter(|m| m.is_upper_bound()).collect();
    if joints.len() > 1 {
        return Err(Error::Comparison("more than one upper-bound manifest".into()));
    }
    let runs: Vec<&ExperimentManifest> = manifests.iter().filter(|m| !m.is_upper_bound()).collect();
    let tasks = task_classes(runs.first().copied().unwrap_or(&manifests[0]));
    let mut seen = BTreeSet::new();
    let class_level = tasks.iter().all(|(_, cs)| cs.iter().all(|c| seen.insert(*c)));

    let joint = joints.first().map(|j| {
        let evals: Vec<&EvalReport> = j.runs.iter().map(|r| r.report.final_eval()).collect();
        mean_tables(&evals)
    });

    let mut rows = Vec::new();
    for m in &runs {
        let evals: Vec<&EvalReport> = m.runs.iter().map(|r| r.report.final_eval()).collect();
        let (classes, per_task, map) = mean_tables(&evals);
        let (mut omega, mut rsd, mut rpd) = (None, None, None);
        if let Some((jc, jt, _)) = &joint {
            let ds = evals
                .iter()
                .map(|e| deficits(e, jc, jt, &tasks, class_level))
                .collect::<Result<Vec<_>>>()?;
            let n = ds.len() as f64;
            omega = Some(ds.iter().map(|d| d.omega).sum::<f64>() / n);
            rsd = Some(ds.iter().map(|d| d.rsd).sum::<f64>() / n).filter(|v| !v.is_nan());
            rpd = Some(ds.iter().map(|d| d.rpd).sum::<f64>() / n);
        }
        rows.push(ReportRow {
            label: m.strategy.clone(),
            map50: classes.map(),
            per_class_ap50: classes.per_class_ap,
            per_task_map50: per_task,
            map,
            omega,
            rsd,
            rpd,
        });
    }
    let upper_bound = joint.as_ref().map(|(jc, jt, map)| ReportRow {
        label: "upper_bound".into(),
        per_class_ap50: jc.per_class_ap.clone(),
        per_task_map50: jt.clone(),
        map50: jc.map(),
        map: *map,
        omega: Some(1.0),
        rsd: None,
        rpd: None,
    });

    fs::create_dir_all(out_dir).at(out_dir)?;
    let classes: BTreeSet<usize> = tasks.iter().flat_map(|(_, c)| c.iter().copied()).collect();
    let all_rows: Vec<&ReportRow> = rows.iter().chain(upper_bound.as_ref()).collect();

    let mut header = vec!["label".to_string()];
    header.extend(classes.iter().map(|c| format!("ap50_c{c}")));
    header.extend(tasks.iter().map(|(t, _)| format!("map50_t{t}")));
    header.extend(["map50", "map", "omega", "rsd", "rpd"].map(String::from));
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), fmt);
    let csv_rows: Vec<Vec<String>> = all_rows
        .iter()
        .map(|r| {
            let mut row = vec![r.label.clone()];
            row.extend(classes.iter().map(|c| opt(r.per_class_ap50.get(c).copied())));
            row.extend(tasks.iter().map(|(t, _)| opt(r.per_task_map50.get(t).copied())));
            row.extend([fmt(r.map50), fmt(r.map), opt(r.omega), opt(r.rsd), opt(r.rpd)]);
            row
        })
        .collect();
    let csv_path = out_dir.join("report.csv");
    write_csv(&csv_path, &header, &csv_rows)?;

    let width = all_rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(12) + 2;
    let mut text = format!("{:<width$}", "");
    for h in &header[1..] {
        text.push_str(&format!("{:>9}", h.trim_start_matches("ap50_").trim_start_matches("map50_")));
    }
    text.push('\n');
    let cell = |v: Option<f64>, d: usize| v.map_or("-".to_string(), |x| format!("{x:.d$}"));
    for r in &all_rows {
        text.push_str(&format!("{:<width$}", r.label));
        for c in &classes {
            text.push_str(&format!("{:>9}", cell(r.per_class_ap50.get(c).copied(), 1)));
        }
        for (t, _) in &tasks {
            text.push_str(&format!("{:>9}", cell(r.per_task_map50.get(t).copied(), 1)));
        }
        text.push_str(&format!(
            "{:>9}{:>9}{:>9}{:>9}{:>9}\n",
            cell(Some(r.map50), 1),
            cell(Some(r.map), 1),
            cell(r.omega, 2),
            cell(r.rsd, 1),
            cell(r.rpd, 1)
        ));
    }
    let table_path = out_dir.join("report.txt");
    fs::write(&table_path, &text).at(&table_path)?;

    let pr_path = out_dir.join("pr_curves.png");
    let pr: Vec<Vec<(f64, f64)>> = runs
        .iter()
        .chain(joints.iter())
        .map(|m| {
            let curves: Vec<&Vec<f64>> = m
                .runs
                .iter()
                .flat_map(|r| r.report.final_eval().pr_curves.values())
                .collect();
            let n = curves.len().max(1) as f64;
            let len = curves.first().map_or(0, |c| c.len());
            (0..len)
                .map(|k| {
                    let r = k as f64 / (len.max(2) - 1) as f64;
                    (r, curves.iter().map(|c| c[k]).sum::<f64>() / n)
                })
                .collect()
        })
        .collect();
    plot::line_chart(&pr, (0.0, 1.0), (0.0, 1.0), &pr_path)?;

    let tasks_path = out_dir.join("map_over_tasks.png");
    let over: Vec<Vec<(f64, f64)>> = runs
        .iter()
        .map(|m| {
            let per_seed: Vec<Vec<(f64, f64)>> = m.runs.iter().map(|r| map_over_tasks(&r.report)).collect();
            let n = per_seed.len() as f64;
            (0..per_seed[0].len())
                .map(|i| (i as f64, per_seed.iter().map(|s| s[i].1).sum::<f64>() / n))
                .collect()
        })
        .collect();
    plot::line_chart(&over, (0.0, (tasks.len().max(2) - 1) as f64), (0.0, 100.0), &tasks_path)?;

    Ok(ComparisonReport {
        rows,
        upper_bound,
        class_level,
        csv: csv_path,
        table: table_path,
        plots: vec![pr_path, tasks_path],
    })
}
