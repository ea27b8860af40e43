//! Per-task training and the incremental loop over a task sequence:
//! train, then mine weights or plan layer freezing for what follows, then a
//! short fine-tune on the same task with the new constraints active.
//! Every task's test set is evaluated after each task.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AnnotatedImage, Task, TaskSequence};
use crate::error::{Error, Result};
use crate::importance::{collect_summaries, rank_and_plan, score, Criterion, FreezePlan, SummaryConfig};
use crate::metrics::{
    self, average_precision, evaluate, EvalTables, ImageResult, Interpolation, ScoredBox,
};
use crate::mining::{
    attach_gradient_penalty, apply_freeze_plan, dump_hooks, fix_masked_weights, mine_topk_weights,
    reset_update_exemptions,
};
use crate::model::{
    checkpoint, decode_predictions, detection_loss, BackboneFeatures, DecodeConfig, Detector,
    DetectorConfig, Input, LossConfig, Scope,
};
use crate::optim::{Sgd, SgdConfig};
use crate::replay::ReplayBuffer;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FineTune,
    Mmn,
    GradientMining,
    LayerFreezing,
    Replay,
    Joint,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::FineTune => "fine_tune",
            Strategy::Mmn => "mmn",
            Strategy::GradientMining => "gradient_mining",
            Strategy::LayerFreezing => "layer_freezing",
            Strategy::Replay => "replay",
            Strategy::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fine_tune" => Strategy::FineTune,
            "mmn" => Strategy::Mmn,
            "gradient_mining" => Strategy::GradientMining,
            "layer_freezing" => Strategy::LayerFreezing,
            "replay" => Strategy::Replay,
            "joint" => Strategy::Joint,
            other => return Err(Error::Config(format!("unknown strategy `{other}`"))),
        })
    }
}

/// Strategy and its parameters. Fields that a strategy does not use must be
/// absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<Criterion>,
    /// Percentage of weights mined (MMN, gradient mining) or of layers
    /// frozen (layer freezing).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze_percentage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_capacity: Option<usize>,
}

impl StrategyConfig {
    fn bare(strategy: Strategy) -> Self {
        Self {
            strategy,
            criterion: None,
            freeze_percentage: None,
            penalty: None,
            sample_fraction: None,
            replay_capacity: None,
        }
    }

    pub fn fine_tune() -> Self {
        Self::bare(Strategy::FineTune)
    }

    pub fn joint() -> Self {
        Self::bare(Strategy::Joint)
    }

    pub fn mmn(percentage: f64) -> Self {
        Self {
            freeze_percentage: Some(percentage),
            ..Self::bare(Strategy::Mmn)
        }
    }

    pub fn gradient_mining(percentage: f64, penalty: f64) -> Self {
        Self {
            freeze_percentage: Some(percentage),
            penalty: Some(penalty),
            ..Self::bare(Strategy::GradientMining)
        }
    }

    pub fn layer_freezing(criterion: Criterion, percentage: f64, sample_fraction: f64) -> Self {
        Self {
            criterion: Some(criterion),
            freeze_percentage: Some(percentage),
            sample_fraction: Some(sample_fraction),
            ..Self::bare(Strategy::LayerFreezing)
        }
    }

    pub fn replay(capacity: usize) -> Self {
        Self {
            replay_capacity: Some(capacity),
            ..Self::bare(Strategy::Replay)
        }
    }

    /// Checks that exactly the fields the strategy needs are present and in
    /// range; every problem is listed.
    pub fn validate(&self) -> Result<()> {
        use Strategy::*;
        let s = self.strategy;
        let mut problems = Vec::new();
        let mut field = |name: &str, present: bool, required: bool| {
            if present && !required {
                problems.push(format!("`{name}` is not used by strategy {}", s.as_str()));
            } else if !present && required {
                problems.push(format!("strategy {} requires `{name}`", s.as_str()));
            }
        };
        field("criterion", self.criterion.is_some(), s == LayerFreezing);
        field(
            "freeze_percentage",
            self.freeze_percentage.is_some(),
            matches!(s, Mmn | GradientMining | LayerFreezing),
        );
        field("penalty", self.penalty.is_some(), s == GradientMining);
        field("sample_fraction", self.sample_fraction.is_some(), s == LayerFreezing);
        field("replay_capacity", self.replay_capacity.is_some(), s == Replay);
        if let Some(l) = self.freeze_percentage {
            let lo_ok = if s == LayerFreezing { l >= 0.0 } else { l > 0.0 };
            if !(lo_ok && l <= 100.0) {
                problems.push(format!("freeze_percentage out of range: {l}"));
            }
        }
        if let Some(p) = self.penalty {
            if !(p >= 0.0 && p.is_finite()) {
                problems.push(format!("penalty must be >= 0, got {p}"));
            }
        }
        if let Some(n) = self.sample_fraction {
            if !(n > 0.0 && n <= 1.0) {
                problems.push(format!("sample_fraction must be in (0, 1], got {n}"));
            }
        }
        if self.replay_capacity == Some(0) {
            problems.push("replay_capacity must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Short label such as `layer_freezing/entropy/25`.
    pub fn label(&self) -> String {
        let mut parts = vec![self.strategy.as_str().to_string()];
        if let Some(c) = self.criterion {
            parts.push(c.as_str().into());
        }
        if let Some(l) = self.freeze_percentage {
            parts.push(format!("{l}"));
        }
        if let Some(p) = self.penalty {
            parts.push(format!("p{p}"));
        }
        if let Some(c) = self.replay_capacity {
            parts.push(format!("cap{c}"));
        }
        parts.join("/")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub first_task_steps: usize,
    pub incremental_steps: usize,
    pub regularize_steps: usize,
    pub first_lr: f32,
    pub incremental_lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Linear learning-rate ramp over the first steps of each phase.
    pub warmup_steps: usize,
    pub max_grad_norm: Option<f32>,
    /// Random horizontal flips of training images.
    pub hflip: bool,
    /// Activation-summary settings for layer freezing.
    pub summary: SummaryConfig,
    /// Run the regularization fine-tune with the new mask or freeze plan
    /// already active; otherwise they are applied after it.
    pub regularize_constrained: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            first_task_steps: 2000,
            incremental_steps: 1000,
            regularize_steps: 100,
            first_lr: 0.01,
            incremental_lr: 0.001,
            batch_size: 8,
            seed: 0,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_steps: 100,
            max_grad_norm: Some(10.0),
            hflip: true,
            summary: SummaryConfig::default(),
            regularize_constrained: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, lr) in [("first_lr", self.first_lr), ("incremental_lr", self.incremental_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        SgdConfig {
            lr: self.first_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
        }
        .validate()
    }
}

/// Settings of one training phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseConfig {
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup_steps: usize,
    pub max_grad_norm: Option<f32>,
    pub seed: u64,
    pub hflip: bool,
}

/// A stored replay entry: image `index` of task `task`'s training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub task: usize,
    pub index: usize,
}

/// Old-task samples mixed into training batches.
#[derive(Debug, Clone, Copy)]
pub struct ReplaySource<'a> {
    pub buffer: &'a ReplayBuffer<SampleRef>,
    /// Tasks indexed by position; `SampleRef::task` refers to this slice.
    pub tasks: &'a [Task],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task_id: usize,
    pub steps_run: usize,
    pub final_loss: f64,
    /// L2 norm of each layer's parameter change over the task.
    pub parameter_delta_norms: BTreeMap<String, f64>,
    pub checkpoint_path: Option<PathBuf>,
    pub freeze_plan: Option<FreezePlan>,
    pub mined_fraction: Option<f64>,
    pub seconds: f64,
}

/// Training images of one task (plus flipped copies) with their cached
/// backbone features.
struct Pool<'a> {
    images: Vec<std::borrow::Cow<'a, AnnotatedImage>>,
    originals: usize,
    features: Option<BackboneFeatures>,
}

impl<'a> Pool<'a> {
    fn new(model: &Detector, images: &'a [AnnotatedImage], hflip: bool) -> Self {
        use std::borrow::Cow;
        let mut all: Vec<Cow<'a, AnnotatedImage>> = images.iter().map(Cow::Borrowed).collect();
        if hflip {
            all.extend(images.iter().map(|i| Cow::Owned(i.hflip())));
        }
        let features = model.backbone_frozen().then(|| {
            let parts: Vec<BackboneFeatures> = all
                .chunks(32)
                .map(|chunk| model.backbone_features(&stack(chunk.iter().map(|c| c.as_ref()))))
                .collect();
            let refs: Vec<&BackboneFeatures> = parts.iter().collect();
            BackboneFeatures::concat(&refs)
        });
        Self {
            images: all,
            originals: images.len(),
            features,
        }
    }

    fn pick(&self, index: usize, rng: &mut ChaCha8Rng) -> usize {
        if self.images.len() > self.originals && rng.gen_bool(0.5) {
            index + self.originals
        } else {
            index
        }
    }
}

fn stack<'b>(images: impl Iterator<Item = &'b AnnotatedImage>) -> FeatureMap {
    let images: Vec<&AnnotatedImage> = images.collect();
    let (h, w) = images[0].size();
    let bufs: Vec<&[f32]> = images.iter().map(|i| i.pixels.as_slice()).collect();
    FeatureMap::from_images(&bufs, 3, h, w)
}

fn param_delta_norms(
    model: &Detector,
    before: &BTreeMap<String, Vec<f32>>,
) -> BTreeMap<String, f64> {
    model
        .layers()
        .iter()
        .map(|l| {
            let sq: f64 = l
                .params()
                .iter()
                .flat_map(|p| {
                    p.value
                        .iter()
                        .zip(&before[&p.name])
                        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                })
                .sum();
            (l.name.clone(), sq.sqrt())
        })
        .collect()
}

/// Runs exactly `phase.steps` optimizer steps on `task`'s training images.
/// With a replay source, each batch holds `ceil(b / 2)` new-task images and
/// the rest drawn from the buffer.
pub fn train_task(
    model: &mut Detector,
    task: &Task,
    phase: &PhaseConfig,
    replay: Option<ReplaySource<'_>>,
) -> Result<TrainReport> {
    let start = Instant::now();
    let before = model.snapshot();
    let final_loss = run_phase(model, task, phase, replay)?;
    Ok(TrainReport {
        task_id: task.id,
        steps_run: phase.steps,
        final_loss,
        parameter_delta_norms: param_delta_norms(model, &before),
        checkpoint_path: None,
        freeze_plan: None,
        mined_fraction: None,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn run_phase(
    model: &mut Detector,
    task: &Task,
    phase: &PhaseConfig,
    replay: Option<ReplaySource<'_>>,
) -> Result<f64> {
    if phase.steps == 0 {
        return Ok(f64::NAN);
    }
    if task.train.is_empty() {
        return Err(Error::Data(format!("task {} has no training images", task.id)));
    }
    if phase.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut opt = Sgd::new(SgdConfig {
        lr: phase.lr,
        momentum: phase.momentum,
        weight_decay: phase.weight_decay,
        max_grad_norm: phase.max_grad_norm,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(phase.seed);
    let pool = Pool::new(model, &task.train, phase.hflip);

    let replay = replay.filter(|r| !r.buffer.is_empty());
    let replay_pools: BTreeMap<usize, Pool<'_>> = match replay {
        Some(r) => r
            .buffer
            .tasks()
            .iter()
            .map(|t| (t.task_id, Pool::new(model, &r.tasks[t.task_id].train, phase.hflip)))
            .collect(),
        None => BTreeMap::new(),
    };
    let (n_new, n_old) = match replay {
        Some(_) => (phase.batch_size.div_ceil(2), phase.batch_size / 2),
        None => (phase.batch_size, 0),
    };

    let mut order: Vec<usize> = Vec::new();
    let loss_cfg = LossConfig::default();
    let mut last = f64::NAN;
    for step in 0..phase.steps {
        let mut picks: Vec<(&Pool<'_>, usize)> = Vec::with_capacity(phase.batch_size);
        for _ in 0..n_new {
            if order.is_empty() {
                order = (0..pool.originals).collect();
                order.shuffle(&mut rng);
            }
            let i = order.pop().expect("refilled above");
            picks.push((&pool, pool.pick(i, &mut rng)));
        }
        if let Some(r) = replay {
            let draws = r.buffer.sample_batch(n_old, rng.gen())?;
            for s in draws {
                let p = &replay_pools[&s.task];
                picks.push((p, p.pick(s.index, &mut rng)));
            }
        }

        let targets: Vec<&[crate::bbox::LabeledBox]> =
            picks.iter().map(|(p, i)| p.images[*i].boxes.as_slice()).collect();
        let (pred, tape) = if let Some(_) = pool.features {
            let parts: Vec<BackboneFeatures> = picks
                .iter()
                .map(|(p, i)| p.features.as_ref().expect("frozen backbone").select(&[*i]))
                .collect();
            let refs: Vec<&BackboneFeatures> = parts.iter().collect();
            let feats = BackboneFeatures::concat(&refs);
            model.forward_train(Input::Features(&feats))?
        } else {
            let x = stack(picks.iter().map(|(p, i)| p.images[*i].as_ref()));
            model.forward_train(Input::Images(&x))?
        };
        let (loss, grad_cls, grad_box) = detection_loss(&pred, &targets, &loss_cfg);
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: loss.total,
            });
        }
        model.backward(&tape, &grad_cls, &grad_box);
        if step < phase.warmup_steps {
            opt.set_lr(phase.lr * (step + 1) as f32 / phase.warmup_steps as f32);
        } else {
            opt.set_lr(phase.lr);
        }
        opt.step(model);
        last = loss.total;
    }
    Ok(last)
}

/// Detections and visible ground truth for every image.
pub fn predict(
    model: &Detector,
    images: &[AnnotatedImage],
    decode: &DecodeConfig,
) -> Vec<ImageResult> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let x = stack(chunk.iter());
        let raw = model.forward(Input::Images(&x));
        for (n, img) in chunk.iter().enumerate() {
            out.push(ImageResult {
                detections: decode_predictions(&raw, n, img.size(), decode),
                ground_truth: img.boxes.clone(),
            });
        }
    }
    out
}

/// Recall grid on which stored precision-recall curves are sampled.
const PR_POINTS: usize = 101;

/// Evaluation of one model on every task's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per task: AP over that task's classes on its test set.
    pub per_task: BTreeMap<usize, EvalTables>,
    /// Per class: AP pooled over the test sets of every task holding it.
    pub class_level: EvalTables,
    /// Interpolated precision at recall `0, 0.01, ..., 1`, per class, at
    /// IoU 0.5 over the pooled test sets.
    pub pr_curves: BTreeMap<usize, Vec<f64>>,
}

impl EvalReport {
    pub fn task_map50(&self) -> BTreeMap<usize, f64> {
        self.per_task.iter().map(|(t, e)| (*t, e.at50.map())).collect()
    }
}

fn sampled_envelope(curve: &[(f64, f64)]) -> Vec<f64> {
    (0..PR_POINTS)
        .map(|k| {
            let r = k as f64 / (PR_POINTS - 1) as f64;
            curve
                .iter()
                .filter(|(rc, _)| *rc >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .collect()
}

pub fn evaluate_tasks(model: &Detector, tasks: &[Task], decode: &DecodeConfig) -> EvalReport {
    let results: Vec<Vec<ImageResult>> = tasks.iter().map(|t| predict(model, &t.test, decode)).collect();
    let per_task = tasks
        .iter()
        .zip(&results)
        .map(|(t, r)| (t.id, evaluate(r, Some(&t.class_set))))
        .collect();

    let classes: BTreeSet<usize> = tasks.iter().flat_map(|t| t.class_set.iter().copied()).collect();
    let mut avg = Vec::new();
    let mut at50 = Vec::new();
    let mut pr_curves = BTreeMap::new();
    for c in classes {
        let pooled: Vec<ImageResult> = tasks
            .iter()
            .zip(&results)
            .filter(|(t, _)| t.class_set.contains(&c))
            .flat_map(|(_, r)| r.iter().cloned())
            .collect();
        let only: BTreeSet<usize> = [c].into();
        let e = evaluate(&pooled, Some(&only));
        if let (Some(a), Some(b)) = (e.averaged.get(c), e.at50.get(c)) {
            avg.push((c, a));
            at50.push((c, b));
            let mut dets = Vec::new();
            let mut gts = Vec::new();
            for (i, r) in pooled.iter().enumerate() {
                dets.extend(r.detections.iter().filter(|d| d.class_id == c).map(|d| ScoredBox {
                    image: i,
                    bbox: d.bbox,
                    score: d.score,
                }));
                gts.extend(r.ground_truth.iter().filter(|g| g.class_id == c).map(|g| (i, g.bbox)));
            }
            let ap = average_precision(&dets, &gts, 0.5, Interpolation::AllPoint);
            pr_curves.insert(c, sampled_envelope(&ap.curve));
        }
    }
    EvalReport {
        per_task,
        class_level: EvalTables {
            averaged: metrics::ClassAPTable::from_percent(avg, metrics::IouSpec::Averaged),
            at50: metrics::ClassAPTable::from_percent(at50, metrics::IouSpec::Fixed50),
        },
        pr_curves,
    }
}

/// One cell of the evaluation matrix (AP at IoU 0.5, percent).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub after_task: usize,
    pub eval_task: usize,
    pub class_id: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub strategy: StrategyConfig,
    pub seed: u64,
    pub train_reports: Vec<TrainReport>,
    /// Evaluation after each task, in task order.
    pub evaluations: Vec<EvalReport>,
    #[serde(skip)]
    pub final_model: Option<Detector>,
    /// Serialized model after each task, when requested.
    #[serde(skip)]
    pub checkpoints: Vec<Vec<u8>>,
}

impl ExperimentReport {
    pub fn eval_matrix(&self) -> Vec<EvalRow> {
        let mut rows = Vec::new();
        for (after, e) in self.after_task_ids().zip(&self.evaluations) {
            for (eval_task, t) in &e.per_task {
                for (c, ap) in &t.at50.per_class_ap {
                    rows.push(EvalRow {
                        after_task: after,
                        eval_task: *eval_task,
                        class_id: *c,
                        ap: *ap,
                    });
                }
            }
        }
        rows
    }

    fn after_task_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.train_reports.iter().map(|r| r.task_id)
    }

    pub fn final_eval(&self) -> &EvalReport {
        self.evaluations.last().expect("at least one task")
    }
}

/// Extra controls for [`run_sequence_with`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Keep a serialized checkpoint after each task.
    pub keep_checkpoints: bool,
    pub decode: DecodeConfig,
}

/// Runs the incremental loop with default options.
pub fn run_sequence(
    model_cfg: &DetectorConfig,
    tasks: &TaskSequence,
    strategy: &StrategyConfig,
    schedule: &TrainSchedule,
) -> Result<ExperimentReport> {
    run_sequence_with(model_cfg, tasks, strategy, schedule, &RunOptions::default())
}

fn phase_seed(seed: u64, task: usize, phase: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((task as u64) << 8 | phase)
}

/// Mines or freezes on the just-trained task according to `strategy`.
fn apply_constraints(
    model: &mut Detector,
    task: &Task,
    strategy: &StrategyConfig,
    schedule: &TrainSchedule,
    pos: usize,
) -> Result<Option<FreezePlan>> {
    let fraction = strategy.freeze_percentage.map(|l| l / 100.0);
    match strategy.strategy {
        Strategy::GradientMining => {
            dump_hooks(model);
            let mask = mine_topk_weights(model, fraction.expect("validated"), &Scope::TRAINABLE)?;
            attach_gradient_penalty(model, &mask, strategy.penalty.expect("validated") as f32)?;
        }
        Strategy::Mmn => {
            model.clear_fixed_masks();
            let mask = mine_topk_weights(model, fraction.expect("validated"), &Scope::TRAINABLE)?;
            fix_masked_weights(model, &mask)?;
        }
        Strategy::LayerFreezing => {
            reset_update_exemptions(model);
            let summaries = collect_summaries(
                model,
                &task.train,
                strategy.sample_fraction.expect("validated"),
                &Scope::TRAINABLE,
                phase_seed(schedule.seed, pos, 2),
                &schedule.summary,
            )?;
            let criterion = strategy.criterion.expect("validated");
            let scores = model
                .layer_inventory(&Scope::TRAINABLE)
                .iter()
                .map(|l| score(&summaries[&l.name], criterion))
                .collect::<Result<Vec<_>>>()?;
            let plan = rank_and_plan(&scores, strategy.freeze_percentage.expect("validated"))?;
            apply_freeze_plan(model, &plan)?;
            return Ok(Some(plan));
        }
        _ => {}
    }
    Ok(None)
}

pub fn run_sequence_with(
    model_cfg: &DetectorConfig,
    tasks: &TaskSequence,
    strategy: &StrategyConfig,
    schedule: &TrainSchedule,
    options: &RunOptions,
) -> Result<ExperimentReport> {
    strategy.validate()?;
    schedule.validate()?;
    model_cfg.validate()?;
    tasks.validate()?;
    if strategy.strategy == Strategy::Joint {
        return joint_train_with(model_cfg, tasks, schedule, options);
    }
    let mut model = Detector::new(model_cfg.clone(), schedule.seed)?;
    let mut buffer = match strategy.replay_capacity {
        Some(cap) => Some(ReplayBuffer::<SampleRef>::new(cap, schedule.seed ^ 0x5eed)?),
        None => None,
    };
    let phase = |steps: usize, lr: f32, task: usize, which: u64| PhaseConfig {
        steps,
        lr,
        batch_size: schedule.batch_size,
        momentum: schedule.momentum,
        weight_decay: schedule.weight_decay,
        warmup_steps: schedule.warmup_steps,
        max_grad_norm: schedule.max_grad_norm,
        seed: phase_seed(schedule.seed, task, which),
        hflip: schedule.hflip,
    };

    let mut report = ExperimentReport {
        strategy: strategy.clone(),
        seed: schedule.seed,
        train_reports: Vec::new(),
        evaluations: Vec::new(),
        final_model: None,
        checkpoints: Vec::new(),
    };
    let fraction = strategy.freeze_percentage.map(|l| l / 100.0);
    for (pos, task) in tasks.tasks.iter().enumerate() {
        let start = Instant::now();
        let before = model.snapshot();
        let (steps, lr) = if pos == 0 {
            (schedule.first_task_steps, schedule.first_lr)
        } else {
            (schedule.incremental_steps, schedule.incremental_lr)
        };
        let source = buffer.as_ref().map(|b| ReplaySource {
            buffer: b,
            tasks: &tasks.tasks,
        });
        let mut final_loss = run_phase(&mut model, task, &phase(steps, lr, pos, 0), source)?;

        let mut plan = None;
        if schedule.regularize_constrained {
            plan = apply_constraints(&mut model, task, strategy, schedule, pos)?;
        }

        if schedule.regularize_steps > 0 {
            let source = buffer.as_ref().map(|b| ReplaySource {
                buffer: b,
                tasks: &tasks.tasks,
            });
            final_loss = run_phase(
                &mut model,
                task,
                &phase(schedule.regularize_steps, schedule.incremental_lr, pos, 1),
                source,
            )?;
        }

        if !schedule.regularize_constrained {
            plan = apply_constraints(&mut model, task, strategy, schedule, pos)?;
        }

        if let Some(b) = buffer.as_mut() {
            b.start_task(pos)?;
            for index in 0..task.train.len() {
                b.observe(SampleRef { task: pos, index }, pos);
            }
        }

        report.train_reports.push(TrainReport {
            task_id: task.id,
            steps_run: steps + schedule.regularize_steps,
            final_loss,
            parameter_delta_norms: param_delta_norms(&model, &before),
            checkpoint_path: None,
            freeze_plan: plan,
            mined_fraction: fraction.filter(|_| {
                matches!(strategy.strategy, Strategy::Mmn | Strategy::GradientMining)
            }),
            seconds: start.elapsed().as_secs_f64(),
        });
        report
            .evaluations
            .push(evaluate_tasks(&model, &tasks.tasks, &options.decode));
        if options.keep_checkpoints {
            report.checkpoints.push(checkpoint::to_bytes(&model)?);
        }
    }
    report.final_model = Some(model);
    Ok(report)
}

/// Upper bound: one model trained on the union of every task's training
/// images with all labels visible, evaluated on each task's test set.
pub fn joint_train(
    model_cfg: &DetectorConfig,
    tasks: &TaskSequence,
    schedule: &TrainSchedule,
) -> Result<(Detector, EvalReport)> {
    let mut report = joint_train_with(model_cfg, tasks, schedule, &RunOptions::default())?;
    let eval = report.evaluations.pop().expect("one evaluation");
    Ok((report.final_model.expect("model kept"), eval))
}

fn joint_train_with(
    model_cfg: &DetectorConfig,
    tasks: &TaskSequence,
    schedule: &TrainSchedule,
    options: &RunOptions,
) -> Result<ExperimentReport> {
    tasks.validate()?;
    let union = Task {
        id: tasks.tasks.last().expect("validated non-empty").id,
        train: tasks.joint_train_set(),
        val: vec![],
        test: vec![],
        class_set: tasks.classes(),
        kind: tasks.tasks[0].kind,
    };
    let single = TaskSequence {
        tasks: vec![union],
        num_classes: tasks.num_classes,
        class_names: tasks.class_names.clone(),
        warnings: vec![],
    };
    let mut report = run_sequence_with(
        model_cfg,
        &single,
        &StrategyConfig::fine_tune(),
        schedule,
        &RunOptions {
            keep_checkpoints: options.keep_checkpoints,
            decode: options.decode,
        },
    )?;
    let model = report.final_model.as_ref().expect("model kept");
    report.evaluations = vec![evaluate_tasks(model, &tasks.tasks, &options.decode)];
    report.strategy = StrategyConfig::joint();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_benchmark, SyntheticSpec};

    fn tiny() -> (DetectorConfig, TaskSequence) {
        let cfg = DetectorConfig {
            num_classes: 4,
            image_size: (32, 32),
            backbone_channels: vec![4, 6, 8],
            neck_channels: 5,
            head_depth: 1,
            grid_stride: 4,
            train_backbone: false,
        };
        let spec = SyntheticSpec {
            num_classes: 4,
            image_size: (32, 32),
            train_per_task: 12,
            val_per_task: 2,
            test_per_task: 6,
            class_groups: vec![vec![0, 1], vec![2, 3]],
            min_shape_size: 6,
            max_shape_size: 10,
            max_instances: 2,
            ..SyntheticSpec::class_incremental_4_4(3)
        };
        (cfg, generate_synthetic_benchmark(&spec).unwrap())
    }

    fn schedule() -> TrainSchedule {
        TrainSchedule {
            first_task_steps: 6,
            incremental_steps: 4,
            regularize_steps: 2,
            batch_size: 4,
            ..TrainSchedule::default()
        }
    }

    #[test]
    fn strategy_fields_checked() {
        assert!(StrategyConfig::fine_tune().validate().is_ok());
        assert!(StrategyConfig::layer_freezing(Criterion::Entropy, 25.0, 0.1).validate().is_ok());
        let mut bad = StrategyConfig::fine_tune();
        bad.criterion = Some(Criterion::Mean);
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = StrategyConfig::layer_freezing(Criterion::Mean, 25.0, 0.1);
        bad.criterion = None;
        assert!(bad.validate().is_err());
        assert!(StrategyConfig::mmn(120.0).validate().is_err());
        assert!(StrategyConfig::gradient_mining(50.0, -0.1).validate().is_err());
        assert!(StrategyConfig::layer_freezing(Criterion::Std, 50.0, 0.0).validate().is_err());
        assert!(StrategyConfig::replay(0).validate().is_err());
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let (cfg, seq) = tiny();
        let mut m = Detector::new(cfg, 0).unwrap();
        let before = m.snapshot();
        let phase = PhaseConfig {
            steps: 0,
            lr: 0.01,
            batch_size: 4,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_steps: 0,
            max_grad_norm: None,
            seed: 0,
            hflip: true,
        };
        let r = train_task(&mut m, &seq.tasks[0], &phase, None).unwrap();
        assert_eq!(m.snapshot(), before);
        assert!(r.parameter_delta_norms.values().all(|d| *d == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, seq) = tiny();
        let run = || {
            run_sequence(&cfg, &seq, &StrategyConfig::replay(8), &schedule())
                .unwrap()
                .final_model
                .unwrap()
                .snapshot()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_layers_do_not_move() {
        let (cfg, seq) = tiny();
        let r = run_sequence(
            &cfg,
            &seq,
            &StrategyConfig::layer_freezing(Criterion::Entropy, 100.0, 0.5),
            &schedule(),
        )
        .unwrap();
        let second = &r.train_reports[1];
        assert!(second.parameter_delta_norms.values().all(|d| *d == 0.0));
        assert_eq!(r.evaluations[0].per_task[&0], r.evaluations[1].per_task[&0]);
        assert_eq!(r.eval_matrix().len(), 2 * 4);
    }

    #[test]
    fn regularize_ordering_flag() {
        let (cfg, mut seq) = tiny();
        seq.tasks.truncate(1);
        let lf = StrategyConfig::layer_freezing(Criterion::Entropy, 100.0, 0.5);
        let final_of = |s: &TrainSchedule| {
            run_sequence(&cfg, &seq, &lf, s).unwrap().final_model.unwrap().snapshot()
        };
        let no_reg = final_of(&TrainSchedule {
            regularize_steps: 0,
            ..schedule()
        });
        assert_eq!(final_of(&schedule()), no_reg);
        let after = final_of(&TrainSchedule {
            regularize_constrained: false,
            ..schedule()
        });
        assert_ne!(after, no_reg);
    }

    #[test]
    fn single_task_joint_equals_fine_tune() {
        let (cfg, mut seq) = tiny();
        seq.tasks.truncate(1);
        for img in seq.tasks[0].train.iter_mut() {
            img.withheld.clear();
        }
        let ft = run_sequence(&cfg, &seq, &StrategyConfig::fine_tune(), &schedule()).unwrap();
        let (model, eval) = joint_train(&cfg, &seq, &schedule()).unwrap();
        assert_eq!(model.snapshot(), ft.final_model.as_ref().unwrap().snapshot());
        assert_eq!(&eval, ft.final_eval());
    }

    #[test]
    fn empty_task_is_a_data_error() {
        let (cfg, mut seq) = tiny();
        seq.tasks[1].train.clear();
        assert!(matches!(
            run_sequence(&cfg, &seq, &StrategyConfig::fine_tune(), &schedule()),
            Err(Error::Data(_))
        ));
    }
}
