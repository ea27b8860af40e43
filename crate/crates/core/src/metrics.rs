//! Detection metrics (AP, mAP at fixed or averaged IoU) and the continual
//! learning metrics built on them: the upper-bound ratio Ω and the rates of
//! stability / plasticity deficit (RSD / RPD), class-level and task-level.
//!
//! AP values in tables are percentages; Ω is a plain ratio.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::bbox::{BBox, LabeledBox};
use crate::error::{Error, Result};
use crate::model::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope at every recall change.
    #[default]
    AllPoint,
    /// Mean of the envelope sampled at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

/// One detection of a single class, tagged with its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    /// In `[0, 1]`.
    pub ap: f64,
    /// True when there was no ground truth; `ap` is then 0.
    pub no_ground_truth: bool,
    /// `(recall, precision)` after each detection in score order.
    pub curve: Vec<(f64, f64)>,
}

/// Greedy matching in descending score order: each detection takes the
/// unmatched ground truth of its image with the highest IoU, provided that
/// IoU reaches `iou_threshold`. Returns the TP flag per sorted detection.
fn match_detections(
    detections: &[ScoredBox],
    ground_truth: &[(usize, BBox)],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; ground_truth.len()];
    order
        .iter()
        .map(|&d| {
            let det = &detections[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, (img, gt)) in ground_truth.iter().enumerate() {
                if *img != det.image || taken[g] {
                    continue;
                }
                let iou = det.bbox.iou(gt);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

pub fn average_precision(
    detections: &[ScoredBox],
    ground_truth: &[(usize, BBox)],
    iou_threshold: f64,
    interpolation: Interpolation,
) -> ApResult {
    if ground_truth.is_empty() {
        return ApResult {
            ap: 0.0,
            no_ground_truth: true,
            curve: vec![],
        };
    }
    let tp = match_detections(detections, ground_truth, iou_threshold);
    let n_gt = ground_truth.len() as f64;
    let mut curve = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, t) in tp.iter().enumerate() {
        hits += usize::from(*t);
        curve.push((hits as f64 / n_gt, hits as f64 / (i + 1) as f64));
    }
    // precision envelope, right to left
    let mut envelope: Vec<f64> = curve.iter().map(|c| c.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let ap = match interpolation {
        Interpolation::AllPoint => {
            let mut prev_recall = 0.0;
            let mut area = 0.0;
            for (i, (r, _)) in curve.iter().enumerate() {
                if *r > prev_recall {
                    area += (r - prev_recall) * envelope[i];
                    prev_recall = *r;
                }
            }
            area
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let r = k as f64 / 10.0;
                    curve
                        .iter()
                        .zip(&envelope)
                        .find(|((rc, _), _)| *rc >= r)
                        .map_or(0.0, |(_, p)| *p)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    ApResult {
        ap,
        no_ground_truth: false,
        curve,
    }
}

/// Which IoU thresholds an AP is computed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouSpec {
    /// IoU 0.5.
    Fixed50,
    /// Mean over IoU 0.50, 0.55, ..., 0.95.
    Averaged,
}

impl IouSpec {
    pub fn thresholds(&self) -> Vec<f64> {
        match self {
            IouSpec::Fixed50 => vec![0.5],
            IouSpec::Averaged => (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
        }
    }
}

/// Detections and ground truth of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<LabeledBox>,
}

/// Per-class AP in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAPTable {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub iou: IouSpec,
    /// Set when no class had any ground truth.
    pub empty: bool,
}

impl ClassAPTable {
    pub fn from_percent(values: impl IntoIterator<Item = (usize, f64)>, iou: IouSpec) -> Self {
        let per_class_ap: BTreeMap<usize, f64> = values.into_iter().collect();
        let empty = per_class_ap.is_empty();
        Self {
            per_class_ap,
            iou,
            empty,
        }
    }

    /// Mean AP over the classes present, in percent (0 when empty).
    pub fn map(&self) -> f64 {
        if self.per_class_ap.is_empty() {
            0.0
        } else {
            self.per_class_ap.values().sum::<f64>() / self.per_class_ap.len() as f64
        }
    }

    pub fn get(&self, class_id: usize) -> Option<f64> {
        self.per_class_ap.get(&class_id).copied()
    }
}

/// Per-class AP over a set of images, for the classes in `classes` (all
/// classes when `None`) that have at least one ground-truth instance.
pub fn map_over_classes(
    per_image: &[ImageResult],
    classes: Option<&BTreeSet<usize>>,
    iou: IouSpec,
    interpolation: Interpolation,
) -> ClassAPTable {
    let mut gt: BTreeMap<usize, Vec<(usize, BBox)>> = BTreeMap::new();
    let mut dets: BTreeMap<usize, Vec<ScoredBox>> = BTreeMap::new();
    for (i, r) in per_image.iter().enumerate() {
        for g in &r.ground_truth {
            gt.entry(g.class_id).or_default().push((i, g.bbox));
        }
        for d in &r.detections {
            dets.entry(d.class_id).or_default().push(ScoredBox {
                image: i,
                bbox: d.bbox,
                score: d.score,
            });
        }
    }
    let thresholds = iou.thresholds();
    let values = gt
        .iter()
        .filter(|(c, _)| classes.is_none_or(|set| set.contains(c)))
        .map(|(&c, g)| {
            let d = dets.get(&c).map_or(&[][..], Vec::as_slice);
            let mean = thresholds
                .iter()
                .map(|&t| average_precision(d, g, t, interpolation).ap)
                .sum::<f64>()
                / thresholds.len() as f64;
            (c, 100.0 * mean)
        });
    ClassAPTable::from_percent(values, iou)
}

/// Both tables the reports use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTables {
    pub averaged: ClassAPTable,
    pub at50: ClassAPTable,
}

pub fn evaluate(per_image: &[ImageResult], classes: Option<&BTreeSet<usize>>) -> EvalTables {
    EvalTables {
        averaged: map_over_classes(per_image, classes, IouSpec::Averaged, Interpolation::AllPoint),
        at50: map_over_classes(per_image, classes, IouSpec::Fixed50, Interpolation::AllPoint),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DeficitOptions {
    /// Skip classes whose joint AP is zero instead of failing.
    pub skip_zero_joint: bool,
}

fn deficit(
    joint: &ClassAPTable,
    inc: &ClassAPTable,
    classes: &BTreeSet<usize>,
    opts: DeficitOptions,
) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Argument("deficit over an empty class set".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for &c in classes {
        let (Some(j), Some(i)) = (joint.get(c), inc.get(c)) else {
            return Err(Error::Argument(format!("class {c} missing from an AP table")));
        };
        if j == 0.0 {
            if opts.skip_zero_joint {
                continue;
            }
            return Err(Error::DivisionDomain(format!("joint AP of class {c} is zero")));
        }
        sum += (j - i) / j * 100.0;
        n += 1;
    }
    if n == 0 {
        return Err(Error::DivisionDomain("every class has zero joint AP".into()));
    }
    Ok(sum / n as f64)
}

/// Rate of stability deficit over the old classes, in percent.
pub fn rsd(joint: &ClassAPTable, inc: &ClassAPTable, old_classes: &BTreeSet<usize>) -> Result<f64> {
    deficit(joint, inc, old_classes, DeficitOptions::default())
}

/// Rate of plasticity deficit over the new classes, in percent.
pub fn rpd(joint: &ClassAPTable, inc: &ClassAPTable, new_classes: &BTreeSet<usize>) -> Result<f64> {
    deficit(joint, inc, new_classes, DeficitOptions::default())
}

pub fn rsd_with(
    joint: &ClassAPTable,
    inc: &ClassAPTable,
    old_classes: &BTreeSet<usize>,
    opts: DeficitOptions,
) -> Result<f64> {
    deficit(joint, inc, old_classes, opts)
}

pub fn rpd_with(
    joint: &ClassAPTable,
    inc: &ClassAPTable,
    new_classes: &BTreeSet<usize>,
    opts: DeficitOptions,
) -> Result<f64> {
    deficit(joint, inc, new_classes, opts)
}

/// Ratio of a final mAP to the joint-training upper bound.
pub fn omega(final_map: f64, joint_map: f64) -> Result<f64> {
    if joint_map == 0.0 {
        return Err(Error::DivisionDomain("joint mAP is zero".into()));
    }
    Ok(final_map / joint_map)
}

/// Task-level deficits: RSD over every task before `last_task`, RPD on
/// `last_task`. RSD is `None` for a single-task sequence.
pub fn task_level_rsd_rpd(
    joint_per_task: &BTreeMap<usize, f64>,
    inc_per_task: &BTreeMap<usize, f64>,
    last_task: usize,
) -> Result<(Option<f64>, f64)> {
    if joint_per_task.keys().ne(inc_per_task.keys()) {
        return Err(Error::Argument("per-task tables have different tasks".into()));
    }
    let rate = |t: usize| -> Result<f64> {
        let j = joint_per_task[&t];
        if j == 0.0 {
            return Err(Error::DivisionDomain(format!("joint mAP of task {t} is zero")));
        }
        Ok((j - inc_per_task[&t]) / j * 100.0)
    };
    if !joint_per_task.contains_key(&last_task) {
        return Err(Error::Argument(format!("task {last_task} missing")));
    }
    let rpd = rate(last_task)?;
    let earlier: Vec<usize> = joint_per_task
        .keys()
        .copied()
        .filter(|&t| t < last_task)
        .collect();
    let rsd = if earlier.is_empty() {
        None
    } else {
        let mut sum = 0.0;
        for &t in &earlier {
            sum += rate(t)?;
        }
        Some(sum / earlier.len() as f64)
    };
    Ok((rsd, rpd))
}

/// Stability / plasticity summary of one incremental run against joint
/// training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CLReport {
    pub rsd: f64,
    pub rpd: f64,
    pub omega: f64,
    pub old_classes: BTreeSet<usize>,
    pub new_classes: BTreeSet<usize>,
}

pub fn cl_report(
    joint: &ClassAPTable,
    inc: &ClassAPTable,
    old_classes: &BTreeSet<usize>,
    new_classes: &BTreeSet<usize>,
) -> Result<CLReport> {
    Ok(CLReport {
        rsd: rsd(joint, inc, old_classes)?,
        rpd: rpd(joint, inc, new_classes)?,
        omega: omega(inc.map(), joint.map())?,
        old_classes: old_classes.clone(),
        new_classes: new_classes.clone(),
    })
}

/// Report document with the fixed field names downstream tools read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map: f64,
    pub map50: f64,
    pub omega: Option<f64>,
    pub rsd: Option<f64>,
    pub rpd: Option<f64>,
}

impl MetricsReport {
    pub fn new(tables: &EvalTables, joint: Option<&EvalTables>, cl: Option<&CLReport>) -> Self {
        Self {
            per_class_ap: tables.at50.per_class_ap.clone(),
            map: tables.averaged.map(),
            map50: tables.at50.map(),
            omega: joint.and_then(|j| omega(tables.averaged.map(), j.averaged.map()).ok()),
            rsd: cl.map(|c| c.rsd),
            rpd: cl.map(|c| c.rpd),
        }
    }

    /// One-row monospace table: per-class AP, mAP, mAP[.50], Ω, RSD, RPD.
    pub fn render_table(&self, label: &str) -> String {
        let mut header = format!("{:<16}", "");
        let mut row = format!("{label:<16}");
        for (c, ap) in &self.per_class_ap {
            header.push_str(&format!("{:>8}", format!("c{c}")));
            row.push_str(&format!("{ap:>8.1}"));
        }
        let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        header.push_str(&format!(
            "{:>8}{:>8}{:>8}{:>8}{:>8}",
            "mAP", "mAP50", "Omega", "RSD", "RPD"
        ));
        row.push_str(&format!(
            "{:>8.1}{:>8.1}{:>8}{:>8}{:>8}",
            self.map,
            self.map50,
            opt(self.omega, 2),
            opt(self.rsd, 2),
            opt(self.rpd, 2)
        ));
        format!("{header}\n{row}\n")
    }
}
