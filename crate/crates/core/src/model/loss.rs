//! Center-cell target assignment, sigmoid focal classification loss and L1
//! box regression.

use serde::{Deserialize, Serialize};

use super::detector::RawPredictions;
use crate::bbox::{BBox, LabeledBox};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub box_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            box_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub classification: f64,
    pub regression: f64,
    pub total: f64,
}

/// Regression target of `bbox` relative to grid cell `(gx, gy)`.
pub fn encode_box(bbox: &BBox, gx: usize, gy: usize, stride: usize) -> [f32; 4] {
    let s = stride as f32;
    let (cx, cy) = bbox.center();
    [
        cx / s - gx as f32,
        cy / s - gy as f32,
        (bbox.width() / s).ln(),
        (bbox.height() / s).ln(),
    ]
}

/// Inverse of [`encode_box`].
pub fn decode_box(reg: [f32; 4], gx: usize, gy: usize, stride: usize) -> BBox {
    let s = stride as f32;
    let cx = (gx as f32 + reg[0]) * s;
    let cy = (gy as f32 + reg[1]) * s;
    let w = reg[2].clamp(-10.0, 10.0).exp() * s;
    let h = reg[3].clamp(-10.0, 10.0).exp() * s;
    BBox::new(cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5)
}

/// The grid cell responsible for `bbox`: the one containing its center.
pub fn assign_cell(bbox: &BBox, stride: usize, grid: (usize, usize)) -> (usize, usize) {
    let (cx, cy) = bbox.center();
    let gx = ((cx / stride as f32).floor().max(0.0) as usize).min(grid.1 - 1);
    let gy = ((cy / stride as f32).floor().max(0.0) as usize).min(grid.0 - 1);
    (gx, gy)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal loss of one logit and its derivative with respect to the logit.
pub fn focal_term(logit: f64, positive: bool, cfg: &LossConfig) -> (f64, f64) {
    let (a, g) = (cfg.focal_alpha, cfg.focal_gamma);
    let p = 1.0 / (1.0 + (-logit).exp());
    if positive {
        let log_p = -softplus(-logit);
        let q = 1.0 - p;
        let loss = -a * q.powf(g) * log_p;
        let grad = a * g * q.powf(g) * p * log_p - a * q.powf(g + 1.0);
        (loss, grad)
    } else {
        let log_q = -softplus(logit);
        let loss = -(1.0 - a) * p.powf(g) * log_q;
        let grad = -(1.0 - a) * (g * p.powf(g) * (1.0 - p) * log_q - p.powf(g + 1.0));
        (loss, grad)
    }
}

/// Loss over a batch plus gradients with respect to both head outputs.
/// `targets[n]` holds the ground truth of image `n`.
pub fn detection_loss(
    pred: &RawPredictions,
    targets: &[&[LabeledBox]],
    cfg: &LossConfig,
) -> (LossValue, FeatureMap, FeatureMap) {
    let cls = &pred.cls_logits;
    let regs = &pred.box_regs;
    assert_eq!(targets.len(), cls.batch, "one target list per image");
    let grid = (cls.height, cls.width);
    let stride = pred.stride;

    // cell -> (class, target) with the smallest box winning collisions.
    let mut assigned: Vec<Option<(usize, [f32; 4], f64)>> =
        vec![None; cls.batch * grid.0 * grid.1];
    for (n, boxes) in targets.iter().enumerate() {
        for lb in boxes.iter() {
            let (gx, gy) = assign_cell(&lb.bbox, stride, grid);
            let slot = &mut assigned[(n * grid.0 + gy) * grid.1 + gx];
            let area = lb.bbox.area();
            if slot.is_none_or(|(_, _, a)| area < a) {
                *slot = Some((lb.class_id, encode_box(&lb.bbox, gx, gy, stride), area));
            }
        }
    }
    let num_pos = assigned.iter().filter(|a| a.is_some()).count();
    let norm = num_pos.max(1) as f64;

    let mut grad_cls = FeatureMap::zeros(cls.channels, cls.batch, cls.height, cls.width);
    let mut grad_box = FeatureMap::zeros(4, regs.batch, regs.height, regs.width);
    let mut cls_loss = 0.0;
    let mut box_loss = 0.0;
    for n in 0..cls.batch {
        for gy in 0..grid.0 {
            for gx in 0..grid.1 {
                let target = assigned[(n * grid.0 + gy) * grid.1 + gx];
                for c in 0..cls.channels {
                    let idx = cls.index(c, n, gy, gx);
                    let positive = matches!(target, Some((tc, _, _)) if tc == c);
                    let (l, g) = focal_term(cls.data[idx] as f64, positive, cfg);
                    cls_loss += l;
                    grad_cls.data[idx] = (g / norm) as f32;
                }
                if let Some((_, t, _)) = target {
                    for (k, tk) in t.iter().enumerate() {
                        let idx = regs.index(k, n, gy, gx);
                        let diff = (regs.data[idx] - tk) as f64;
                        box_loss += diff.abs();
                        let sign = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        grad_box.data[idx] = (cfg.box_weight * sign / norm) as f32;
                    }
                }
            }
        }
    }
    let classification = cls_loss / norm;
    let regression = cfg.box_weight * box_loss / norm;
    (
        LossValue {
            classification,
            regression,
            total: classification + regression,
        },
        grad_cls,
        grad_box,
    )
}
