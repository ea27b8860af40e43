//! Turning dense head outputs into scored, class-wise NMS-filtered boxes.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::detector::RawPredictions;
use super::loss::decode_box;
use crate::bbox::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_threshold: f32,
    pub nms_iou: f32,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

/// Descending score; ties by class then coordinates so the order is total.
fn by_score(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// Greedy per-class non-maximum suppression.
pub fn nms(mut candidates: Vec<Detection>, iou_threshold: f32) -> Vec<Detection> {
    candidates.sort_by(by_score);
    let mut kept: Vec<Detection> = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let suppressed = kept.iter().any(|k| {
            k.class_id == cand.class_id && k.bbox.iou(&cand.bbox) > iou_threshold as f64
        });
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

/// Detections for image `n` of the batch, sorted by descending score.
pub fn decode_predictions(
    raw: &RawPredictions,
    n: usize,
    image_size: (usize, usize),
    cfg: &DecodeConfig,
) -> Vec<Detection> {
    let cls = &raw.cls_logits;
    let regs = &raw.box_regs;
    let (h, w) = (image_size.0 as f32, image_size.1 as f32);
    let mut candidates = Vec::new();
    for gy in 0..cls.height {
        for gx in 0..cls.width {
            let mut bbox = None;
            for c in 0..cls.channels {
                let logit = cls.at(c, n, gy, gx);
                let score = 1.0 / (1.0 + (-logit).exp());
                if !(score >= cfg.score_threshold) || score <= 0.0 {
                    continue;
                }
                let b = *bbox.get_or_insert_with(|| {
                    let reg = [0, 1, 2, 3].map(|k| regs.at(k, n, gy, gx));
                    decode_box(reg, gx, gy, raw.stride).clamp_to(w, h)
                });
                if b.is_valid() {
                    candidates.push(Detection {
                        bbox: b,
                        class_id: c,
                        score: score.min(1.0),
                    });
                }
            }
        }
    }
    let mut kept = nms(candidates, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}
