//! Annotated images, task sequences and the ways to build them: the
//! synthetic shapes benchmark, COCO-format ingestion and class-incremental
//! splitting.

mod coco;
mod split;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

pub use coco::{export_coco, load_coco_detection, CocoDataset};
pub use split::{split_class_incremental, DatasetSplits};
pub use synthetic::{
    generate_synthetic_benchmark, render_image, BackgroundStyle, RenderedImage, ShapeKind,
    SyntheticSpec,
};

use crate::bbox::LabeledBox;
use crate::error::{Error, Result};

/// An RGB image in `[0, 1]` with its annotations.
///
/// `boxes` are the labels visible under the task protocol. `withheld` keeps
/// instances the protocol hides (e.g. other-group objects in a
/// class-incremental task); only joint training looks at them.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    /// `[3, H, W]` channel-major pixels.
    pub pixels: Vec<f32>,
    pub boxes: Vec<LabeledBox>,
    pub withheld: Vec<LabeledBox>,
}

impl AnnotatedImage {
    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Every instance, visible or withheld.
    pub fn all_boxes(&self) -> impl Iterator<Item = &LabeledBox> {
        self.boxes.iter().chain(&self.withheld)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Data(format!("image `{}` has zero size", self.image_id)));
        }
        if self.pixels.len() != 3 * self.height * self.width {
            return Err(Error::Data(format!(
                "image `{}` pixel buffer does not match {}x{}x3",
                self.image_id, self.height, self.width
            )));
        }
        for b in self.all_boxes() {
            let bb = &b.bbox;
            if !bb.is_valid()
                || bb.x1 < 0.0
                || bb.y1 < 0.0
                || bb.x2 > self.width as f32
                || bb.y2 > self.height as f32
            {
                return Err(Error::Data(format!(
                    "image `{}` has a box outside its bounds: {bb:?}",
                    self.image_id
                )));
            }
        }
        Ok(())
    }

    /// Horizontally mirrored copy.
    pub fn hflip(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut pixels = vec![0.0; self.pixels.len()];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    pixels[(c * h + y) * w + x] = self.pixels[(c * h + y) * w + (w - 1 - x)];
                }
            }
        }
        let flip = |b: &LabeledBox| LabeledBox {
            bbox: b.bbox.hflip(w as f32),
            class_id: b.class_id,
        };
        Self {
            image_id: self.image_id.clone(),
            height: h,
            width: w,
            pixels,
            boxes: self.boxes.iter().map(flip).collect(),
            withheld: self.withheld.iter().map(flip).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ClassIncremental,
    DomainIncremental,
    Mixed,
}

/// One learning experience.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub train: Vec<AnnotatedImage>,
    pub val: Vec<AnnotatedImage>,
    pub test: Vec<AnnotatedImage>,
    pub class_set: BTreeSet<usize>,
    pub kind: TaskKind,
}

impl Task {
    /// Checks label membership and split disjointness.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for img in self.train.iter().chain(&self.val).chain(&self.test) {
            img.validate()?;
            if !ids.insert(img.image_id.as_str()) {
                return Err(Error::Data(format!(
                    "task {}: image `{}` appears in more than one split",
                    self.id, img.image_id
                )));
            }
            if let Some(b) = img.boxes.iter().find(|b| !self.class_set.contains(&b.class_id)) {
                return Err(Error::Data(format!(
                    "task {}: label {} outside the task class set",
                    self.id, b.class_id
                )));
            }
        }
        Ok(())
    }

    /// Visible instance count per class in the given split.
    pub fn instance_counts(images: &[AnnotatedImage]) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for b in images.iter().flat_map(|i| &i.boxes) {
            *counts.entry(b.class_id).or_insert(0) += 1;
        }
        counts
    }
}

/// Ordered learning experiences over one label space.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Non-fatal issues found while building the sequence.
    pub warnings: Vec<String>,
}

impl TaskSequence {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Data("task sequence is empty".into()));
        }
        for t in &self.tasks {
            if t.train.is_empty() {
                return Err(Error::Data(format!("task {} has no training images", t.id)));
            }
            t.validate()?;
        }
        Ok(())
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.tasks.first()?.train.first().map(AnnotatedImage::size)
    }

    /// Union of every class set.
    pub fn classes(&self) -> BTreeSet<usize> {
        self.tasks.iter().flat_map(|t| t.class_set.iter().copied()).collect()
    }

    /// Union of all training images with every annotation visible, one entry
    /// per distinct image id.
    pub fn joint_train_set(&self) -> Vec<AnnotatedImage> {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut out: Vec<AnnotatedImage> = Vec::new();
        for img in self.tasks.iter().flat_map(|t| &t.train) {
            match index.get(img.image_id.as_str()) {
                Some(&i) => {
                    for b in img.all_boxes() {
                        if !out[i].boxes.contains(b) {
                            out[i].boxes.push(*b);
                        }
                    }
                }
                None => {
                    let mut full = img.clone();
                    full.boxes = img.all_boxes().copied().collect();
                    full.withheld.clear();
                    index.insert(img.image_id.as_str(), out.len());
                    out.push(full);
                }
            }
        }
        out
    }
}
