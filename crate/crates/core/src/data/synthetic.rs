//! Procedural desk-scale detection benchmark.
//!
//! Classes are shape x color family: class `c` draws shape `c % 4`
//! (circle, square, triangle, cross) in color family `c / 4` (warm, cool).
//! Every image holds 1 to `max_instances` non-overlapping shapes. In a
//! class-incremental task only the current group's instances are labelled;
//! other shapes still appear in the pixels and are kept as withheld labels.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, Task, TaskKind, TaskSequence};
use crate::bbox::{BBox, LabeledBox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub fn of_class(class_id: usize) -> Self {
        match class_id % 4 {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Cross,
        }
    }

    fn contains(&self, x: usize, y: usize, w: usize, h: usize) -> bool {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
        match self {
            ShapeKind::Circle => {
                let (dx, dy) = ((fx - cx) / cx, (fy - cy) / cy);
                dx * dx + dy * dy <= 1.0
            }
            ShapeKind::Square => true,
            ShapeKind::Triangle => (fx - cx).abs() <= cx * fy / h as f32,
            ShapeKind::Cross => {
                (fx - cx).abs() <= w as f32 / 6.0 || (fy - cy).abs() <= h as f32 / 6.0
            }
        }
    }
}

/// Background texture, varied per task to create domain shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundStyle {
    Plain,
    Gradient,
    Stripes,
    Dark,
}

impl BackgroundStyle {
    fn pixel(&self, x: usize, y: usize, w: usize, h: usize, noise: f32) -> [f32; 3] {
        let v = match self {
            BackgroundStyle::Plain => 0.55,
            BackgroundStyle::Gradient => 0.3 + 0.5 * (x as f32 / w as f32),
            BackgroundStyle::Stripes => {
                if (y / 4) % 2 == 0 {
                    0.65
                } else {
                    0.4
                }
            }
            BackgroundStyle::Dark => 0.15 + 0.1 * (y as f32 / h as f32),
        };
        [v + noise, v + noise * 0.8, v + noise * 1.2].map(|c| c.clamp(0.0, 1.0))
    }
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: (usize, usize),
    pub train_per_task: usize,
    pub val_per_task: usize,
    pub test_per_task: usize,
    pub class_groups: Vec<Vec<usize>>,
    /// One style per task; empty means `Plain` everywhere.
    pub background_styles: Vec<BackgroundStyle>,
    pub kind: TaskKind,
    pub max_instances: usize,
    pub min_shape_size: usize,
    pub max_shape_size: usize,
    /// Probability that an extra instance is drawn from outside the group.
    pub other_class_probability: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::class_incremental_4_4(0)
    }
}

impl SyntheticSpec {
    /// Two tasks: classes 0-3, then 4-7.
    pub fn class_incremental_4_4(seed: u64) -> Self {
        Self {
            num_classes: 8,
            image_size: (64, 64),
            train_per_task: 400,
            val_per_task: 50,
            test_per_task: 100,
            class_groups: vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]],
            background_styles: vec![],
            kind: TaskKind::ClassIncremental,
            max_instances: 5,
            min_shape_size: 10,
            max_shape_size: 20,
            other_class_probability: 0.5,
            seed,
        }
    }

    /// Four tasks with re-occurring classes and a background shift per task.
    pub fn four_task_mixed(seed: u64) -> Self {
        Self {
            class_groups: vec![
                vec![0, 1, 2],
                vec![2, 3, 4],
                vec![4, 5, 6],
                vec![1, 6, 7],
            ],
            background_styles: vec![
                BackgroundStyle::Plain,
                BackgroundStyle::Gradient,
                BackgroundStyle::Stripes,
                BackgroundStyle::Dark,
            ],
            kind: TaskKind::Mixed,
            ..Self::class_incremental_4_4(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > 8 {
            return err(format!(
                "num_classes must be in 1..=8 (4 shapes x 2 color families), got {}",
                self.num_classes
            ));
        }
        if self.class_groups.is_empty() {
            return err("at least one class group is required".into());
        }
        for (i, g) in self.class_groups.iter().enumerate() {
            if g.is_empty() {
                return err(format!("class group {i} is empty"));
            }
            if let Some(c) = g.iter().find(|&&c| c >= self.num_classes) {
                return err(format!("class group {i} names class {c} >= num_classes"));
            }
        }
        let covered: BTreeSet<usize> = self.class_groups.iter().flatten().copied().collect();
        if covered.len() != self.num_classes {
            return err("class groups must cover every class".into());
        }
        if !self.background_styles.is_empty()
            && self.background_styles.len() != self.class_groups.len()
        {
            return err("need one background style per task".into());
        }
        let (h, w) = self.image_size;
        if self.min_shape_size < 3
            || self.min_shape_size > self.max_shape_size
            || self.max_shape_size >= h.min(w)
        {
            return err("shape sizes must satisfy 3 <= min <= max < image side".into());
        }
        if self.max_instances == 0 || self.train_per_task == 0 {
            return err("max_instances and train_per_task must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.other_class_probability) {
            return err("other_class_probability must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// A rendered image with the per-instance masks it was drawn from.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub image: AnnotatedImage,
    /// `(class_id, row-major H x W mask)` per instance, in drawing order.
    pub masks: Vec<(usize, Vec<bool>)>,
}

fn color(class_id: usize, rng: &mut ChaCha8Rng) -> [f32; 3] {
    let j = |rng: &mut ChaCha8Rng| rng.gen_range(-0.08..0.08f32);
    let base = if class_id / 4 == 0 {
        [0.9, 0.35, 0.1]
    } else {
        [0.1, 0.45, 0.9]
    };
    [
        base[0] + j(rng),
        base[1] + j(rng),
        base[2] + j(rng),
    ]
    .map(|c| c.clamp(0.0, 1.0))
}

fn derived_seed(seed: u64, task: usize, split: usize, index: usize) -> u64 {
    // splitmix64 over the tuple
    let mut z = seed
        ^ (task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (split as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (index as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one image of task `task` whose first instance comes from `group`.
pub fn render_image(
    spec: &SyntheticSpec,
    task: usize,
    group: &[usize],
    image_id: String,
    seed: u64,
) -> RenderedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = spec.image_size;
    let style = spec
        .background_styles
        .get(task)
        .copied()
        .unwrap_or(BackgroundStyle::Plain);
    let mut pixels = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = style.pixel(x, y, w, h, rng.gen_range(-0.05..0.05));
            for c in 0..3 {
                pixels[(c * h + y) * w + x] = px[c];
            }
        }
    }

    let outside: Vec<usize> = (0..spec.num_classes).filter(|c| !group.contains(c)).collect();
    let count = rng.gen_range(1..=spec.max_instances);
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut masks = Vec::new();
    let mut boxes = Vec::new();
    let mut withheld = Vec::new();
    for k in 0..count {
        let class_id = if k == 0 || outside.is_empty() || !rng.gen_bool(spec.other_class_probability)
        {
            group[rng.gen_range(0..group.len())]
        } else {
            outside[rng.gen_range(0..outside.len())]
        };
        let sw = rng.gen_range(spec.min_shape_size..=spec.max_shape_size);
        let sh = if ShapeKind::of_class(class_id) == ShapeKind::Square {
            rng.gen_range(spec.min_shape_size..=spec.max_shape_size)
        } else {
            sw
        };
        // rejection sampling for a non-overlapping spot with a 2 px margin
        let spot = (0..50).find_map(|_| {
            let x0 = rng.gen_range(0..=w - sw);
            let y0 = rng.gen_range(0..=h - sh);
            let clear = placed.iter().all(|&(px, py, pw, ph)| {
                x0 + sw + 2 <= px || px + pw + 2 <= x0 || y0 + sh + 2 <= py || py + ph + 2 <= y0
            });
            clear.then_some((x0, y0))
        });
        let Some((x0, y0)) = spot else {
            if k == 0 {
                unreachable!("an empty canvas always fits one shape");
            }
            continue;
        };
        placed.push((x0, y0, sw, sh));
        let shape = ShapeKind::of_class(class_id);
        let rgb = color(class_id, &mut rng);
        let mut mask = vec![false; h * w];
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for dy in 0..sh {
            for dx in 0..sw {
                if shape.contains(dx, dy, sw, sh) {
                    let (x, y) = (x0 + dx, y0 + dy);
                    mask[y * w + x] = true;
                    for c in 0..3 {
                        pixels[(c * h + y) * w + x] = rgb[c];
                    }
                    x1 = x1.min(x);
                    y1 = y1.min(y);
                    x2 = x2.max(x + 1);
                    y2 = y2.max(y + 1);
                }
            }
        }
        let lb = LabeledBox {
            bbox: BBox::new(x1 as f32, y1 as f32, x2 as f32, y2 as f32),
            class_id,
        };
        if group.contains(&class_id) {
            boxes.push(lb);
        } else {
            withheld.push(lb);
        }
        masks.push((class_id, mask));
    }
    RenderedImage {
        image: AnnotatedImage {
            image_id,
            height: h,
            width: w,
            pixels,
            boxes,
            withheld,
        },
        masks,
    }
}

/// Generates the full task sequence. Output is a pure function of `spec`.
pub fn generate_synthetic_benchmark(spec: &SyntheticSpec) -> Result<TaskSequence> {
    spec.validate()?;
    let mut tasks = Vec::with_capacity(spec.class_groups.len());
    for (t, group) in spec.class_groups.iter().enumerate() {
        let make = |split: usize, name: &str, n: usize| -> Vec<AnnotatedImage> {
            (0..n)
                .map(|i| {
                    render_image(
                        spec,
                        t,
                        group,
                        format!("t{t}-{name}-{i:05}"),
                        derived_seed(spec.seed, t, split, i),
                    )
                    .image
                })
                .collect()
        };
        tasks.push(Task {
            id: t,
            train: make(0, "train", spec.train_per_task),
            val: make(1, "val", spec.val_per_task),
            test: make(2, "test", spec.test_per_task),
            class_set: group.iter().copied().collect(),
            kind: spec.kind,
        });
    }
    let class_names = (0..spec.num_classes)
        .map(|c| {
            let family = if c / 4 == 0 { "warm" } else { "cool" };
            format!("{family}_{:?}", ShapeKind::of_class(c)).to_lowercase()
        })
        .collect();
    let seq = TaskSequence {
        tasks,
        num_classes: spec.num_classes,
        class_names,
        warnings: vec![],
    };
    seq.validate()?;
    Ok(seq)
}
