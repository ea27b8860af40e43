//! COCO-format detection annotations: loading with dense category remapping,
//! and export of in-memory datasets (PNG images plus one JSON file).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AnnotatedImage;
use crate::bbox::{BBox, LabeledBox};
use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f32; 4],
    #[serde(default)]
    area: f32,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// A loaded COCO dataset with categories remapped to `0..C`.
#[derive(Debug, Clone, PartialEq)]
pub struct CocoDataset {
    pub images: Vec<AnnotatedImage>,
    pub class_names: Vec<String>,
    /// Original COCO category id of each dense class.
    pub category_ids: Vec<u64>,
}

fn read_png(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Ok((h, w, pixels))
}

/// Loads a COCO detection file. Categories are sorted by id and remapped to
/// dense class ids; boxes are converted from `[x, y, w, h]` to corners.
pub fn load_coco_detection(annotation_path: &Path, image_root: &Path) -> Result<CocoDataset> {
    let bytes = fs::read(annotation_path).at(annotation_path)?;
    let file: CocoFile = serde_json::from_slice(&bytes).map_err(|e| {
        Error::Ingestion(vec![format!("{}: {e}", annotation_path.display())])
    })?;

    let mut cats = file.categories.clone();
    cats.sort_by_key(|c| c.id);
    let dense: HashMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();

    let mut offenders = Vec::new();
    let mut by_image: BTreeMap<u64, Vec<LabeledBox>> = BTreeMap::new();
    let image_ids: HashMap<u64, &CocoImage> = file.images.iter().map(|i| (i.id, i)).collect();
    for a in &file.annotations {
        let Some(&class_id) = dense.get(&a.category_id) else {
            offenders.push(format!("annotation {}: unknown category {}", a.id, a.category_id));
            continue;
        };
        if !image_ids.contains_key(&a.image_id) {
            offenders.push(format!("annotation {}: unknown image {}", a.id, a.image_id));
            continue;
        }
        let [x, y, w, h] = a.bbox;
        if w <= 0.0 || h <= 0.0 {
            offenders.push(format!("annotation {}: degenerate box {:?}", a.id, a.bbox));
            continue;
        }
        by_image.entry(a.image_id).or_default().push(LabeledBox {
            bbox: BBox::from_xywh(x, y, w, h),
            class_id,
        });
    }

    let mut images = Vec::with_capacity(file.images.len());
    for meta in &file.images {
        let path = image_root.join(&meta.file_name);
        if !path.is_file() {
            offenders.push(format!("missing image {}", path.display()));
            continue;
        }
        match read_png(&path) {
            Ok((h, w, pixels)) => {
                if (h, w) != (meta.height, meta.width) {
                    offenders.push(format!(
                        "{}: size {w}x{h} differs from annotation {}x{}",
                        meta.file_name, meta.width, meta.height
                    ));
                    continue;
                }
                images.push(AnnotatedImage {
                    image_id: meta.id.to_string(),
                    height: h,
                    width: w,
                    pixels,
                    boxes: by_image.remove(&meta.id).unwrap_or_default(),
                    withheld: vec![],
                });
            }
            Err(e) => offenders.push(format!("{}: {e}", meta.file_name)),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Ingestion(offenders));
    }
    Ok(CocoDataset {
        images,
        class_names: cats.iter().map(|c| c.name.clone()).collect(),
        category_ids: cats.iter().map(|c| c.id).collect(),
    })
}

/// Writes `images` as PNG files under `image_root` and a COCO annotation
/// file at `annotation_path`. Only visible boxes are exported; category ids
/// are the dense class ids.
pub fn export_coco(
    images: &[AnnotatedImage],
    class_names: &[String],
    annotation_path: &Path,
    image_root: &Path,
) -> Result<()> {
    fs::create_dir_all(image_root).at(image_root)?;
    let mut coco = CocoFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: class_names
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i as u64,
                name: n.clone(),
            })
            .collect(),
    };
    for (idx, img) in images.iter().enumerate() {
        let file_name = format!("{}.png", img.image_id);
        let (h, w) = img.size();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                let v = img.pixels[(c * h + y as usize) * w + x as usize];
                p[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        let path = image_root.join(&file_name);
        buf.save(&path)?;
        coco.images.push(CocoImage {
            id: idx as u64,
            file_name,
            width: w,
            height: h,
        });
        for b in &img.boxes {
            let xywh = b.bbox.to_xywh();
            coco.annotations.push(CocoAnnotation {
                id: coco.annotations.len() as u64,
                image_id: idx as u64,
                category_id: b.class_id as u64,
                bbox: xywh,
                area: xywh[2] * xywh[3],
                iscrowd: 0,
            });
        }
    }
    if let Some(parent) = annotation_path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(annotation_path, serde_json::to_vec_pretty(&coco)?).at(annotation_path)
}
