use std::collections::BTreeSet;

use super::{AnnotatedImage, Task, TaskKind, TaskSequence};
use crate::error::{Error, Result};

/// A fully annotated dataset before it is cut into tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<AnnotatedImage>,
    pub val: Vec<AnnotatedImage>,
    pub test: Vec<AnnotatedImage>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

fn restrict(images: &[AnnotatedImage], group: &BTreeSet<usize>) -> Vec<AnnotatedImage> {
    images
        .iter()
        .filter(|img| img.all_boxes().any(|b| group.contains(&b.class_id)))
        .map(|img| {
            let (boxes, withheld) = img.all_boxes().partition(|b| group.contains(&b.class_id));
            AnnotatedImage {
                boxes,
                withheld,
                ..img.clone()
            }
        })
        .collect()
}

/// Cuts a dataset into class-incremental tasks. Task `i` holds every image
/// with at least one instance of group `i`, labelled for group `i` only;
/// images without such an instance are excluded and an image may land in
/// several tasks. Classes absent from the data produce warnings.
pub fn split_class_incremental(
    dataset: &DatasetSplits,
    class_groups: &[Vec<usize>],
) -> Result<TaskSequence> {
    if class_groups.is_empty() {
        return Err(Error::Argument("no class groups given".into()));
    }
    let present: BTreeSet<usize> = dataset
        .train
        .iter()
        .chain(&dataset.val)
        .chain(&dataset.test)
        .flat_map(|i| i.all_boxes().map(|b| b.class_id))
        .collect();
    let mut warnings = Vec::new();
    let mut tasks = Vec::new();
    for (id, group) in class_groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::Argument(format!("class group {id} is empty")));
        }
        let group: BTreeSet<usize> = group.iter().copied().collect();
        for c in group.iter().filter(|c| !present.contains(c)) {
            warnings.push(format!("class {c} of group {id} has no instances in the dataset"));
        }
        tasks.push(Task {
            id,
            train: restrict(&dataset.train, &group),
            val: restrict(&dataset.val, &group),
            test: restrict(&dataset.test, &group),
            class_set: group,
            kind: TaskKind::ClassIncremental,
        });
    }
    Ok(TaskSequence {
        tasks,
        num_classes: dataset.num_classes,
        class_names: dataset.class_names.clone(),
        warnings,
    })
}
