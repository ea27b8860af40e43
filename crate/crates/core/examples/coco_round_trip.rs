//! Exports a synthetic task as COCO (PNG files plus annotation JSON), reads
//! it back and splits it into class-incremental tasks.

use cod_mining::data::{export_coco, generate_synthetic_benchmark, load_coco_detection, SyntheticSpec};
use cod_mining::experiment::{build_tasks, CocoSource, DataConfig};

fn main() -> cod_mining::Result<()> {
    let seq = generate_synthetic_benchmark(&SyntheticSpec {
        train_per_task: 30,
        val_per_task: 5,
        test_per_task: 5,
        ..SyntheticSpec::class_incremental_4_4(5)
    })?;
    let dir = std::env::temp_dir().join("cod_mining_coco");
    let images = seq.joint_train_set();
    export_coco(&images, &seq.class_names, &dir.join("instances.json"), &dir.join("images"))?;

    let ds = load_coco_detection(&dir.join("instances.json"), &dir.join("images"))?;
    println!("loaded {} images, classes {:?}", ds.images.len(), ds.class_names);
    let tasks = build_tasks(&DataConfig::Coco(CocoSource {
        annotations: dir.join("instances.json"),
        image_root: dir.join("images"),
        class_groups: vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]],
        val_fraction: 0.1,
        test_fraction: 0.2,
        split_seed: 9,
    }))?;
    for t in &tasks.tasks {
        println!("task {}: {} train / {} val / {} test", t.id, t.train.len(), t.val.len(), t.test.len());
    }
    for w in &tasks.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
