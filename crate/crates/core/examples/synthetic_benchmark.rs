//! Generates the two-task shapes benchmark and prints what each task holds.

use cod_mining::data::{generate_synthetic_benchmark, SyntheticSpec, Task};

fn main() -> cod_mining::Result<()> {
    let spec = SyntheticSpec {
        train_per_task: 60,
        test_per_task: 20,
        ..SyntheticSpec::class_incremental_4_4(7)
    };
    let seq = generate_synthetic_benchmark(&spec)?;
    println!("{} classes, image size {:?}", seq.num_classes, seq.image_size());
    for t in &seq.tasks {
        println!(
            "task {}: classes {:?}, {} train / {} val / {} test images",
            t.id,
            t.class_set,
            t.train.len(),
            t.val.len(),
            t.test.len()
        );
        println!("  visible train instances {:?}", Task::instance_counts(&t.train));
    }
    let withheld: usize = seq.tasks[1].train.iter().map(|i| i.all_boxes().count() - i.boxes.len()).sum();
    println!("old-class instances left unlabeled in task 1: {withheld}");
    Ok(())
}
