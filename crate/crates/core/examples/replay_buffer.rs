//! Task-balanced reservoir: quotas shrink as tasks arrive and every stored
//! set stays a uniform sample of its stream.

use cod_mining::replay::ReplayBuffer;

fn main() -> cod_mining::Result<()> {
    let mut buffer = ReplayBuffer::new(12, 42)?;
    for task in 0..3 {
        buffer.start_task(task)?;
        for i in 0..100 {
            buffer.observe(task * 1000 + i, task);
        }
        buffer.check_invariants()?;
        for t in buffer.tasks() {
            println!("after task {task}: task {} quota {} holds {:?}", t.task_id, t.quota, t.reservoir);
        }
    }
    println!("batch of 6: {:?}", buffer.sample_batch(6, 7)?);
    Ok(())
}
