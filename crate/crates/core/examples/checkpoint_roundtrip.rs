//! Trains part of a stream, checkpoints to disk, and resumes to the end.

use dcnet::config::{parse_config, DESK_CONFIG};
use dcnet::tasks::make_stream;
use dcnet::trainer::{latest_checkpoint, run_to_dir};

fn main() -> dcnet::Result<()> {
    let mut cfg = parse_config(DESK_CONFIG, "desk.cfg")?;
    cfg.data.tasks = 3;
    cfg.checkpoints = true;
    let tasks = make_stream(&cfg.stream_spec())?.tasks;
    let dir = std::env::temp_dir().join(format!("dcnet-checkpoint-{}", std::process::id()));

    let partial = run_to_dir(&cfg, &tasks[..2], &dir, false)?;
    println!("after 2 tasks: A_last {:.4}", partial.report.a_last);
    println!("newest checkpoint: {:?}", latest_checkpoint(&dir)?);

    let full = run_to_dir(&cfg, &tasks, &dir, true)?;
    println!("resumed to {} tasks: A_last {:.4}", full.state.task, full.report.a_last);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
