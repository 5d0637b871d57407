//! Trains the default five-task stream and prints the accuracy matrix.
//!
//! `cargo run --release --example train_sequence -- [seed]`

use dcnet::config::{parse_config, DESK_CONFIG};
use dcnet::trainer::run_sequence;

fn main() -> dcnet::Result<()> {
    let mut cfg = parse_config(DESK_CONFIG, "desk.cfg")?;
    if let Some(seed) = std::env::args().nth(1) {
        cfg.seed = seed.parse().expect("integer seed");
    }
    let r = run_sequence(&cfg)?.report;
    println!("accuracy after each task (class-incremental / task given):");
    for (n, (row, oracle)) in r.acc_matrix.iter().zip(&r.oracle_matrix).enumerate() {
        let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ");
        println!("  {n}: {}  |  {}", fmt(row), fmt(oracle));
    }
    println!("A_last {:.4}  A_inc {:.4}", r.a_last, r.a_inc);
    for t in 0..r.tasks {
        println!(
            "  task {t}: omega {:.3} -> {:.3}, tau {:.3}, mask saturation {:.3}",
            r.omega_start[t], r.omega_end[t], r.tau[t], r.mask_saturation[t]
        );
    }
    for w in &r.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
