//! Adaptive against fixed contrastive temperature on the same stream.

use dcnet::config::{parse_config, DESK_CONFIG};
use dcnet::objective::AggregationState;
use dcnet::trainer::run_sequence;

fn main() -> dcnet::Result<()> {
    // the temperature rule on its own
    let mut agg = AggregationState::default();
    for omega in [0.6, 0.5, 0.7, 0.3, 0.9] {
        let prior = &agg.omega_history;
        let avg = if prior.is_empty() {
            f64::NAN
        } else {
            prior.iter().sum::<f64>() / prior.len() as f64
        };
        agg.update_temperature(omega);
        println!("omega {omega:.2}  earlier mean {avg:.3}  tau {:.3}", agg.tau_current);
    }

    let seeds = 0..3;
    for fixed in [false, true] {
        let mut a_last = Vec::new();
        for seed in seeds.clone() {
            let mut cfg = parse_config(DESK_CONFIG, "desk.cfg")?;
            cfg.seed = seed;
            cfg.temperature.fixed = fixed;
            a_last.push(run_sequence(&cfg)?.report.a_last);
        }
        let mean = a_last.iter().sum::<f64>() / a_last.len() as f64;
        let label = if fixed { "fixed" } else { "adaptive" };
        println!("{label:<8} A_last per seed {a_last:.3?}  mean {mean:.4}");
    }
    Ok(())
}
