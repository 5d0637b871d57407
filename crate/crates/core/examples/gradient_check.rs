//! Finite-difference check of the IOE, DAC and network gradients.

use dcnet::gradcheck::{grad_check_suite, GradTarget, DEFAULT_TOLERANCE};

fn main() -> dcnet::Result<()> {
    let suite = grad_check_suite(0, 20, DEFAULT_TOLERANCE)?;
    for target in [GradTarget::Ioe, GradTarget::Dac, GradTarget::Network] {
        let w = suite.worst(target).expect("at least one batch");
        println!(
            "{:<8} worst relative error {:.2e}  (batch {}, {} samples, dim {}, tau {})",
            target.name(),
            w.report.max_relative_error,
            w.batch,
            w.samples,
            w.dim,
            w.tau
        );
    }
    println!(
        "{} of {} batches within {DEFAULT_TOLERANCE:e}",
        suite.rows.len() - suite.failures(),
        suite.rows.len()
    );
    Ok(())
}
