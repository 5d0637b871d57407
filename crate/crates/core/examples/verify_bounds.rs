//! Monte Carlo check of the separation bounds on random Gaussian mixtures.

use dcnet::theory::{bounds_csv, verify_bounds};

fn main() -> dcnet::Result<()> {
    let rows = verify_bounds(10, 0, 20_000, 1)?;
    for r in &rows {
        println!(
            "spec {:>2} (dim {}, {} in / {} out): D {:.4} ± {:.4}  upper bounds {:.4} {:.4}  {}",
            r.spec_id,
            r.dim,
            r.k,
            r.t,
            r.empirical_d,
            r.se,
            r.lemma1,
            r.theorem1,
            if r.all_pass() { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = std::env::args().nth(1) {
        std::fs::write(&path, bounds_csv(&rows)).expect("write csv");
        println!("wrote {path}");
    }
    Ok(())
}
