//! Total variation between two Gaussians against the Pinsker-style bounds
//! from their KL divergence.

use dcnet::numerics::RngStream;
use dcnet::theory::{kl_gaussian, random_spd, tv_and_pinsker};

fn main() -> dcnet::Result<()> {
    let mut rng = RngStream::new(1, 0);
    let dim = 3;
    let sigma = random_spd(dim, 0.5, &mut rng);
    for shift in [0.1, 0.5, 1.0, 2.0, 4.0] {
        let mu1 = vec![0.0; dim];
        let mu2: Vec<f64> = (0..dim).map(|i| if i == 0 { shift } else { 0.0 }).collect();
        let r = tv_and_pinsker(&mu1, &mu2, &sigma, 50_000, &mut rng)?;
        println!(
            "shift {shift:>3}: KL {:.4} (direct {:.4})  TV {:.4} ± {:.4} (exact {:.4})  sqrt(KL/2) {:.4}  1-exp(-KL)/2 {:.4}",
            r.kl,
            kl_gaussian(&mu1, &mu2, &sigma)?,
            r.tv.mean,
            r.tv.se,
            r.tv_exact,
            r.pinsker_sqrt,
            r.pinsker_exp
        );
    }
    Ok(())
}
