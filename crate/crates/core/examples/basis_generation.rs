//! Grows a class basis task by task and prints how orthogonal it stays.
//!
//! `cargo run --release --example basis_generation -- 8 4 3`
//! (dimension, tasks, classes per task)

use dcnet::basis::{BasisSet, GeneratorConfig};

fn main() -> dcnet::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let dim = args.first().copied().unwrap_or(8);
    let tasks = args.get(1).copied().unwrap_or(4);
    let per_task = args.get(2).copied().unwrap_or(3);

    let cfg = GeneratorConfig {
        max_cosine: 0.4,
        ..GeneratorConfig::default()
    };
    let mut basis = BasisSet::new(dim)?;
    for t in 0..tasks {
        basis = basis.extend(per_task, &cfg)?;
        let r = basis.orthogonality_report()?;
        println!(
            "task {t}: {:>2} vectors in dim {dim}, max |cos| {:.4}, mean |cos| {:.4}",
            basis.len(),
            r.max_abs_cos,
            r.mean_abs_cos
        );
    }

    let bytes = basis.to_bytes();
    let back = BasisSet::from_bytes(&bytes)?;
    assert_eq!(back.vectors(), basis.vectors());
    println!("serialized to {} bytes and read back", bytes.len());
    Ok(())
}
