//! Task masks on a small network: gates anneal toward binary, masks
//! accumulate across tasks, and gradients on claimed units are cut.

use dcnet::model::{accumulate, anneal_scale, gate_gradients, Activation, MaskState, MaskedNetwork, NetworkSpec};
use dcnet::numerics::{Mat, RngStream};

fn main() -> dcnet::Result<()> {
    let spec = NetworkSpec {
        input_dim: 6,
        hidden_widths: vec![8],
        feature_dim: 8,
        embed_dim: 4,
        activation: Activation::Relu,
        use_bias: false,
    };
    let mut rng = RngStream::new(0, 0);
    let net = MaskedNetwork::new(spec.clone(), &mut rng)?;
    let mut masks = MaskState::new(&spec);

    for p in [0.0, 0.25, 0.5, 1.0] {
        println!("progress {p:.2}: scale {:.3}", anneal_scale(p, 400.0));
    }

    for task in 0..3 {
        masks.begin_task(&mut rng);
        let binary = masks.binarize();
        masks.accumulated = accumulate(&masks.accumulated, &binary);
        let used: usize = masks.accumulated.iter().flatten().filter(|&&a| a == 1.0).count();
        println!("after task {task}: {used} of {} units claimed", spec.gated_units());
    }

    let x = Mat::from_vec(5, 6, rng.normal_vec(30))?;
    let gates = net.open_gates();
    let fwd = net.forward(&x, &gates)?;
    let dz = Mat::from_vec(5, 4, rng.normal_vec(20))?;
    let raw = net.backward(&fwd, &gates, &dz, None);
    let gated = gate_gradients(&raw, &masks.accumulated);
    let zeros = |g: &[Mat]| g.iter().flat_map(|m| m.as_slice()).filter(|v| **v == 0.0).count();
    println!(
        "zero weight gradients: {} before gating, {} after",
        zeros(&raw.weights),
        zeros(&gated.weights)
    );
    Ok(())
}
