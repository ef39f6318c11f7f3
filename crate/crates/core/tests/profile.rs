//! Phase timing at desk scale; ignored by default, run with
//! `cargo test -p gatenet --test profile -- --ignored --nocapture`.

use gatenet::data::Dataset;
use gatenet::metrics::evaluate_three_ways;
use gatenet::network::{build_network, Arch, NoiseSpec};
use gatenet::selection::MethodConfig;
use gatenet::training::{adam_step, backward_network, cross_entropy_loss_and_grad, AdamState};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[test]
#[ignore]
fn desk_scale_phase_timing() {
    let arch = Arch {
        input_width: 784,
        layers: 3,
        width: 8000,
        classes: 10,
    };
    let net = build_network(arch, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = 128;
    let features: Vec<f64> = (0..batch * 784)
        .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
        .collect();
    let labels: Vec<u8> = (0..batch).map(|_| rng.random_range(0..10) as u8).collect();

    // Warm up.
    let _ = net
        .forward(&features, batch, MethodConfig::HARD_ST, 1.0, NoiseSpec::None)
        .unwrap();

    let reps = 20;
    let t = Instant::now();
    for _ in 0..reps {
        let _ = net
            .forward(&features, batch, MethodConfig::HARD_ST, 1.0, NoiseSpec::None)
            .unwrap();
    }
    println!("forward: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let (y, trace) = net
        .forward(&features, batch, MethodConfig::HARD_ST, 1.0, NoiseSpec::None)
        .unwrap();
    let mut dy = vec![0.0; batch * 10];
    for s in 0..batch {
        let (_, g) = cross_entropy_loss_and_grad(&y[s * 10..(s + 1) * 10], labels[s] as usize);
        for c in 0..10 {
            dy[s * 10 + c] = g[c] / batch as f64;
        }
    }
    let t = Instant::now();
    for _ in 0..reps {
        let _ = backward_network(&net, &trace, &features, &dy, 1.0).unwrap();
    }
    println!("backward: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let grads = backward_network(&net, &trace, &features, &dy, 1.0).unwrap();
    let mut net2 = net.clone();
    let mut adam = AdamState::new(&net2);
    let t = Instant::now();
    for _ in 0..reps {
        adam_step(&mut net2.logits, &grads, &mut adam, 0.01);
    }
    println!("adam: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = Instant::now();
    let c = gatenet::training::cage_confidence(&net);
    println!(
        "confidence: {:.1} ms (value {c:.3})",
        t.elapsed().as_secs_f64() * 1000.0
    );

    // Evaluation over a 10k test set.
    let n = 10_000;
    let feats: Vec<f64> = (0..n * 784)
        .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
        .collect();
    let labs: Vec<u8> = (0..n).map(|_| rng.random_range(0..10) as u8).collect();
    let ds = Dataset::new(feats, 784, labs, 10).unwrap();
    let t = Instant::now();
    let _ = evaluate_three_ways(&net, &ds, MethodConfig::HARD_ST, 1.0, 0, 1).unwrap();
    println!("evaluate_three_ways(10k): {:.2} s", t.elapsed().as_secs_f64());
}
