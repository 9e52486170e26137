//! Spectral reparameterization: rescale a weight so its largest singular
//! value equals a learnable γ, and watch the warm-started power iteration
//! track σ while the weight drifts.
//!
//! ```bash
//! cargo run --example sigma_reparam
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stablelab::{sigma_reparam_weight, spectral_norm, PowerIteration, Tensor};

pub fn run_example() -> stablelab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = Tensor::randn([48, 32], 0.5, &mut rng);
    let sigma = spectral_norm(&w, 500, 1e-7)?;
    for gamma in [0.5f32, 1.0, 3.0] {
        let wr = sigma_reparam_weight(&w, gamma)?;
        println!(
            "σ(W) = {sigma:.4}  γ = {gamma}  σ(Ŵ) = {:.5}",
            spectral_norm(&wr, 500, 1e-7)?
        );
    }

    // Small perturbations per step, as during training: a couple of warm
    // iterations keep the estimate close to a cold, fully converged one.
    let mut state = PowerIteration::new(48, 32);
    state.refresh(&w, 200, 1e-7)?;
    let mut w = w;
    for step in 0..5 {
        let noise = Tensor::randn([48, 32], 0.01, &mut rng);
        w = Tensor::new(
            [48, 32],
            w.data()
                .iter()
                .zip(noise.data())
                .map(|(a, b)| a + b)
                .collect(),
        )?;
        let warm = state.refresh(&w, 2, 0.0)?;
        let cold = spectral_norm(&w, 1000, 1e-9)?;
        println!("step {step}: warm(2 iters) {warm:.5}  converged {cold:.5}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> stablelab::Result<()> {
    run_example()
}
