//! Train every variant at a small learning rate on three seeds and print
//! the final validation loss as mean ± 95% interval. This is the desk-scale
//! stand-in for comparing model quality across variants.
//!
//! ```bash
//! cargo run --release --example val_loss_table -- [steps] [lr]
//! ```

use rayon::prelude::*;
use stablelab::harness::{run_single, RunConfig};
use stablelab::StabilityVariant;

pub const SEEDS: [u64; 3] = [0, 1, 2];

/// Student t quantile for a two-sided 95% interval with 2 degrees of freedom.
const T_95_DF2: f64 = 4.303;

#[derive(Debug)]
pub struct Row {
    pub variant: String,
    pub losses: Vec<f32>,
    pub mean: f64,
    pub half_width: f64,
}

pub fn table(steps: u64, lr: f32) -> stablelab::Result<Vec<Row>> {
    let out = std::env::temp_dir().join("stablelab_val_loss_table");
    StabilityVariant::all()
        .par_iter()
        .map(|&v| {
            let mut losses = Vec::new();
            for &seed in &SEEDS {
                let mut cfg = RunConfig::desk().cell(v, lr, steps, seed);
                cfg.run.eval_batches = 16;
                // Diverged runs have no validation loss; NaN keeps them visible.
                losses.push(run_single(&cfg, &out)?.val_loss.unwrap_or(f32::NAN));
            }
            let n = losses.len() as f64;
            let mean = losses.iter().map(|&l| f64::from(l)).sum::<f64>() / n;
            let var = losses
                .iter()
                .map(|&l| (f64::from(l) - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0);
            Ok(Row {
                variant: v.kind.to_string(),
                losses,
                mean,
                half_width: T_95_DF2 * (var / n).sqrt(),
            })
        })
        .collect()
}

pub fn run_example() -> stablelab::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    let lr = args.next().and_then(|a| a.parse().ok()).unwrap_or(1e-3);
    println!("{steps} steps at lr {lr:e}, seeds {SEEDS:?}");
    for r in table(steps, lr)? {
        println!(
            "{:<14} {:.4} ± {:.4}   {:?}",
            r.variant, r.mean, r.half_width, r.losses
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> stablelab::Result<()> {
    run_example()
}
