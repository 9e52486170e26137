//! Train the desk baseline at a low and a high learning rate from the same
//! seed, classify both runs and compare QKV/Proj/FC2 output norms at the
//! step where the high-LR run diverged.
//!
//! ```bash
//! cargo run --release --example divergence_pair -- [low_lr] [high_lr] [seed]
//! ```

use stablelab::harness::{norm_growth, run_single, RunConfig};
use stablelab::telemetry::read_telemetry;

pub const LOW_LR: f32 = 1e-2;
pub const HIGH_LR: f32 = 0.5;
pub const SEED: u64 = 2;

pub fn run_example() -> stablelab::Result<()> {
    let mut args = std::env::args().skip(1);
    let low = args.next().and_then(|a| a.parse().ok()).unwrap_or(LOW_LR);
    let high = args.next().and_then(|a| a.parse().ok()).unwrap_or(HIGH_LR);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(SEED);
    let out = std::env::temp_dir().join("stablelab_divergence_pair");

    let mut cfg = RunConfig::desk();
    cfg.model.seed = seed;
    cfg.run.lr = low;
    let calm = run_single(&cfg, &out)?;
    cfg.run.lr = high;
    cfg.run.early_abort = true;
    let wild = run_single(&cfg, &out)?;

    for o in [&calm, &wild] {
        let tail = o.history.last().map_or(f32::NAN, |r| r.loss);
        println!(
            "{:<28} {:?} {:?} at step {:?}, last loss {tail:.3}",
            o.run_id, o.verdict.status, o.verdict.reason, o.verdict.divergence_step
        );
    }
    let Some(step) = wild.verdict.divergence_step else {
        println!("high-LR run did not diverge; raise it");
        return Ok(());
    };
    let growth = norm_growth(
        &read_telemetry(&wild.telemetry_path)?,
        &read_telemetry(&calm.telemetry_path)?,
        step,
    );
    for g in &growth {
        println!(
            "block {} {:<4} step {:>4}: y_norm {:>9.3} vs {:>8.3}  ratio {:>7.2}x",
            g.block,
            g.layer.to_string(),
            g.step,
            g.diverged_y_norm,
            g.converged_y_norm,
            g.ratio
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> stablelab::Result<()> {
    run_example()
}
