//! Train one desk-scale baseline model and print the loss curve, the
//! verdict and where the artifacts went.
//!
//! ```bash
//! cargo run --release --example train_single -- [lr] [steps]
//! ```

use std::time::Instant;

use stablelab::harness::{run_single, RunConfig};

pub fn run_example() -> stablelab::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::desk();
    cfg.run.lr = args.next().and_then(|a| a.parse().ok()).unwrap_or(3e-3);
    cfg.run.steps = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let out = std::env::temp_dir().join("stablelab_train_single");

    let t = Instant::now();
    let o = run_single(&cfg, &out)?;
    let secs = t.elapsed().as_secs_f32();
    for row in o.history.iter().step_by(20) {
        println!(
            "step {:>5}  loss {:.4}  lr {:.2e}  |g| {:.3}",
            row.step, row.loss, row.lr, row.grad_norm
        );
    }
    println!(
        "{}: {:?} after {} steps ({:.2} ms/step)",
        o.run_id,
        o.verdict.status,
        o.steps_run,
        1e3 * secs / o.steps_run as f32
    );
    if let Some(v) = o.val_loss {
        println!(
            "validation loss {v:.4} (uniform would be {:.4})",
            (cfg.model.vocab_size as f32).ln()
        );
    }
    println!("artifacts in {}", o.run_dir.display());
    Ok(())
}

#[allow(dead_code)]
fn main() -> stablelab::Result<()> {
    run_example()
}
