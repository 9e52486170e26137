//! Calibrate a learning-rate grid on the baseline, sweep every stability
//! variant across it and print the ✓/x matrix, the ordering check and the
//! report built from the run artifacts.
//!
//! ```bash
//! cargo run --release --example lr_sweep -- [steps] [parallel]
//! ```

use stablelab::harness::{calibrate, report, run_sweep, RunConfig};

pub fn run_example() -> stablelab::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = RunConfig::desk();
    cfg.sweep.steps_per_run = args.next().and_then(|a| a.parse().ok()).unwrap_or(300);
    cfg.sweep.parallel = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);
    cfg.sweep.output_dir = std::env::temp_dir().join("stablelab_lr_sweep");
    let _ = std::fs::remove_dir_all(&cfg.sweep.output_dir);

    let base = cfg.cell(
        cfg.model.variant,
        1e-4,
        cfg.sweep.steps_per_run,
        cfg.sweep.seed,
    );
    let cal = calibrate(
        &base,
        1e-4,
        2.0,
        10.0,
        &cfg.sweep.output_dir.join("calibration"),
    )?;
    let ladder: Vec<String> = cal
        .ladder
        .iter()
        .map(|(lr, v)| format!("{lr:.1e}{}", v.mark()))
        .collect();
    println!("ladder: {}", ladder.join(" "));
    cfg.sweep.learning_rates = cal.grid(6);

    let m = run_sweep(&cfg)?;
    println!("{}", m.render());
    println!("{}", m.ordering().render());
    let rep = report(&cfg.sweep.output_dir)?;
    println!(
        "{} runs reported, {} norm-growth rows",
        rep.runs.len(),
        rep.growth.len()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> stablelab::Result<()> {
    run_example()
}
