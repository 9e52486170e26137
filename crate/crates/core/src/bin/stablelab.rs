use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stablelab::harness::{calibrate, report, run_single, run_sweep, RunConfig, SATURATION_CSV};
use stablelab::telemetry::{softmax_saturation_demo, write_saturation_csv, DEMO_SEED};
use stablelab::{Error, Result, StabilityVariant, VariantKind};

#[derive(Parser)]
#[command(
    name = "stablelab",
    version,
    about = "Transformer training-stability experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a single configuration and classify it.
    Run(Common),
    /// Train every (variant, learning rate) cell of a grid.
    Sweep(Common),
    /// Softmax saturation table for scaled uniform logits.
    DemoSoftmax(Common),
    /// Summarize the runs found in an output directory.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Variant name; `sweep` accepts a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    variant: Vec<VariantKind>,
    /// Peak learning rate; `sweep` accepts a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    lr: Vec<f32>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for `sweep`.
    #[arg(long)]
    parallel: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(),
        };
        if let Some(s) = self.steps {
            cfg.run.steps = s;
            cfg.sweep.steps_per_run = s;
        }
        if let Some(s) = self.seed {
            cfg.model.seed = s;
            cfg.sweep.seed = s;
        }
        if let Some(p) = self.parallel {
            cfg.sweep.parallel = p;
        }
        Ok(cfg)
    }

    fn single<T: Copy>(&self, xs: &[T], what: &str) -> Result<Option<T>> {
        match xs {
            [] => Ok(None),
            [x] => Ok(Some(*x)),
            _ => Err(Error::Config(format!("`run` takes a single {what}"))),
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run(a) => {
            let mut cfg = a.load()?;
            if let Some(v) = a.single(&a.variant, "variant")? {
                cfg.model.variant = StabilityVariant::new(v);
            }
            if let Some(lr) = a.single(&a.lr, "learning rate")? {
                cfg.run.lr = lr;
            }
            let out = a.out.clone().unwrap_or_else(|| cfg.run.output_dir.clone());
            let o = run_single(&cfg, &out)?;
            println!(
                "{} {} {:?} step {:?} reason {:?}",
                o.run_id,
                o.verdict.mark(),
                o.verdict.status,
                o.verdict.divergence_step,
                o.verdict.reason
            );
            if let Some(v) = o.val_loss {
                println!("validation loss {v:.4}");
            }
            println!("telemetry {}", o.telemetry_path.display());
        }
        Cmd::Sweep(a) => {
            let mut cfg = a.load()?;
            if !a.variant.is_empty() {
                cfg.sweep.variants = a
                    .variant
                    .iter()
                    .map(|&k| StabilityVariant::new(k))
                    .collect();
            }
            if !a.lr.is_empty() {
                cfg.sweep.learning_rates = a.lr.clone();
            }
            if let Some(o) = &a.out {
                cfg.sweep.output_dir = o.clone();
            }
            if cfg.sweep.learning_rates.is_empty() {
                let mut base = cfg.cell(
                    StabilityVariant::default(),
                    1e-4,
                    cfg.sweep.steps_per_run,
                    cfg.sweep.seed,
                );
                base.run.early_abort = true;
                let cal = calibrate(
                    &base,
                    1e-4,
                    2.0,
                    10.0,
                    &cfg.sweep.output_dir.join("calibration"),
                )?;
                for (lr, v) in &cal.ladder {
                    println!("calibration lr {lr:.2e}: {}", v.mark());
                }
                cfg.sweep.learning_rates = cal.grid(6);
            }
            let m = run_sweep(&cfg)?;
            print!("{}", m.render());
            print!("{}", m.ordering().render());
            println!("artifacts in {}", cfg.sweep.output_dir.display());
        }
        Cmd::DemoSoftmax(a) => {
            let seed = a.seed.unwrap_or(DEMO_SEED);
            let rows =
                softmax_saturation_demo(&[1.0, 2.0, 5.0, 10.0, 20.0, 40.0], 16, seed, Some(10.0))?;
            println!(
                "{:<8} {:>6} {:>10} {:>9} {:>8}",
                "softmax", "scale", "max_weight", "entropy", "nonzero"
            );
            for r in &rows {
                println!(
                    "{:<8} {:>6} {:>10.4} {:>9.4} {:>8}",
                    format!("{:?}", r.softmax).to_lowercase(),
                    r.magnitude,
                    r.max_weight,
                    r.entropy,
                    r.nonzero_count
                );
            }
            if let Some(dir) = &a.out {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_saturation_csv(&rows, &dir.join(SATURATION_CSV))?;
            }
        }
        Cmd::Report(a) => {
            let dir = match (&a.out, &a.config) {
                (Some(o), _) => o.clone(),
                (None, _) => a.load()?.sweep.output_dir,
            };
            print!("{}", report(&dir)?.text);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
