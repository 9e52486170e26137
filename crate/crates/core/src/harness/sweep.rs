use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stability::{StabilityVariant, VariantKind};
use crate::telemetry::RunVerdict;

use super::run::{run_single, VerdictRow};
use super::RunConfig;

pub const MATRIX_CSV: &str = "matrix.csv";
pub const MATRIX_TXT: &str = "matrix.txt";
pub const VERDICTS_CSV: &str = "verdicts.csv";
pub const PLAN_FILE: &str = "plan.toml";

/// One grid cell. Failures are kept per cell so the sweep can finish.
#[derive(Clone, Debug)]
pub struct Cell {
    pub variant: StabilityVariant,
    pub lr: f32,
    pub run_id: String,
    pub outcome: std::result::Result<RunVerdict, String>,
}

impl Cell {
    pub fn mark(&self) -> &'static str {
        match &self.outcome {
            Ok(v) => v.mark(),
            Err(_) => "err",
        }
    }
}

/// Verdicts for every (variant, learning rate) pair, rows in plan order.
#[derive(Clone, Debug)]
pub struct ConvergenceMatrix {
    pub learning_rates: Vec<f32>,
    pub variants: Vec<StabilityVariant>,
    /// Row-major: `cells[v * learning_rates.len() + l]`.
    pub cells: Vec<Cell>,
}

impl ConvergenceMatrix {
    pub fn cell(&self, variant: usize, lr: usize) -> &Cell {
        &self.cells[variant * self.learning_rates.len() + lr]
    }

    pub fn row(&self, variant: usize) -> &[Cell] {
        let n = self.learning_rates.len();
        &self.cells[variant * n..(variant + 1) * n]
    }

    /// Largest learning rate at which the variant converged.
    pub fn max_converging_lr(&self, variant: usize) -> Option<f32> {
        self.row(variant)
            .iter()
            .filter(|c| matches!(&c.outcome, Ok(v) if !v.is_diverged()))
            .map(|c| c.lr)
            .reduce(f32::max)
    }

    /// Variants whose row converges at some LR above one where it diverged.
    pub fn non_monotone(&self) -> Vec<VariantKind> {
        let mut order: Vec<usize> = (0..self.learning_rates.len()).collect();
        order.sort_by(|&a, &b| self.learning_rates[a].total_cmp(&self.learning_rates[b]));
        (0..self.variants.len())
            .filter(|&v| {
                let mut seen_diverged = false;
                order.iter().any(|&l| match &self.cell(v, l).outcome {
                    Ok(verdict) if verdict.is_diverged() => {
                        seen_diverged = true;
                        false
                    }
                    Ok(_) => seen_diverged,
                    Err(_) => false,
                })
            })
            .map(|v| self.variants[v].kind)
            .collect()
    }

    fn index_of(&self, kind: VariantKind) -> Option<usize> {
        self.variants.iter().position(|v| v.kind == kind)
    }

    /// Checks `baseline ≤ qk_norm ≤ max(qkv_norm, qk_norm_cap)` on the
    /// largest converging learning rates. Variants missing from the grid
    /// make the corresponding comparison unavailable.
    pub fn ordering(&self) -> OrderingReport {
        let lr = |k| self.index_of(k).map(|i| self.max_converging_lr(i));
        let (base, qk, qkv, cap) = (
            lr(VariantKind::Baseline),
            lr(VariantKind::QkNorm),
            lr(VariantKind::QkvNorm),
            lr(VariantKind::QkNormCap),
        );
        let key = |x: Option<f32>| x.unwrap_or(0.0);
        let first = match (base, qk) {
            (Some(b), Some(q)) => Some(key(b) <= key(q)),
            _ => None,
        };
        let best_norm = match (qkv, cap) {
            (None, None) => None,
            (a, b) => Some(key(a.flatten()).max(key(b.flatten()))),
        };
        let second = match (qk, best_norm) {
            (Some(q), Some(n)) => Some(key(q) <= n),
            _ => None,
        };
        OrderingReport {
            baseline: base.flatten(),
            qk_norm: qk.flatten(),
            qkv_norm: qkv.flatten(),
            qk_norm_cap: cap.flatten(),
            baseline_le_qk_norm: first,
            qk_norm_le_best_norm: second,
        }
    }

    /// ✓/x table with one row per variant.
    pub fn render(&self) -> String {
        let mut s = format!("{:<14}", "variant");
        for lr in &self.learning_rates {
            write!(s, " {:>9}", format!("{lr:.1e}")).unwrap();
        }
        s.push('\n');
        for (v, variant) in self.variants.iter().enumerate() {
            write!(s, "{:<14}", variant.kind.name()).unwrap();
            for c in self.row(v) {
                write!(s, " {:>9}", c.mark()).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["variant".to_string()];
        header.extend(self.learning_rates.iter().map(|lr| format!("{lr:e}")));
        w.write_record(&header)?;
        for (v, variant) in self.variants.iter().enumerate() {
            let mut rec = vec![variant.kind.name().to_string()];
            rec.extend(self.row(v).iter().map(|c| c.mark().to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderingReport {
    pub baseline: Option<f32>,
    pub qk_norm: Option<f32>,
    pub qkv_norm: Option<f32>,
    pub qk_norm_cap: Option<f32>,
    pub baseline_le_qk_norm: Option<bool>,
    pub qk_norm_le_best_norm: Option<bool>,
}

impl OrderingReport {
    pub fn holds(&self) -> bool {
        self.baseline_le_qk_norm != Some(false) && self.qk_norm_le_best_norm != Some(false)
    }

    pub fn render(&self) -> String {
        let lr = |x: Option<f32>| x.map_or("none".to_string(), |v| format!("{v:.1e}"));
        let check = |x: Option<bool>| match x {
            Some(true) => "holds",
            Some(false) => "VIOLATED",
            None => "n/a",
        };
        format!(
            "max converging LR: baseline {}, qk_norm {}, qkv_norm {}, qk_norm_cap {}\n\
             baseline <= qk_norm: {}\n\
             qk_norm <= max(qkv_norm, qk_norm_cap): {}\n",
            lr(self.baseline),
            lr(self.qk_norm),
            lr(self.qkv_norm),
            lr(self.qk_norm_cap),
            check(self.baseline_le_qk_norm),
            check(self.qk_norm_le_best_norm),
        )
    }
}

/// Runs every cell of `cfg.sweep` on a pool of `cfg.sweep.parallel` workers
/// and writes the matrix, verdicts and per-run artifacts under the sweep
/// output directory.
pub fn run_sweep(cfg: &RunConfig) -> Result<ConvergenceMatrix> {
    let plan = &cfg.sweep;
    plan.validate()?;
    let out = plan.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    fs::write(out.join(PLAN_FILE), cfg.to_toml()).map_err(|e| Error::io(out.join(PLAN_FILE), e))?;

    let jobs: Vec<RunConfig> = plan
        .variants
        .iter()
        .flat_map(|&v| {
            plan.learning_rates
                .iter()
                .map(move |&lr| cfg.cell(v, lr, plan.steps_per_run, plan.seed))
        })
        .collect();
    let run = |job: &RunConfig| Cell {
        variant: job.model.variant,
        lr: job.run.lr,
        run_id: job.run_id(),
        outcome: run_single(job, &out)
            .map(|o| o.verdict)
            .map_err(|e| e.to_string()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.parallel.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let cells: Vec<Cell> = pool.install(|| jobs.par_iter().map(run).collect());

    let matrix = ConvergenceMatrix {
        learning_rates: plan.learning_rates.clone(),
        variants: plan.variants.clone(),
        cells,
    };
    matrix.write_csv(&out.join(MATRIX_CSV))?;
    let mut w = csv::Writer::from_path(out.join(VERDICTS_CSV))?;
    for (job, cell) in jobs.iter().zip(&matrix.cells) {
        if let Ok(v) = &cell.outcome {
            w.serialize(VerdictRow::new(job, v))?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(out.join(VERDICTS_CSV), e))?;
    let mut text = matrix.render();
    text.push('\n');
    text.push_str(&sweep_notes(&matrix));
    fs::write(out.join(MATRIX_TXT), text).map_err(|e| Error::io(out.join(MATRIX_TXT), e))?;
    Ok(matrix)
}

fn sweep_notes(m: &ConvergenceMatrix) -> String {
    let mut s = String::new();
    let bad = m.non_monotone();
    if bad.is_empty() {
        s.push_str("monotonicity: every row is monotone in LR\n");
    } else {
        let names: Vec<&str> = bad.iter().map(|k| k.name()).collect();
        writeln!(s, "monotonicity: non-monotone rows: {}", names.join(", ")).unwrap();
    }
    for c in m.cells.iter().filter(|c| c.outcome.is_err()) {
        writeln!(
            s,
            "failed cell {}: {}",
            c.run_id,
            c.outcome.as_ref().unwrap_err()
        )
        .unwrap();
    }
    s.push_str(&m.ordering().render());
    s
}

/// Geometric LR ladder on one variant, stopped at the first divergence,
/// followed by a refined grid spanning the last converging and first
/// diverging rungs.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub ladder: Vec<(f32, RunVerdict)>,
    /// `(last converging LR, first diverging LR)`.
    pub edge: Option<(f32, f32)>,
}

impl Calibration {
    /// `n` rates from half the last converging rung to twice the first
    /// diverging one, evenly spaced in log space.
    pub fn grid(&self, n: usize) -> Vec<f32> {
        let Some((lo, hi)) = self.edge else {
            return self.ladder.iter().map(|(lr, _)| *lr).collect();
        };
        let (a, b) = ((lo / 2.0).ln(), (hi * 2.0).ln());
        let n = n.max(2);
        (0..n)
            .map(|i| (a + (b - a) * i as f32 / (n - 1) as f32).exp())
            .map(|lr| format!("{lr:.1e}").parse().unwrap_or(lr))
            .collect()
    }
}

pub fn calibrate(
    cfg: &RunConfig,
    start_lr: f32,
    factor: f32,
    max_lr: f32,
    out_dir: &Path,
) -> Result<Calibration> {
    if !(start_lr > 0.0 && factor > 1.0 && max_lr >= start_lr) {
        return Err(Error::Config(
            "ladder needs start > 0, factor > 1, max >= start".into(),
        ));
    }
    let mut ladder = Vec::new();
    let mut lr = start_lr;
    let mut edge = None;
    while lr <= max_lr * (1.0 + 1e-6) {
        let mut job = cfg.clone();
        job.run.lr = lr;
        let v = run_single(&job, out_dir)?.verdict;
        ladder.push((lr, v));
        if v.is_diverged() {
            edge = ladder
                .iter()
                .rev()
                .find(|(_, v)| !v.is_diverged())
                .map(|&(lo, _)| (lo, lr));
            break;
        }
        lr *= factor;
    }
    Ok(Calibration { ladder, edge })
}

/// Directories directly under `dir` holding a finished run.
pub fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(super::run::VERDICT_FILE).is_file())
        .collect();
    out.sort();
    Ok(out)
}
