use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::LayerKind;
use crate::error::{Error, Result};
use crate::telemetry::{read_telemetry, SaturationRow, TelemetryRecord};

use super::run::{read_verdict, VerdictRow, CONFIG_FILE, TELEMETRY_FILE};
use super::sweep::{run_dirs, PLAN_FILE};
use super::RunConfig;

pub const REPORT_TXT: &str = "report.txt";
pub const REPORT_RUNS_CSV: &str = "report_runs.csv";
pub const NORM_GROWTH_CSV: &str = "norm_growth.csv";
pub const SATURATION_CSV: &str = "saturation.csv";
pub const NO_RUNS: &str = "no runs";

/// Layers whose output norms are compared between a diverged and a
/// converged run.
pub const GROWTH_LAYERS: [LayerKind; 3] = [LayerKind::Qkv, LayerKind::Proj, LayerKind::Fc2];

/// Output-norm ratio of one layer between two runs at a matched step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormGrowth {
    pub diverged_run: String,
    pub converged_run: String,
    pub block: usize,
    pub layer: LayerKind,
    pub step: u64,
    pub diverged_y_norm: f32,
    pub converged_y_norm: f32,
    pub ratio: f32,
}

/// QKV/Proj/FC2 output-norm ratios at `step`, or at the latest step before
/// it that both runs recorded.
pub fn norm_growth(
    diverged: &[TelemetryRecord],
    converged: &[TelemetryRecord],
    step: u64,
) -> Vec<NormGrowth> {
    let index = |rs: &[TelemetryRecord]| -> BTreeMap<(u64, usize, LayerKind), (String, f32)> {
        rs.iter()
            .map(|r| ((r.step, r.block, r.layer), (r.run_id.clone(), r.y_norm)))
            .collect()
    };
    let (d, c) = (index(diverged), index(converged));
    let matched = d
        .keys()
        .filter(|k| k.0 <= step && c.contains_key(k))
        .map(|k| k.0)
        .max();
    let Some(at) = matched else {
        return Vec::new();
    };
    d.iter()
        .filter(|(k, _)| k.0 == at && GROWTH_LAYERS.contains(&k.2))
        .filter_map(|(k, (drun, dy))| {
            let (crun, cy) = c.get(k)?;
            Some(NormGrowth {
                diverged_run: drun.clone(),
                converged_run: crun.clone(),
                block: k.1,
                layer: k.2,
                step: at,
                diverged_y_norm: *dy,
                converged_y_norm: *cy,
                ratio: dy / cy,
            })
        })
        .collect()
}

/// Summary assembled by [`report`].
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub runs: Vec<VerdictRow>,
    pub growth: Vec<NormGrowth>,
    /// Planned cells with no finished run.
    pub incomplete: Vec<String>,
    pub text: String,
}

struct RunInfo {
    dir: std::path::PathBuf,
    verdict: VerdictRow,
    seed: u64,
}

/// Collects every finished run under `output_dir` into `report.txt`,
/// `report_runs.csv` and `norm_growth.csv`.
pub fn report(output_dir: &Path) -> Result<Report> {
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut runs = Vec::new();
    for dir in run_dirs(output_dir)? {
        let verdict = read_verdict(&dir)?;
        let seed = RunConfig::load(&dir.join(CONFIG_FILE)).map_or(0, |c| c.model.seed);
        runs.push(RunInfo { dir, verdict, seed });
    }

    let mut text = String::new();
    let mut rep = Report::default();
    if runs.is_empty() {
        writeln!(text, "runs: 0 ({NO_RUNS})").unwrap();
    } else {
        writeln!(text, "runs: {}", runs.len()).unwrap();
        text.push('\n');
        text.push_str(&convergence_table(&runs));
    }

    if let Ok(plan) = RunConfig::load(&output_dir.join(PLAN_FILE)) {
        let done: BTreeSet<String> = runs.iter().map(|r| r.verdict.run_id.clone()).collect();
        for &v in &plan.sweep.variants {
            for &lr in &plan.sweep.learning_rates {
                let id = plan
                    .cell(v, lr, plan.sweep.steps_per_run, plan.sweep.seed)
                    .run_id();
                if !done.contains(&id) {
                    rep.incomplete.push(id);
                }
            }
        }
        if !rep.incomplete.is_empty() {
            writeln!(text, "\nincomplete cells: {}", rep.incomplete.join(", ")).unwrap();
        }
    }

    let diverged: Vec<&RunInfo> = runs
        .iter()
        .filter(|r| r.verdict.divergence_step.is_some())
        .collect();
    if !diverged.is_empty() {
        text.push_str("\ndiverged runs:\n");
        for r in &diverged {
            writeln!(
                text,
                "  {:<36} step {:>6}  {}",
                r.verdict.run_id,
                r.verdict.divergence_step.unwrap_or(0),
                r.verdict
                    .reason
                    .map_or("unknown".to_string(), |x| x.to_string())
            )
            .unwrap();
        }
    }

    for d in &diverged {
        let partner = runs
            .iter()
            .filter(|c| {
                c.verdict.divergence_step.is_none()
                    && c.verdict.variant == d.verdict.variant
                    && c.seed == d.seed
            })
            .max_by(|a, b| a.verdict.lr.total_cmp(&b.verdict.lr));
        let Some(c) = partner else { continue };
        let dt = read_telemetry(&d.dir.join(TELEMETRY_FILE))?;
        let ct = read_telemetry(&c.dir.join(TELEMETRY_FILE))?;
        rep.growth.extend(norm_growth(
            &dt,
            &ct,
            d.verdict.divergence_step.unwrap_or(0),
        ));
    }
    if !rep.growth.is_empty() {
        text.push_str("\nnorm growth at divergence (diverged / converged y_norm):\n");
        for g in &rep.growth {
            writeln!(
                text,
                "  {:<36} vs {:<36} block {} {:<4} step {:>6}  {:>8.3}x",
                g.diverged_run,
                g.converged_run,
                g.block,
                g.layer.to_string(),
                g.step,
                g.ratio
            )
            .unwrap();
        }
    }

    let sat = output_dir.join(SATURATION_CSV);
    if sat.is_file() {
        let mut rdr = csv::Reader::from_path(&sat)?;
        let rows: Vec<SaturationRow> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        text.push_str("\nsoftmax saturation:\n");
        writeln!(
            text,
            "  {:<8} {:>6} {:>10} {:>9} {:>8}",
            "softmax", "scale", "max_weight", "entropy", "nonzero"
        )
        .unwrap();
        for r in rows {
            writeln!(
                text,
                "  {:<8} {:>6} {:>10.4} {:>9.4} {:>8}",
                format!("{:?}", r.softmax).to_lowercase(),
                r.magnitude,
                r.max_weight,
                r.entropy,
                r.nonzero_count
            )
            .unwrap();
        }
    }

    write_rows(
        &output_dir.join(REPORT_RUNS_CSV),
        runs.iter().map(|r| &r.verdict),
    )?;
    write_rows(&output_dir.join(NORM_GROWTH_CSV), &rep.growth)?;

    let path = output_dir.join(REPORT_TXT);
    fs::write(&path, &text).map_err(|e| Error::io(path, e))?;
    rep.runs = runs.into_iter().map(|r| r.verdict).collect();
    rep.text = text;
    Ok(rep)
}

fn convergence_table(runs: &[RunInfo]) -> String {
    let lrs: BTreeSet<u32> = runs.iter().map(|r| r.verdict.lr.to_bits()).collect();
    let mut lrs: Vec<f32> = lrs.into_iter().map(f32::from_bits).collect();
    lrs.sort_by(f32::total_cmp);
    let mut rows: BTreeMap<&str, BTreeMap<u32, &VerdictRow>> = BTreeMap::new();
    for r in runs {
        rows.entry(&r.verdict.variant)
            .or_default()
            .insert(r.verdict.lr.to_bits(), &r.verdict);
    }
    let mut s = format!("{:<14}", "variant");
    for lr in &lrs {
        write!(s, " {:>9}", format!("{lr:.1e}")).unwrap();
    }
    s.push('\n');
    for (variant, cells) in rows {
        write!(s, "{variant:<14}").unwrap();
        for lr in &lrs {
            let mark = cells.get(&lr.to_bits()).map_or("-", |v| v.verdict().mark());
            write!(s, " {mark:>9}").unwrap();
        }
        s.push('\n');
    }
    s
}

fn write_rows<'a, T: Serialize + 'a>(
    path: &Path,
    rows: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
