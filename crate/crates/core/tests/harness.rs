use std::fs;
use std::process::Command;

use stablelab::harness::{
    report, run_single, run_sweep, RunConfig, NO_RUNS, TELEMETRY_FILE, VERDICT_FILE,
};
use stablelab::{Error, StabilityVariant, VariantKind};

const DIVERGING_LR: f32 = 30.0;

fn quick(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.run.steps = steps;
    cfg.sweep.steps_per_run = steps;
    cfg
}

#[test]
fn shipped_config_matches_desk_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/desk.toml");
    assert_eq!(RunConfig::load(path.as_ref()).unwrap(), RunConfig::desk());
}

#[test]
fn zero_steps_is_inconclusive() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_single(&quick(0), dir.path()).unwrap_err();
    assert!(matches!(err, Error::Inconclusive(_)), "{err}");
}

#[test]
fn repeated_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(40);
    cfg.model.variant = StabilityVariant::new(VariantKind::SigmaReparam);
    let a = run_single(&cfg, &dir.path().join("a")).unwrap();
    let b = run_single(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(a.verdict, b.verdict);
    assert_eq!(
        fs::read(&a.telemetry_path).unwrap(),
        fs::read(&b.telemetry_path).unwrap()
    );
}

#[test]
fn early_abort_keeps_the_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(80);
    cfg.run.lr = DIVERGING_LR;
    let short = run_single(&cfg, &dir.path().join("short")).unwrap();
    cfg.run.early_abort = false;
    let full = run_single(&cfg, &dir.path().join("full")).unwrap();
    assert!(short.verdict.is_diverged());
    assert_eq!(short.verdict, full.verdict);
    assert!(short.steps_run < full.steps_run);
}

#[test]
fn one_cell_sweep_equals_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(30);
    cfg.sweep.learning_rates = vec![2e-3];
    cfg.sweep.variants = vec![StabilityVariant::new(VariantKind::QkNorm)];
    cfg.sweep.output_dir = dir.path().join("sweep");
    let m = run_sweep(&cfg).unwrap();
    let single = run_single(
        &cfg.cell(cfg.sweep.variants[0], 2e-3, 30, cfg.sweep.seed),
        &dir.path().join("single"),
    )
    .unwrap();
    assert_eq!(m.cells.len(), 1);
    assert_eq!(m.cells[0].outcome.as_ref().unwrap(), &single.verdict);
}

#[test]
fn sweep_cells_do_not_depend_on_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(60);
    let variants = [
        VariantKind::Baseline,
        VariantKind::SoftCap,
        VariantKind::QkvNorm,
    ];
    cfg.sweep.learning_rates = vec![1e-3, DIVERGING_LR];
    cfg.sweep.variants = variants.iter().map(|&k| StabilityVariant::new(k)).collect();
    cfg.sweep.output_dir = dir.path().join("fwd");
    cfg.sweep.parallel = 2;
    let fwd = run_sweep(&cfg).unwrap();
    cfg.sweep.learning_rates.reverse();
    cfg.sweep.variants.reverse();
    cfg.sweep.output_dir = dir.path().join("rev");
    let rev = run_sweep(&cfg).unwrap();
    for c in &fwd.cells {
        let twin = rev.cells.iter().find(|d| d.run_id == c.run_id).unwrap();
        assert_eq!(c.outcome, twin.outcome, "{}", c.run_id);
        let (a, b) = (dir.path().join("fwd"), dir.path().join("rev"));
        assert_eq!(
            fs::read(a.join(&c.run_id).join(TELEMETRY_FILE)).unwrap(),
            fs::read(b.join(&c.run_id).join(TELEMETRY_FILE)).unwrap()
        );
    }
    assert!(fwd.cells.iter().any(|c| c.mark() == "x"));
    assert!(fwd.cells.iter().any(|c| c.mark() == "✓"));
}

#[test]
fn report_on_empty_directory_says_no_runs() {
    let dir = tempfile::tempdir().unwrap();
    let rep = report(dir.path()).unwrap();
    assert!(rep.runs.is_empty());
    assert!(rep.text.contains(NO_RUNS));
}

#[test]
fn report_lists_divergence_and_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(60);
    cfg.sweep.learning_rates = vec![1e-3, DIVERGING_LR];
    cfg.sweep.variants = vec![StabilityVariant::default()];
    cfg.sweep.output_dir = dir.path().to_path_buf();
    let m = run_sweep(&cfg).unwrap();
    let diverged = m.cells.iter().find(|c| c.lr == DIVERGING_LR).unwrap();
    let v = diverged.outcome.as_ref().unwrap();
    let step = v.divergence_step.unwrap();

    let rep = report(dir.path()).unwrap();
    assert_eq!(rep.runs.len(), 2);
    let line = rep
        .text
        .lines()
        .find(|l| l.contains(&diverged.run_id))
        .unwrap();
    assert!(
        line.contains(&step.to_string()) && line.contains(&v.reason.unwrap().to_string()),
        "{line}"
    );
    assert!(!rep.growth.is_empty());

    fs::remove_file(dir.path().join(&diverged.run_id).join(VERDICT_FILE)).unwrap();
    let rep = report(dir.path()).unwrap();
    assert_eq!(rep.incomplete, vec![diverged.run_id.clone()]);
}

#[test]
fn cli_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_stablelab");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = Command::new(bin)
        .args([
            "sweep",
            "--variant",
            "baseline",
            "--lr",
            "1e-3,30",
            "--steps",
            "60",
            "--out",
            out,
        ])
        .output()
        .unwrap();
    assert!(
        ok.status.success(),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );
    let text = String::from_utf8_lossy(&ok.stdout);
    let row = text.lines().find(|l| l.starts_with("baseline")).unwrap();
    let marks: Vec<&str> = row.split_whitespace().skip(1).collect();
    assert_eq!(marks, ["✓", "x"], "{text}");

    let bad = Command::new(bin)
        .args(["run", "--variant", "nope"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    let bad = Command::new(bin)
        .args(["run", "--steps", "0", "--out", out])
        .output()
        .unwrap();
    assert!(!bad.status.success());

    let rep = Command::new(bin)
        .args(["report", "--out", out])
        .output()
        .unwrap();
    assert!(rep.status.success());
    assert!(String::from_utf8_lossy(&rep.stdout).contains("runs: 2"));

    let demo = Command::new(bin)
        .args(["demo-softmax", "--out", out])
        .output()
        .unwrap();
    assert!(demo.status.success());
    assert!(dir.path().join("saturation.csv").is_file());
}
