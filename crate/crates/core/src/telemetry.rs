//! Per-layer norm telemetry, attention statistics and run classification.
//!
//! For every traced block and each of its four linear layers a
//! [`TelemetryRecord`] holds the L2 norms of the effective weight `W`, the
//! layer input `X`, its output `Y` and the gradient arriving at `X`. Runs are
//! classified by [`DivergenceMonitor`] using three mechanical rules:
//! non-finite loss, smoothed-loss explosion over the best smoothed loss seen,
//! and output-norm explosion over an early baseline.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::LayerKind;
use crate::autograd::Tape;
use crate::block::BlockTrace;
use crate::error::{Error, Result};
use crate::stability::cap_logits;
use crate::tensor::{l2_norm, softmax, Tensor};

/// One CSV row: `run_id,step,block,layer,w_norm,x_norm,y_norm,x_grad_norm,loss,lr,attn_max_weight,attn_entropy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub run_id: String,
    pub step: u64,
    pub block: usize,
    pub layer: LayerKind,
    pub w_norm: f32,
    pub x_norm: f32,
    pub y_norm: f32,
    pub x_grad_norm: f32,
    pub loss: f32,
    pub lr: f32,
    pub attn_max_weight: f32,
    pub attn_entropy: f32,
}

impl TelemetryRecord {
    pub fn has_nonfinite(&self) -> bool {
        ![
            self.w_norm,
            self.x_norm,
            self.y_norm,
            self.x_grad_norm,
            self.loss,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Largest attention weight and mean per-row entropy of `[.., seq, seq]`
/// attention weights. Rows are renormalized before the entropy so that
/// clipped-softmax rows (which need not sum to 1) stay comparable.
pub fn attention_stats(weights: &Tensor) -> (f32, f32) {
    let w = weights.last_dim();
    let mut max = 0.0f32;
    let mut entropy_sum = 0.0f64;
    let mut rows = 0usize;
    for row in weights.data().chunks_exact(w) {
        let total: f64 = row.iter().map(|&p| f64::from(p)).sum();
        let mut h = 0.0;
        for &p in row {
            max = max.max(p);
            if p > 0.0 && total > 0.0 {
                let q = f64::from(p) / total;
                h -= q * q.ln();
            }
        }
        entropy_sum += h;
        rows += 1;
    }
    let entropy = if rows == 0 {
        0.0
    } else {
        entropy_sum / rows as f64
    };
    (max, entropy.max(0.0) as f32)
}

/// Records for one traced block after forward and backward of a step.
pub fn capture(
    tape: &Tape,
    trace: &BlockTrace,
    run_id: &str,
    step: u64,
    loss: f32,
    lr: f32,
) -> Vec<TelemetryRecord> {
    let (attn_max_weight, attn_entropy) = attention_stats(tape.value(trace.attention_weights));
    trace
        .layers
        .iter()
        .map(|layer| TelemetryRecord {
            run_id: run_id.to_string(),
            step,
            block: trace.block,
            layer: layer.kind,
            w_norm: tape.value(layer.weight).l2_norm(),
            x_norm: tape.value(layer.x).l2_norm(),
            y_norm: tape.value(layer.y).l2_norm(),
            x_grad_norm: tape.grad(layer.x).map_or(0.0, |g| l2_norm(g.data())),
            loss,
            lr,
            attn_max_weight,
            attn_entropy,
        })
        .collect()
}

/// Appends telemetry rows to a CSV file with a mandatory header.
pub struct TelemetryWriter {
    inner: csv::Writer<std::fs::File>,
}

impl TelemetryWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner: csv::Writer::from_writer(file),
        })
    }

    pub fn write(&mut self, records: &[TelemetryRecord]) -> Result<()> {
        for r in records {
            self.inner.serialize(r)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner
            .flush()
            .map_err(|e| Error::io("<telemetry csv>", e))
    }
}

pub fn read_telemetry(path: &Path) -> Result<Vec<TelemetryRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    Diverged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceReason {
    NonfiniteLoss,
    LossExplosion,
    NormExplosion,
}

impl fmt::Display for DivergenceReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivergenceReason::NonfiniteLoss => "nonfinite_loss",
            DivergenceReason::LossExplosion => "loss_explosion",
            DivergenceReason::NormExplosion => "norm_explosion",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunVerdict {
    pub status: RunStatus,
    pub divergence_step: Option<u64>,
    pub reason: Option<DivergenceReason>,
}

impl RunVerdict {
    pub fn converged() -> Self {
        Self {
            status: RunStatus::Converged,
            divergence_step: None,
            reason: None,
        }
    }

    pub fn diverged(step: u64, reason: DivergenceReason) -> Self {
        Self {
            status: RunStatus::Diverged,
            divergence_step: Some(step),
            reason: Some(reason),
        }
    }

    pub fn is_diverged(&self) -> bool {
        self.status == RunStatus::Diverged
    }

    /// `✓` for converged, `x` for diverged.
    pub fn mark(&self) -> &'static str {
        match self.status {
            RunStatus::Converged => "✓",
            RunStatus::Diverged => "x",
        }
    }
}

/// Thresholds of the divergence rules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceCriteria {
    /// Trailing-mean window for the loss.
    pub window: usize,
    /// Smoothed loss above `best × explosion_factor` counts as divergence.
    pub explosion_factor: f64,
    /// Output norm above `baseline × norm_factor` counts as divergence.
    pub norm_factor: f64,
    /// Step whose output norms serve as the baseline.
    pub norm_baseline_step: u64,
}

impl Default for DivergenceCriteria {
    fn default() -> Self {
        Self {
            window: 20,
            explosion_factor: 2.0,
            norm_factor: 50.0,
            norm_baseline_step: 100,
        }
    }
}

impl DivergenceCriteria {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || !(self.explosion_factor > 1.0) || !(self.norm_factor > 1.0) {
            return Err(Error::Config(
                "divergence window must be >= 1 and factors > 1".into(),
            ));
        }
        Ok(())
    }
}

/// Online form of [`classify_run`]; the first rule to fire decides.
#[derive(Clone, Debug)]
pub struct DivergenceMonitor {
    criteria: DivergenceCriteria,
    recent: VecDeque<f64>,
    best_smoothed: f64,
    baselines: BTreeMap<(usize, LayerKind), f32>,
    steps_seen: usize,
    verdict: Option<RunVerdict>,
}

impl DivergenceMonitor {
    pub fn new(criteria: DivergenceCriteria) -> Self {
        Self {
            criteria,
            recent: VecDeque::with_capacity(criteria.window + 1),
            best_smoothed: f64::INFINITY,
            baselines: BTreeMap::new(),
            steps_seen: 0,
            verdict: None,
        }
    }

    pub fn verdict(&self) -> Option<RunVerdict> {
        self.verdict
    }

    /// Current trailing mean, once a full window has been seen.
    pub fn smoothed(&self) -> Option<f64> {
        (self.recent.len() == self.criteria.window)
            .then(|| self.recent.iter().sum::<f64>() / self.criteria.window as f64)
    }

    pub fn observe_loss(&mut self, step: u64, loss: f32) -> Option<RunVerdict> {
        if self.verdict.is_some() {
            return self.verdict;
        }
        self.steps_seen += 1;
        if !loss.is_finite() {
            return self.decide(step, DivergenceReason::NonfiniteLoss);
        }
        self.recent.push_back(f64::from(loss));
        if self.recent.len() > self.criteria.window {
            self.recent.pop_front();
        }
        if let Some(s) = self.smoothed() {
            if s > self.best_smoothed * self.criteria.explosion_factor {
                return self.decide(step, DivergenceReason::LossExplosion);
            }
            self.best_smoothed = self.best_smoothed.min(s);
        }
        None
    }

    pub fn observe_records(
        &mut self,
        step: u64,
        records: &[TelemetryRecord],
    ) -> Option<RunVerdict> {
        if self.verdict.is_some() {
            return self.verdict;
        }
        for r in records {
            let key = (r.block, r.layer);
            if let Some(&base) = self.baselines.get(&key) {
                let limit = f64::from(base) * self.criteria.norm_factor;
                if !r.y_norm.is_finite() || f64::from(r.y_norm) > limit {
                    return self.decide(step, DivergenceReason::NormExplosion);
                }
            } else if r.step >= self.criteria.norm_baseline_step {
                self.baselines.insert(key, r.y_norm);
            }
        }
        None
    }

    fn decide(&mut self, step: u64, reason: DivergenceReason) -> Option<RunVerdict> {
        self.verdict = Some(RunVerdict::diverged(step, reason));
        self.verdict
    }

    /// Final verdict at the training horizon.
    pub fn finish(&self) -> Result<RunVerdict> {
        if let Some(v) = self.verdict {
            return Ok(v);
        }
        if self.steps_seen < self.criteria.window {
            return Err(Error::Inconclusive(format!(
                "{} steps observed, need at least {}",
                self.steps_seen, self.criteria.window
            )));
        }
        Ok(RunVerdict::converged())
    }
}

/// Classifies a finished run from its `(step, loss)` history and telemetry.
pub fn classify_run(
    history: &[(u64, f32)],
    records: &[TelemetryRecord],
    criteria: &DivergenceCriteria,
) -> Result<RunVerdict> {
    criteria.validate()?;
    if history.len() < criteria.window {
        return Err(Error::Inconclusive(format!(
            "history of {} steps is shorter than the {}-step window",
            history.len(),
            criteria.window
        )));
    }
    let mut by_step: BTreeMap<u64, Vec<TelemetryRecord>> = BTreeMap::new();
    for r in records {
        by_step.entry(r.step).or_default().push(r.clone());
    }
    let mut monitor = DivergenceMonitor::new(*criteria);
    for &(step, loss) in history {
        if let Some(v) = monitor.observe_loss(step, loss) {
            return Ok(v);
        }
        if let Some(rs) = by_step.get(&step) {
            if let Some(v) = monitor.observe_records(step, rs) {
                return Ok(v);
            }
        }
    }
    monitor.finish()
}

/// Entries at or above this weight count as visibly non-zero.
pub const VISIBLE_WEIGHT: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSoftmax {
    Plain,
    Capped,
}

/// One row of the saturation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationRow {
    pub softmax: DemoSoftmax,
    pub magnitude: f32,
    pub max_weight: f32,
    pub entropy: f32,
    pub nonzero_count: usize,
    /// Full weight vector, `;`-separated, for plotting.
    pub weights: String,
}

/// Softmax statistics of `m · x` for `x ~ U[-0.5, 0.5]^n` (one draw reused
/// for every magnitude). Emits a plain row per magnitude and, when
/// `capping` is given, a capped row as well.
pub fn softmax_saturation_demo(
    magnitudes: &[f32],
    n: usize,
    seed: u64,
    capping: Option<f32>,
) -> Result<Vec<SaturationRow>> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 logits, got {n}")));
    }
    let x = Tensor::uniform([1, n], -0.5, 0.5, seed);
    let mut rows = Vec::new();
    for &m in magnitudes {
        let scaled = x.scale(m);
        let mut push = |kind, probs: Tensor| {
            let (max_weight, entropy) = attention_stats(&probs);
            rows.push(SaturationRow {
                softmax: kind,
                magnitude: m,
                max_weight,
                entropy,
                nonzero_count: probs
                    .data()
                    .iter()
                    .filter(|&&p| p >= VISIBLE_WEIGHT)
                    .count(),
                weights: probs
                    .data()
                    .iter()
                    .map(|p| p.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
            });
        };
        push(DemoSoftmax::Plain, softmax(&scaled));
        if let Some(c) = capping {
            push(DemoSoftmax::Capped, softmax(&cap_logits(&scaled, c)?));
        }
    }
    Ok(rows)
}

/// Outcome of the three saturation checks for one draw of 16 logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaturationCheck {
    pub seed: u64,
    /// Plain softmax at ×40 is close to one-hot (max weight > 0.99).
    pub one_hot_at_40: bool,
    /// Plain softmax at ×1 keeps entropy within 5% of ln 16.
    pub flat_at_1: bool,
    /// Capping at 10 turns ×40 into something within 10% of plain ×10
    /// on both entropy and max weight.
    pub capped_matches_10: bool,
}

impl SaturationCheck {
    pub fn all(&self) -> bool {
        self.one_hot_at_40 && self.flat_at_1 && self.capped_matches_10
    }
}

/// Fixed draw used by the saturation demo and its checks.
pub const DEMO_SEED: u64 = 42;

pub fn saturation_check(seed: u64) -> Result<SaturationCheck> {
    let n = 16;
    let rows = softmax_saturation_demo(&[1.0, 10.0, 40.0], n, seed, Some(10.0))?;
    let pick = |kind: DemoSoftmax, m: f32| {
        rows.iter()
            .find(|r| r.softmax == kind && r.magnitude == m)
            .expect("magnitude present in demo")
    };
    let near = |a: f32, b: f32| (a - b).abs() <= 0.1 * b.abs();
    let (p1, p10, p40) = (
        pick(DemoSoftmax::Plain, 1.0),
        pick(DemoSoftmax::Plain, 10.0),
        pick(DemoSoftmax::Plain, 40.0),
    );
    let c40 = pick(DemoSoftmax::Capped, 40.0);
    let ln_n = (n as f32).ln();
    Ok(SaturationCheck {
        seed,
        one_hot_at_40: p40.max_weight > 0.99,
        flat_at_1: (p1.entropy - ln_n).abs() <= 0.05 * ln_n,
        capped_matches_10: near(c40.entropy, p10.entropy) && near(c40.max_weight, p10.max_weight),
    })
}

pub fn write_saturation_csv(rows: &[SaturationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn losses(values: &[f32]) -> Vec<(u64, f32)> {
        values
            .iter()
            .enumerate()
            .map(|(i, &l)| (i as u64, l))
            .collect()
    }

    #[test]
    fn nan_loss_is_nonfinite_divergence() {
        let mut h: Vec<f32> = vec![3.0; 500];
        h[412] = f32::NAN;
        let v = classify_run(&losses(&h), &[], &DivergenceCriteria::default()).unwrap();
        assert_eq!(
            v,
            RunVerdict::diverged(412, DivergenceReason::NonfiniteLoss)
        );
    }

    #[test]
    fn decreasing_loss_converges() {
        let h: Vec<f32> = (0..300).map(|i| 4.0 - i as f32 * 0.01).collect();
        let v = classify_run(&losses(&h), &[], &DivergenceCriteria::default()).unwrap();
        assert_eq!(v, RunVerdict::converged());
    }

    #[test]
    fn short_history_is_inconclusive() {
        let h = losses(&[1.0; 5]);
        assert!(matches!(
            classify_run(&h, &[], &DivergenceCriteria::default()),
            Err(Error::Inconclusive(_))
        ));
    }

    #[test]
    fn injected_ramp_fires_at_first_exceeding_window() {
        // 2.0 → 1.0 over 40 steps, flat at 1.0 for 30, then up to 5.0 over 40.
        let mut h: Vec<f32> = (0..40).map(|i| 2.0 - i as f32 / 39.0).collect();
        h.extend(std::iter::repeat_n(1.0, 30));
        h.extend((1..=40).map(|i| 1.0 + 4.0 * i as f32 / 40.0));
        // Independent oracle: scan trailing means directly.
        let mut best = f64::INFINITY;
        let mut expected = None;
        for end in 20..=h.len() {
            let mean = h[end - 20..end].iter().map(|&v| f64::from(v)).sum::<f64>() / 20.0;
            if mean > 2.0 * best {
                expected = Some((end - 1) as u64);
                break;
            }
            best = best.min(mean);
        }
        let v = classify_run(&losses(&h), &[], &DivergenceCriteria::default()).unwrap();
        assert_eq!(v.reason, Some(DivergenceReason::LossExplosion));
        assert_eq!(v.divergence_step, expected);
        assert!(expected.is_some());
    }

    #[test]
    fn norm_explosion_uses_baseline_step() {
        let crit = DivergenceCriteria {
            norm_baseline_step: 2,
            ..DivergenceCriteria::default()
        };
        let rec = |step, y| TelemetryRecord {
            run_id: "r".into(),
            step,
            block: 1,
            layer: LayerKind::Qkv,
            w_norm: 1.0,
            x_norm: 1.0,
            y_norm: y,
            x_grad_norm: 1.0,
            loss: 1.0,
            lr: 0.1,
            attn_max_weight: 0.5,
            attn_entropy: 0.5,
        };
        let records: Vec<_> = (0..30)
            .map(|s| rec(s, if s >= 25 { 60.0 } else { 1.0 }))
            .collect();
        let h = losses(&[1.0; 30]);
        let v = classify_run(&h, &records, &crit).unwrap();
        assert_eq!(v, RunVerdict::diverged(25, DivergenceReason::NormExplosion));
    }

    #[test]
    fn attention_stats_bounds() {
        let uniform = Tensor::full([2, 4], 0.25);
        let (m, h) = attention_stats(&uniform);
        assert_eq!(m, 0.25);
        assert!((h - 4f32.ln()).abs() < 1e-6);
        let onehot = Tensor::new([1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(attention_stats(&onehot), (1.0, 0.0));
    }

    #[test]
    fn saturation_demo_shapes() {
        let rows = softmax_saturation_demo(&[1.0, 10.0, 40.0], 16, 0, Some(10.0)).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[0].entropy > rows[2].entropy && rows[2].entropy > rows[4].entropy);
        assert!(softmax_saturation_demo(&[1.0], 1, 0, None).is_err());
    }
}
