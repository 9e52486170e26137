use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BatchSource, Split};
use crate::error::{Error, Result};
use crate::model::{ForwardPass, Model};
use crate::optim::{clip_global_norm, AdamW, LrSchedule};
use crate::telemetry::{
    capture, DivergenceMonitor, DivergenceReason, RunStatus, RunVerdict, TelemetryRecord,
    TelemetryWriter,
};

use super::RunConfig;

pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const VERDICT_FILE: &str = "verdict.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Verdict CSV row: `run_id,variant,lr,status,divergence_step,reason`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub run_id: String,
    pub variant: String,
    pub lr: f32,
    pub status: RunStatus,
    pub divergence_step: Option<u64>,
    pub reason: Option<DivergenceReason>,
}

impl VerdictRow {
    pub fn new(cfg: &RunConfig, verdict: &RunVerdict) -> Self {
        Self {
            run_id: cfg.run_id(),
            variant: cfg.model.variant.kind.to_string(),
            lr: cfg.run.lr,
            status: verdict.status,
            divergence_step: verdict.divergence_step,
            reason: verdict.reason,
        }
    }

    pub fn verdict(&self) -> RunVerdict {
        RunVerdict {
            status: self.status,
            divergence_step: self.divergence_step,
            reason: self.reason,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f32,
    pub lr: f32,
    pub grad_norm: f32,
}

/// Result of [`run_single`].
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub run_id: String,
    pub verdict: RunVerdict,
    pub run_dir: PathBuf,
    pub telemetry_path: PathBuf,
    /// Training loss per completed step.
    pub history: Vec<LossRow>,
    /// Mean validation loss at the end, for runs that stayed finite.
    pub val_loss: Option<f32>,
    pub steps_run: u64,
}

/// Mean loss over the first `batches` validation batches.
pub fn evaluate(model: &Model, source: &BatchSource, batches: u64) -> Result<f32> {
    if batches == 0 {
        return Err(Error::Config("need at least one evaluation batch".into()));
    }
    let mut total = 0.0f64;
    for i in 0..batches {
        let (loss, _) = model.forward_loss(&source.batch_at(Split::Val, i))?;
        total += f64::from(loss);
    }
    Ok((total / batches as f64) as f32)
}

/// Everything produced by one optimizer step.
pub struct StepResult {
    pub step: u64,
    pub loss: f32,
    pub lr: f32,
    /// Pre-clip global gradient norm; NaN when no gradient was taken.
    pub grad_norm: f32,
    /// Telemetry of the traced blocks (empty off-stride or on a non-finite loss).
    pub records: Vec<TelemetryRecord>,
    /// The recorded forward and backward pass, from before the update.
    pub pass: ForwardPass,
    /// The gradients were non-finite and the update was skipped.
    pub nonfinite_grad: bool,
}

/// Step-by-step training of one configuration.
///
/// Steps are numbered from 0 and step `i` trains on `batch_at(Train, i)`,
/// so a run is a pure function of its config.
pub struct Trainer {
    cfg: RunConfig,
    run_id: String,
    model: Model,
    source: BatchSource,
    opt: AdamW,
    schedule: LrSchedule,
    traced: Vec<usize>,
    next: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(&cfg.model)?;
        let source = BatchSource::new(&cfg.data, cfg.model.vocab_size, cfg.model.seq_len)?;
        let opt = AdamW::new(cfg.optimizer, model.params())?;
        let schedule = LrSchedule::with_defaults(cfg.run.lr, cfg.run.steps.max(1))?;
        Ok(Self {
            cfg: cfg.clone(),
            run_id: cfg.run_id(),
            model,
            source,
            opt,
            schedule,
            traced: cfg.traced_blocks(),
            next: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn source(&self) -> &BatchSource {
        &self.source
    }

    pub fn step(&mut self) -> Result<StepResult> {
        let step = self.next;
        self.next += 1;
        let lr = self.schedule.lr_at(step);
        let run = &self.cfg.run;
        self.model
            .refresh_spectral(run.spectral_iters, run.spectral_tol)?;
        let mut pass = self
            .model
            .forward(&self.source.batch_at(Split::Train, step))?;
        let loss = pass.loss();
        let mut records = Vec::new();
        let mut grad_norm = f32::NAN;
        let mut nonfinite_grad = false;
        if loss.is_finite() {
            pass.backward()?;
            if step.is_multiple_of(run.telemetry_stride) {
                for &b in &self.traced {
                    records.extend(capture(
                        &pass.tape,
                        &pass.traces[b],
                        &self.run_id,
                        step,
                        loss,
                        lr,
                    ));
                }
            }
            let mut grads = pass.grads();
            match clip_global_norm(&mut grads, self.cfg.optimizer.clip_norm) {
                Ok(n) => {
                    grad_norm = n;
                    self.opt.step(self.model.params_mut(), &grads, lr)?;
                }
                Err(Error::NonFinite(_)) => nonfinite_grad = true,
                Err(e) => return Err(e),
            }
        }
        Ok(StepResult {
            step,
            loss,
            lr,
            grad_norm,
            records,
            pass,
            nonfinite_grad,
        })
    }
}

/// Trains one configuration under `out_dir/<run_id>/`, writing the resolved
/// config, per-step loss, telemetry and the verdict.
pub fn run_single(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    if cfg.run.steps == 0 {
        return Err(Error::Inconclusive(
            "a run of 0 steps cannot be classified".into(),
        ));
    }
    let run_id = cfg.run_id();
    let run_dir = out_dir.join(&run_id);
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let config_path = run_dir.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(config_path, e))?;

    let mut trainer = Trainer::new(cfg)?;
    let telemetry_path = run_dir.join(TELEMETRY_FILE);
    let mut telemetry = TelemetryWriter::create(&telemetry_path)?;
    let mut monitor = DivergenceMonitor::new(cfg.divergence);
    let mut history = Vec::with_capacity(cfg.run.steps as usize);
    let mut verdict = None;

    for _ in 0..cfg.run.steps {
        let r = trainer.step()?;
        telemetry.write(&r.records)?;
        let fired = monitor
            .observe_loss(r.step, r.loss)
            .or_else(|| monitor.observe_records(r.step, &r.records));
        if let Some(v) = fired {
            verdict.get_or_insert(v);
        }
        if r.nonfinite_grad {
            verdict.get_or_insert(RunVerdict::diverged(
                r.step,
                DivergenceReason::NonfiniteLoss,
            ));
        }
        history.push(LossRow {
            step: r.step,
            loss: r.loss,
            lr: r.lr,
            grad_norm: r.grad_norm,
        });
        // Nothing left to train on once the loss is gone.
        if (verdict.is_some() && cfg.run.early_abort) || !r.loss.is_finite() {
            break;
        }
    }
    telemetry.finish()?;
    let steps_run = history.len() as u64;

    let verdict = match verdict {
        Some(v) => v,
        None => monitor.finish()?,
    };
    let val_loss = if verdict.status == RunStatus::Converged && cfg.run.eval_batches > 0 {
        Some(evaluate(
            trainer.model(),
            trainer.source(),
            cfg.run.eval_batches,
        )?)
    } else {
        None
    };

    write_rows(&run_dir.join(LOSS_FILE), &history)?;
    write_rows(
        &run_dir.join(VERDICT_FILE),
        &[VerdictRow::new(cfg, &verdict)],
    )?;

    Ok(RunOutcome {
        run_id,
        verdict,
        run_dir,
        telemetry_path,
        history,
        val_loss,
        steps_run,
    })
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_verdict(run_dir: &Path) -> Result<VerdictRow> {
    let path = run_dir.join(VERDICT_FILE);
    let mut rdr = csv::Reader::from_path(&path)?;
    rdr.deserialize()
        .next()
        .ok_or_else(|| Error::Input(format!("{} has no verdict row", path.display())))?
        .map_err(Error::from)
}

pub fn read_losses(run_dir: &Path) -> Result<Vec<LossRow>> {
    let mut rdr = csv::Reader::from_path(run_dir.join(LOSS_FILE))?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
