use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::stability::{StabilityVariant, VariantKind};
use crate::telemetry::DivergenceCriteria;

/// Complete description of a run or a sweep, loadable from TOML.
///
/// Every section and every field has a default, so an empty file is a valid
/// config. See `configs/desk.toml` for the full schema.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub divergence: DivergenceCriteria,
    pub run: RunOptions,
    pub sweep: SweepPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Peak learning rate of the warmup-cosine schedule.
    pub lr: f32,
    pub steps: u64,
    /// Blocks whose linear layers are traced.
    pub telemetry_blocks: Vec<usize>,
    /// Trace every block, overriding `telemetry_blocks`.
    pub telemetry_all_blocks: bool,
    /// Capture telemetry every `telemetry_stride` steps.
    pub telemetry_stride: u64,
    /// Stop as soon as a divergence rule fires.
    pub early_abort: bool,
    /// Validation batches evaluated at the end of a converged run.
    pub eval_batches: u64,
    pub spectral_iters: usize,
    pub spectral_tol: f32,
    pub output_dir: PathBuf,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 1500,
            telemetry_blocks: vec![1],
            telemetry_all_blocks: false,
            telemetry_stride: 1,
            early_abort: true,
            eval_batches: 8,
            spectral_iters: 16,
            spectral_tol: 1e-5,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Learning-rate × variant grid; every cell shares the model seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepPlan {
    /// Empty means: calibrate a grid on the baseline first.
    pub learning_rates: Vec<f32>,
    /// Variant names or full variant tables.
    #[serde(deserialize_with = "variants_from_names_or_tables")]
    pub variants: Vec<StabilityVariant>,
    pub steps_per_run: u64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub parallel: usize,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            learning_rates: Vec::new(),
            variants: StabilityVariant::all(),
            steps_per_run: 1500,
            seed: 0,
            output_dir: PathBuf::from("sweep"),
            parallel: 1,
        }
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.variants.is_empty() {
            return Err(Error::Config(
                "sweep grid needs at least one LR and one variant".into(),
            ));
        }
        if let Some(lr) = self
            .learning_rates
            .iter()
            .find(|lr| !(**lr > 0.0 && lr.is_finite()))
        {
            return Err(Error::Config(format!("learning rate {lr} is not positive")));
        }
        self.variants
            .iter()
            .try_for_each(StabilityVariant::validate)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum VariantEntry {
    Name(String),
    Table(StabilityVariant),
}

fn variants_from_names_or_tables<'de, D>(
    de: D,
) -> std::result::Result<Vec<StabilityVariant>, D::Error>
where
    D: Deserializer<'de>,
{
    Vec::<VariantEntry>::deserialize(de)?
        .into_iter()
        .map(|e| match e {
            VariantEntry::Name(n) => n
                .parse::<VariantKind>()
                .map(StabilityVariant::new)
                .map_err(serde::de::Error::custom),
            VariantEntry::Table(v) => Ok(v),
        })
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    /// Desk-scale settings used by the examples and the acceptance suite.
    pub fn desk() -> Self {
        let mut cfg = Self {
            model: ModelConfig::tiny(StabilityVariant::default()),
            ..Self::default()
        };
        cfg.run.steps = 300;
        cfg.sweep.steps_per_run = 300;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        self.divergence.validate()?;
        let r = &self.run;
        if !(r.lr > 0.0 && r.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", r.lr)));
        }
        if r.telemetry_stride == 0 {
            return Err(Error::Config("telemetry_stride must be >= 1".into()));
        }
        if r.spectral_iters == 0 || !(r.spectral_tol >= 0.0) {
            return Err(Error::Config(
                "spectral_iters must be >= 1 and tol >= 0".into(),
            ));
        }
        if let Some(b) = self
            .traced_blocks()
            .iter()
            .find(|&&b| b >= self.model.layers)
        {
            return Err(Error::Config(format!(
                "telemetry block {b} out of range for {} layers",
                self.model.layers
            )));
        }
        Ok(())
    }

    pub fn traced_blocks(&self) -> Vec<usize> {
        if self.run.telemetry_all_blocks {
            (0..self.model.layers).collect()
        } else {
            self.run.telemetry_blocks.clone()
        }
    }

    /// Copy with the variant, learning rate, step count and seed replaced.
    pub fn cell(&self, variant: StabilityVariant, lr: f32, steps: u64, seed: u64) -> Self {
        let mut c = self.clone();
        c.model.variant = variant;
        c.model.seed = seed;
        c.run.lr = lr;
        c.run.steps = steps;
        c
    }

    /// Stable identifier derived from variant, learning rate and seed.
    pub fn run_id(&self) -> String {
        format!(
            "{}_lr{:e}_s{}",
            self.model.variant.kind, self.run.lr, self.model.seed
        )
    }
}
