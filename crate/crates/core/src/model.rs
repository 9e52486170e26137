//! Tiny causal language model: token embedding, a stack of transformer
//! blocks, final layer norm and an untied output projection.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::LayerNormParams;
use crate::autograd::{Tape, Var};
use crate::block::{assemble_block, BlockTrace, TransformerBlock};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamSet};
use crate::stability::{LnSite, StabilityVariant};
use crate::tensor::{PowerIteration, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// FC1 width as a multiple of `hidden`.
    pub ff_mult: usize,
    pub rope_base: f32,
    pub ln_eps: f32,
    pub init_std: f32,
    pub variant: StabilityVariant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            seq_len: 128,
            hidden: 128,
            layers: 4,
            heads: 4,
            ff_mult: 4,
            rope_base: 10_000.0,
            ln_eps: 1e-5,
            init_std: 0.02,
            variant: StabilityVariant::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small shape used by tests and quick experiments.
    pub fn tiny(variant: StabilityVariant) -> Self {
        Self {
            vocab_size: 64,
            seq_len: 16,
            hidden: 32,
            layers: 2,
            heads: 2,
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.seq_len < 2 {
            return bad(format!("seq_len must be >= 2, got {}", self.seq_len));
        }
        if self.layers == 0 || self.ff_mult == 0 {
            return bad("layers and ff_mult must be positive".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if !(self.hidden / self.heads).is_multiple_of(2) || self.hidden / self.heads < 2 {
            return bad(format!(
                "head dim {} must be even and >= 2",
                self.hidden / self.heads
            ));
        }
        if !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) || !(self.rope_base > 0.0) {
            return bad("ln_eps, rope_base must be > 0 and init_std >= 0".into());
        }
        self.variant.validate()
    }
}

/// Everything recorded by one forward pass; `backward` fills gradients in.
pub struct ForwardPass {
    pub tape: Tape,
    pub vars: Bindings,
    pub loss: Var,
    pub logits: Var,
    pub traces: Vec<BlockTrace>,
}

impl ForwardPass {
    pub fn loss(&self) -> f32 {
        self.tape.scalar(self.loss)
    }

    pub fn backward(&mut self) -> Result<()> {
        self.tape.backward(self.loss)
    }

    pub fn grads(&self) -> Vec<Tensor> {
        self.vars.grads(&self.tape)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamSet,
    embedding: ParamId,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNormParams,
    head: ParamId,
}

impl Model {
    /// Deterministic initialization from `cfg.seed`: N(0, σ) for embedding,
    /// QKV, FC1 and the head; N(0, σ/√(2·layers)) for Proj and FC2; unit
    /// gains and zero biases for every layer norm.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let embedding = params.add(
            "embedding.weight",
            Tensor::randn([cfg.vocab_size, cfg.hidden], cfg.init_std, &mut rng),
            true,
        );
        let blocks = (0..cfg.layers)
            .map(|i| assemble_block(i, cfg, &mut params, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNormParams::new("", LnSite::Final, cfg.hidden, &mut params);
        let head = params.add(
            "head.weight",
            Tensor::randn([cfg.vocab_size, cfg.hidden], cfg.init_std, &mut rng),
            true,
        );
        Ok(Self {
            cfg: cfg.clone(),
            params,
            embedding,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    /// Warm-started power-iteration refresh for every reparameterized layer.
    pub fn refresh_spectral(&mut self, iters: usize, tol: f32) -> Result<()> {
        for block in &mut self.blocks {
            block.refresh_spectral(&self.params, iters, tol)?;
        }
        Ok(())
    }

    /// Power-iteration state of every reparameterized layer, in block order.
    pub fn spectral_state(&self) -> Vec<&PowerIteration> {
        self.blocks
            .iter()
            .flat_map(|b| b.linears())
            .filter_map(|l| l.power.as_ref())
            .collect()
    }

    fn check_tokens(&self, batch: &TokenBatch) -> Result<()> {
        if batch.width < 2 || batch.width - 1 > self.cfg.seq_len || batch.rows == 0 {
            return Err(Error::Input(format!(
                "batch of {}x{} does not fit sequence length {}",
                batch.rows, batch.width, self.cfg.seq_len
            )));
        }
        if let Some(&t) = batch
            .tokens
            .iter()
            .find(|&&t| t as usize >= self.cfg.vocab_size)
        {
            return Err(Error::Input(format!(
                "token {t} out of range for vocab {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Records the full forward pass, with the embedding gather of
    /// `batch.inputs()` and the mean next-token cross-entropy as loss.
    pub fn forward(&self, batch: &TokenBatch) -> Result<ForwardPass> {
        self.check_tokens(batch)?;
        let (rows, seq) = (batch.rows, batch.width - 1);
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape);
        let mut h = tape.gather(vars[self.embedding], &batch.inputs())?;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, trace) = block.forward(&mut tape, &vars, h, rows, seq)?;
            traces.push(trace);
            h = out;
        }
        let h = self
            .final_norm
            .apply(&mut tape, &vars, h, self.cfg.ln_eps)?;
        let logits = tape.matmul_t(h, vars[self.head], false, true)?;
        let loss = tape.cross_entropy(logits, &batch.targets())?;
        Ok(ForwardPass {
            tape,
            vars,
            loss,
            logits,
            traces,
        })
    }

    /// Loss and `[rows·seq, vocab]` logits without keeping the tape.
    pub fn forward_loss(&self, batch: &TokenBatch) -> Result<(f32, Tensor)> {
        let pass = self.forward(batch)?;
        Ok((pass.loss(), pass.tape.value(pass.logits).clone()))
    }

    /// Writes `params.bin` (little-endian f32, parameters back to back) and
    /// `manifest.txt` (`name<TAB>shape<TAB>byte offset` per line) into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bin = Vec::with_capacity(self.params.numel() * 4);
        let mut manifest = String::from("# name\tshape\toffset\n");
        for p in self.params.iter() {
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            writeln!(manifest, "{}\t{}\t{}", p.name, shape.join("x"), bin.len()).unwrap();
            for v in p.value.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bin_path = dir.join("params.bin");
        fs::write(&bin_path, bin).map_err(|e| Error::io(bin_path, e))?;
        let man_path = dir.join("manifest.txt");
        fs::write(&man_path, manifest).map_err(|e| Error::io(man_path, e))?;
        Ok(())
    }

    /// Loads parameters written by [`save_checkpoint`](Self::save_checkpoint)
    /// into a model of the same configuration.
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let man_path = dir.join("manifest.txt");
        let manifest = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
        let bin_path = dir.join("params.bin");
        let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut seen = 0;
        for line in manifest
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        {
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, shape, offset] = fields[..] else {
                return Err(Error::Input(format!("malformed manifest line '{line}'")));
            };
            let shape = shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Input(format!("bad shape in '{line}'")))?;
            let offset: usize = offset
                .parse()
                .map_err(|_| Error::Input(format!("bad offset in '{line}'")))?;
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::Input(format!("unknown parameter '{name}'")))?;
            let param = self.params.get_mut(id);
            if param.value.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "parameter '{name}' has shape {:?}, checkpoint has {:?}",
                    param.value.shape(),
                    shape
                )));
            }
            let n = param.value.len();
            let bytes = bin.get(offset..offset + 4 * n).ok_or_else(|| {
                Error::Input(format!("checkpoint data for '{name}' is truncated"))
            })?;
            for (dst, chunk) in param.value.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            seen += 1;
        }
        if seen != self.params.len() {
            return Err(Error::Input(format!(
                "checkpoint holds {seen} of {} parameters",
                self.params.len()
            )));
        }
        for block in &mut self.blocks {
            for layer in block.linears_mut() {
                if let Some(power) = &mut layer.power {
                    let w = &self.params.get(layer.weight).value;
                    let (m, n) = w.dims2()?;
                    *power = PowerIteration::new(m, n);
                    power.refresh(w, 500, 1e-7)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stability::VariantKind;

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::tiny(StabilityVariant::default());
        cfg.validate().unwrap();
        cfg.seq_len = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::tiny(StabilityVariant::default());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::tiny(StabilityVariant::new(VariantKind::SigmaReparam));
        let a = Model::init(&cfg).unwrap();
        let b = Model::init(&cfg).unwrap();
        assert_eq!(a.params(), b.params());
        let mut other = cfg.clone();
        other.seed = 7;
        let c = Model::init(&other).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn out_of_range_tokens_are_rejected() {
        let cfg = ModelConfig::tiny(StabilityVariant::default());
        let model = Model::init(&cfg).unwrap();
        let batch = TokenBatch::new(1, 3, vec![1, 64, 2]).unwrap();
        assert!(matches!(model.forward(&batch), Err(Error::Input(_))));
        let long = TokenBatch::new(1, 40, vec![0; 40]).unwrap();
        assert!(matches!(model.forward(&long), Err(Error::Input(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig::tiny(StabilityVariant::new(VariantKind::SigmaReparam));
        let model = Model::init(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save_checkpoint(dir.path()).unwrap();
        let mut other_cfg = cfg.clone();
        other_cfg.seed = 99;
        let mut other = Model::init(&other_cfg).unwrap();
        other.load_checkpoint(dir.path()).unwrap();
        assert_eq!(other.params(), model.params());
        let batch = TokenBatch::new(2, 5, (0..10).collect()).unwrap();
        let (a, _) = model.forward_loss(&batch).unwrap();
        let (b, _) = other.forward_loss(&batch).unwrap();
        assert!((a - b).abs() < 1e-5);
        let manifest = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("embedding.weight\t64x32\t0"));
    }
}
