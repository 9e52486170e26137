//! Multi-head causal self-attention with rotary position embeddings.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{HeadLayout, Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::params::{Bindings, ParamId, ParamSet};
use crate::stability::{LnSite, SoftmaxFlavor};
use crate::tensor::{PowerIteration, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub hidden_size: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub rope_base: f32,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn new(hidden_size: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || !hidden_size.is_multiple_of(num_heads) {
            return Err(Error::Config(format!(
                "hidden size {hidden_size} is not divisible by {num_heads} heads"
            )));
        }
        let head_dim = hidden_size / num_heads;
        if !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rotary embeddings need an even head dim, got {head_dim}"
            )));
        }
        Ok(Self {
            hidden_size,
            num_heads,
            head_dim,
            rope_base: 10_000.0,
            causal: true,
        })
    }

    fn layout(&self, batch: usize, seq: usize, parts: usize) -> HeadLayout {
        HeadLayout {
            batch,
            seq,
            heads: self.num_heads,
            head_dim: self.head_dim,
            parts,
        }
    }
}

/// Identity of a linear layer inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "QKV")]
    Qkv,
    #[serde(rename = "Proj")]
    Proj,
    #[serde(rename = "FC1")]
    Fc1,
    #[serde(rename = "FC2")]
    Fc2,
}

impl LayerKind {
    pub const ALL: [LayerKind; 4] = [
        LayerKind::Qkv,
        LayerKind::Proj,
        LayerKind::Fc1,
        LayerKind::Fc2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Qkv => "QKV",
            LayerKind::Proj => "Proj",
            LayerKind::Fc1 => "FC1",
            LayerKind::Fc2 => "FC2",
        }
    }

    fn param_prefix(self) -> &'static str {
        match self {
            LayerKind::Qkv => "attn.qkv",
            LayerKind::Proj => "attn.proj",
            LayerKind::Fc1 => "ff.fc1",
            LayerKind::Fc2 => "ff.fc2",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bias-free linear layer `y = x · Wᵀ`, optionally spectrally reparameterized.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub kind: LayerKind,
    pub weight: ParamId,
    /// Learnable scale of the reparameterized weight, starts at 1.
    pub gamma: Option<ParamId>,
    pub power: Option<PowerIteration>,
}

impl LinearLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: LayerKind,
        prefix: &str,
        out_features: usize,
        in_features: usize,
        std: f32,
        sigma_reparam: bool,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let name = format!("{prefix}.{}", kind.param_prefix());
        let w = Tensor::randn([out_features, in_features], std, rng);
        let (gamma, power) = if sigma_reparam {
            let mut power = PowerIteration::new(out_features, in_features);
            power.refresh(&w, 500, 1e-7)?;
            let g = params.add(format!("{name}.gamma"), Tensor::scalar(1.0), false);
            (Some(g), Some(power))
        } else {
            (None, None)
        };
        let weight = params.add(format!("{name}.weight"), w, true);
        Ok(Self {
            kind,
            weight,
            gamma,
            power,
        })
    }

    /// The weight actually multiplied into the input.
    pub fn effective_weight(&self, tape: &mut Tape, vars: &Bindings) -> Result<Var> {
        match (self.gamma, &self.power) {
            (Some(g), Some(power)) => tape.sigma_reparam(vars[self.weight], vars[g], power),
            _ => Ok(vars[self.weight]),
        }
    }

    /// Returns `(output, effective weight)`.
    pub fn forward(&self, tape: &mut Tape, vars: &Bindings, x: Var) -> Result<(Var, Var)> {
        let w = self.effective_weight(tape, vars)?;
        Ok((tape.matmul_t(x, w, false, true)?, w))
    }

    /// Warm-started spectral-norm refresh; no-op for plain layers.
    pub fn refresh_spectral(&mut self, params: &ParamSet, iters: usize, tol: f32) -> Result<()> {
        if let Some(power) = &mut self.power {
            power.refresh(&params.get(self.weight).value, iters, tol)?;
        }
        Ok(())
    }
}

/// Gain and bias of one layer-norm site.
#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub site: LnSite,
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(prefix: &str, site: LnSite, width: usize, params: &mut ParamSet) -> Self {
        let name = if prefix.is_empty() {
            site.name().to_string()
        } else {
            format!("{prefix}.{}", site.name())
        };
        let gain = params.add(format!("{name}.gain"), Tensor::ones([width]), false);
        let bias = params.add(format!("{name}.bias"), Tensor::zeros([width]), false);
        Self { site, gain, bias }
    }

    pub fn apply(&self, tape: &mut Tape, vars: &Bindings, x: Var, eps: f32) -> Result<Var> {
        tape.layer_norm(x, vars[self.gain], vars[self.bias], eps)
    }
}

/// Tape handles for one linear layer's weight, input and output.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub kind: LayerKind,
    pub weight: Var,
    pub x: Var,
    pub y: Var,
}

/// Attention sublayer: fused QKV projection, optional normalizations,
/// rotary embeddings, softmax variant and output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub cfg: AttentionConfig,
    pub qkv: LinearLayer,
    pub qkv_norm: Option<LayerNormParams>,
    pub q_norm: Option<LayerNormParams>,
    pub k_norm: Option<LayerNormParams>,
    pub proj: LinearLayer,
}

/// Result of the attention sublayer; the residual add is left to the caller.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub out: Var,
    /// `[batch·heads, seq, seq]` attention weights.
    pub weights: Var,
    pub qkv: LayerTrace,
    pub proj: LayerTrace,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &Bindings,
        x: Var,
        batch: usize,
        seq: usize,
        flavor: SoftmaxFlavor,
        eps: f32,
    ) -> Result<AttentionOutput> {
        let (fused, w_qkv) = self.qkv.forward(tape, vars, x)?;
        let fused_n = match &self.qkv_norm {
            Some(ln) => ln.apply(tape, vars, fused, eps)?,
            None => fused,
        };
        let layout = self.cfg.layout(batch, seq, 3);
        let q = tape.split_heads(fused_n, 0, layout)?;
        let k = tape.split_heads(fused_n, 1, layout)?;
        let v = tape.split_heads(fused_n, 2, layout)?;
        let q_ln = self.q_norm.map(|ln| (vars[ln.gain], vars[ln.bias]));
        let k_ln = self.k_norm.map(|ln| (vars[ln.gain], vars[ln.bias]));
        let logits = logits_from_heads(tape, q, k, &self.cfg, q_ln, k_ln, eps)?;
        let weights = flavor.apply(tape, logits, self.cfg.causal)?;
        let ctx = tape.matmul(weights, v)?;
        let merged = tape.merge_heads(ctx, layout)?;
        let (out, w_proj) = self.proj.forward(tape, vars, merged)?;
        Ok(AttentionOutput {
            out,
            weights,
            qkv: LayerTrace {
                kind: LayerKind::Qkv,
                weight: w_qkv,
                x,
                y: fused,
            },
            proj: LayerTrace {
                kind: LayerKind::Proj,
                weight: w_proj,
                x: merged,
                y: out,
            },
        })
    }
}

/// Scaled dot-product logits from split heads. Normalization (when given)
/// precedes the rotation.
pub(crate) fn logits_from_heads(
    tape: &mut Tape,
    q: Var,
    k: Var,
    cfg: &AttentionConfig,
    q_ln: Option<(Var, Var)>,
    k_ln: Option<(Var, Var)>,
    eps: f32,
) -> Result<Var> {
    let q = match q_ln {
        Some((g, b)) => tape.layer_norm(q, g, b, eps)?,
        None => q,
    };
    let k = match k_ln {
        Some((g, b)) => tape.layer_norm(k, g, b, eps)?,
        None => k,
    };
    let q = tape.rotary(q, cfg.rope_base)?;
    let k = tape.rotary(k, cfg.rope_base)?;
    let raw = tape.matmul_t(q, k, false, true)?;
    Ok(tape.scale(raw, 1.0 / (cfg.head_dim as f32).sqrt()))
}

/// Attention logits `(1/√d)·(X Wq)(X Wk)ᵀ` per head for an input of shape
/// `[batch, seq, hidden]`. `wq`/`wk` are `[hidden, hidden]` in
/// `out × in` layout. With `qk_ln = Some((gain, bias))` queries and keys are
/// layer-normalized per head (shared affine) before rotation.
///
/// Returns `[batch, heads, seq, seq]`.
pub fn attention_logits(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    cfg: &AttentionConfig,
    qk_ln: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    let &[batch, seq, hidden] = x.shape() else {
        return Err(dim_err!(
            "attention input must be [batch, seq, hidden], got {:?}",
            x.shape()
        ));
    };
    if hidden != cfg.hidden_size {
        return Err(dim_err!(
            "input width {hidden} for hidden size {}",
            cfg.hidden_size
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone().reshape([batch * seq, hidden])?);
    let wq = tape.constant(wq.clone());
    let wk = tape.constant(wk.clone());
    let q = tape.matmul_t(xv, wq, false, true)?;
    let k = tape.matmul_t(xv, wk, false, true)?;
    let layout = cfg.layout(batch, seq, 1);
    let q = tape.split_heads(q, 0, layout)?;
    let k = tape.split_heads(k, 0, layout)?;
    let ln = qk_ln.map(|(g, b)| (tape.constant(g.clone()), tape.constant(b.clone())));
    let logits = logits_from_heads(&mut tape, q, k, cfg, ln, ln, 1e-5)?;
    tape.value(logits)
        .clone()
        .reshape([batch, cfg.num_heads, seq, seq])
}
