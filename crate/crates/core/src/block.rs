//! Transformer block assembly for every stability variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    Attention, AttentionConfig, LayerKind, LayerNormParams, LayerTrace, LinearLayer,
};
use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::params::{Bindings, ParamId, ParamSet};
use crate::stability::{LnSite, StabilityVariant};
use crate::tensor::Tensor;

/// One pre-norm transformer block whose normalization placement, softmax,
/// weight transform and branch scaling follow its [`StabilityVariant`].
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub index: usize,
    pub variant: StabilityVariant,
    pub eps: f32,
    pub attn_norm: Option<LayerNormParams>,
    pub attention: Attention,
    pub proj_norm: Option<LayerNormParams>,
    pub attn_scale: Option<ParamId>,
    pub ff_norm: Option<LayerNormParams>,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
    pub fc2_norm: Option<LayerNormParams>,
    pub ff_scale: Option<ParamId>,
}

/// Tape handles recorded by one block forward.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub block: usize,
    pub input: Var,
    pub output: Var,
    /// QKV, Proj, FC1, FC2 in that order.
    pub layers: [LayerTrace; 4],
    pub attention_weights: Var,
}

impl BlockTrace {
    pub fn layer(&self, kind: LayerKind) -> &LayerTrace {
        self.layers
            .iter()
            .find(|l| l.kind == kind)
            .expect("all four layers traced")
    }
}

/// Builds block `index` for `cfg.variant`, registering its parameters in
/// `params` under `blocks.{index}.*`.
pub fn assemble_block(
    index: usize,
    cfg: &ModelConfig,
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
) -> Result<TransformerBlock> {
    cfg.validate()?;
    let variant = cfg.variant;
    let kind = variant.kind;
    let prefix = format!("blocks.{index}");
    let (h, ff) = (cfg.hidden, cfg.ff_mult * cfg.hidden);
    let head_dim = h / cfg.heads;
    let std = cfg.init_std;
    let residual_std = cfg.init_std / (2.0 * cfg.layers as f32).sqrt();
    let reparam = kind.uses_sigma_reparam();
    let ln = |site: LnSite, width: usize, params: &mut ParamSet| {
        kind.has_ln(site)
            .then(|| LayerNormParams::new(&prefix, site, width, params))
    };

    let attn_norm = ln(LnSite::PreAttention, h, params);
    let qkv = LinearLayer::new(LayerKind::Qkv, &prefix, 3 * h, h, std, reparam, params, rng)?;
    let qkv_norm = ln(LnSite::PostQkv, 3 * h, params);
    let q_norm = ln(LnSite::Query, head_dim, params);
    let k_norm = ln(LnSite::Key, head_dim, params);
    let proj = LinearLayer::new(
        LayerKind::Proj,
        &prefix,
        h,
        h,
        residual_std,
        reparam,
        params,
        rng,
    )?;
    let proj_norm = ln(LnSite::PostProj, h, params);
    let scale = |name: &str, params: &mut ParamSet| {
        kind.uses_layer_scale().then(|| {
            params.add(
                format!("{prefix}.{name}"),
                Tensor::full([h], variant.layerscale_init),
                false,
            )
        })
    };
    let attn_scale = scale("attn_scale", params);
    let ff_norm = ln(LnSite::PreFeedForward, h, params);
    let fc1 = LinearLayer::new(LayerKind::Fc1, &prefix, ff, h, std, reparam, params, rng)?;
    let fc2 = LinearLayer::new(
        LayerKind::Fc2,
        &prefix,
        h,
        ff,
        residual_std,
        reparam,
        params,
        rng,
    )?;
    let fc2_norm = ln(LnSite::PostFc2, h, params);
    let ff_scale = scale("ff_scale", params);

    let mut attn_cfg = AttentionConfig::new(h, cfg.heads)?;
    attn_cfg.rope_base = cfg.rope_base;
    Ok(TransformerBlock {
        index,
        variant,
        eps: cfg.ln_eps,
        attn_norm,
        attention: Attention {
            cfg: attn_cfg,
            qkv,
            qkv_norm,
            q_norm,
            k_norm,
            proj,
        },
        proj_norm,
        attn_scale,
        ff_norm,
        fc1,
        fc2,
        fc2_norm,
        ff_scale,
    })
}

impl TransformerBlock {
    /// A single block with its own parameter store, seeded from `cfg.seed`.
    pub fn standalone(cfg: &ModelConfig) -> Result<(ParamSet, TransformerBlock)> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let block = assemble_block(0, cfg, &mut params, &mut rng)?;
        Ok((params, block))
    }

    pub fn linears(&self) -> [&LinearLayer; 4] {
        [
            &self.attention.qkv,
            &self.attention.proj,
            &self.fc1,
            &self.fc2,
        ]
    }

    pub fn linears_mut(&mut self) -> [&mut LinearLayer; 4] {
        [
            &mut self.attention.qkv,
            &mut self.attention.proj,
            &mut self.fc1,
            &mut self.fc2,
        ]
    }

    /// Layer-norm sites actually instantiated, in forward order.
    pub fn ln_sites(&self) -> Vec<LnSite> {
        [
            self.attn_norm,
            self.attention.qkv_norm,
            self.attention.q_norm,
            self.attention.k_norm,
            self.proj_norm,
            self.ff_norm,
            self.fc2_norm,
        ]
        .into_iter()
        .flatten()
        .map(|ln| ln.site)
        .collect()
    }

    pub fn refresh_spectral(&mut self, params: &ParamSet, iters: usize, tol: f32) -> Result<()> {
        for layer in self.linears_mut() {
            layer.refresh_spectral(params, iters, tol)?;
        }
        Ok(())
    }

    /// `h` is `[batch·seq, hidden]`; returns the block output of the same shape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &Bindings,
        h: Var,
        batch: usize,
        seq: usize,
    ) -> Result<(Var, BlockTrace)> {
        let eps = self.eps;
        let norm = |tape: &mut Tape, ln: &Option<LayerNormParams>, x: Var| match ln {
            Some(ln) => ln.apply(tape, vars, x, eps),
            None => Ok(x),
        };

        let attn_in = norm(tape, &self.attn_norm, h)?;
        let attn = self.attention.forward(
            tape,
            vars,
            attn_in,
            batch,
            seq,
            self.variant.softmax_flavor(),
            eps,
        )?;
        let mut branch = norm(tape, &self.proj_norm, attn.out)?;
        if let Some(s) = self.attn_scale {
            branch = tape.mul_row(branch, vars[s])?;
        }
        let h1 = tape.add(h, branch)?;

        let ff_in = norm(tape, &self.ff_norm, h1)?;
        let (y1, w1) = self.fc1.forward(tape, vars, ff_in)?;
        let act = tape.squared_relu(y1);
        let (y2, w2) = self.fc2.forward(tape, vars, act)?;
        let mut branch = norm(tape, &self.fc2_norm, y2)?;
        if let Some(s) = self.ff_scale {
            branch = tape.mul_row(branch, vars[s])?;
        }
        let out = tape.add(h1, branch)?;

        let trace = BlockTrace {
            block: self.index,
            input: h,
            output: out,
            layers: [
                attn.qkv,
                attn.proj,
                LayerTrace {
                    kind: LayerKind::Fc1,
                    weight: w1,
                    x: ff_in,
                    y: y1,
                },
                LayerTrace {
                    kind: LayerKind::Fc2,
                    weight: w2,
                    x: act,
                    y: y2,
                },
            ],
            attention_weights: attn.weights,
        };
        Ok((out, trace))
    }
}
