//! Catalog of training-stability mechanisms.
//!
//! Each [`VariantKind`] fixes a block topology (where layer norms sit), a
//! softmax flavor, an optional spectral weight transform and optional
//! per-branch channel scaling. [`StabilityVariant`] carries the kind together
//! with the hyperparameters the mechanisms need.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{softmax, spectral_norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Baseline,
    SoftTemp,
    SoftCap,
    SoftClip,
    SigmaReparam,
    LayerScale,
    QkNorm,
    QkNormCap,
    QkvNorm,
    QkFcNorm,
}

impl VariantKind {
    pub const ALL: [VariantKind; 10] = [
        VariantKind::Baseline,
        VariantKind::SoftTemp,
        VariantKind::SoftCap,
        VariantKind::SoftClip,
        VariantKind::SigmaReparam,
        VariantKind::LayerScale,
        VariantKind::QkNorm,
        VariantKind::QkNormCap,
        VariantKind::QkvNorm,
        VariantKind::QkFcNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Baseline => "baseline",
            VariantKind::SoftTemp => "soft_temp",
            VariantKind::SoftCap => "soft_cap",
            VariantKind::SoftClip => "soft_clip",
            VariantKind::SigmaReparam => "sigma_reparam",
            VariantKind::LayerScale => "layer_scale",
            VariantKind::QkNorm => "qk_norm",
            VariantKind::QkNormCap => "qk_norm_cap",
            VariantKind::QkvNorm => "qkv_norm",
            VariantKind::QkFcNorm => "qk_fc_norm",
        }
    }

    /// Layer-norm sites present in a block of this kind, in forward order.
    pub fn ln_sites(self) -> &'static [LnSite] {
        use LnSite::*;
        match self {
            VariantKind::Baseline
            | VariantKind::SoftTemp
            | VariantKind::SoftCap
            | VariantKind::SoftClip
            | VariantKind::SigmaReparam
            | VariantKind::LayerScale => &[PreAttention, PreFeedForward],
            VariantKind::QkNorm | VariantKind::QkNormCap => {
                &[PreAttention, Query, Key, PreFeedForward]
            }
            VariantKind::QkvNorm => &[PostQkv, PreFeedForward],
            VariantKind::QkFcNorm => &[PreAttention, Query, Key, PostProj, PreFeedForward, PostFc2],
        }
    }

    pub fn has_ln(self, site: LnSite) -> bool {
        self.ln_sites().contains(&site)
    }

    pub fn uses_sigma_reparam(self) -> bool {
        self == VariantKind::SigmaReparam
    }

    pub fn uses_layer_scale(self) -> bool {
        self == VariantKind::LayerScale
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

/// Where a layer norm sits inside a transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LnSite {
    /// Before the fused QKV projection.
    PreAttention,
    /// On the fused QKV output, before the head split.
    PostQkv,
    /// On queries, per head.
    Query,
    /// On keys, per head.
    Key,
    /// After the attention output projection, inside the residual branch.
    PostProj,
    /// Before FC1.
    PreFeedForward,
    /// After FC2, inside the residual branch.
    PostFc2,
    /// Before the output head, outside any block.
    Final,
}

impl LnSite {
    pub fn name(self) -> &'static str {
        match self {
            LnSite::PreAttention => "attn_norm",
            LnSite::PostQkv => "qkv_norm",
            LnSite::Query => "q_norm",
            LnSite::Key => "k_norm",
            LnSite::PostProj => "proj_norm",
            LnSite::PreFeedForward => "ff_norm",
            LnSite::PostFc2 => "fc2_norm",
            LnSite::Final => "final_norm",
        }
    }
}

/// A stability mechanism and its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityVariant {
    pub kind: VariantKind,
    /// Softmax temperature for `soft_temp`.
    pub beta: f32,
    /// Logit capping for `soft_cap` and `qk_norm_cap`.
    pub capping: f32,
    /// Upper stretch of the clipped softmax.
    pub zeta: f32,
    /// Lower stretch of the clipped softmax.
    pub gamma_clip: f32,
    /// Initial value of the per-channel branch scales.
    pub layerscale_init: f32,
}

impl Default for StabilityVariant {
    fn default() -> Self {
        Self::new(VariantKind::Baseline)
    }
}

impl StabilityVariant {
    pub fn new(kind: VariantKind) -> Self {
        Self {
            kind,
            beta: 0.5,
            capping: 50.0,
            zeta: 1.03,
            gamma_clip: -0.03,
            layerscale_init: 0.1,
        }
    }

    pub fn all() -> Vec<Self> {
        VariantKind::ALL.into_iter().map(Self::new).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if !(self.capping > 0.0 && self.capping.is_finite()) {
            return bad(format!("capping must be > 0, got {}", self.capping));
        }
        if !(self.zeta >= 1.0) {
            return bad(format!("zeta must be >= 1, got {}", self.zeta));
        }
        if !(self.gamma_clip <= 0.0) {
            return bad(format!("gamma_clip must be <= 0, got {}", self.gamma_clip));
        }
        if !self.layerscale_init.is_finite() {
            return bad("layerscale_init must be finite".into());
        }
        Ok(())
    }

    pub fn softmax_flavor(&self) -> SoftmaxFlavor {
        match self.kind {
            VariantKind::SoftTemp => SoftmaxFlavor::Temperature { beta: self.beta },
            VariantKind::SoftCap | VariantKind::QkNormCap => SoftmaxFlavor::Capped {
                capping: self.capping,
            },
            VariantKind::SoftClip => SoftmaxFlavor::Clipped {
                zeta: self.zeta,
                gamma: self.gamma_clip,
            },
            _ => SoftmaxFlavor::Plain,
        }
    }
}

/// The attention normalizer selected by a variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SoftmaxFlavor {
    Plain,
    Temperature { beta: f32 },
    Capped { capping: f32 },
    Clipped { zeta: f32, gamma: f32 },
}

impl SoftmaxFlavor {
    /// Attention weights from raw logits on the tape. The causal mask is
    /// added after any logit transform, so capping never lifts masked
    /// entries off the floor.
    pub fn apply(self, tape: &mut Tape, logits: Var, causal: bool) -> Result<Var> {
        let pre = match self {
            SoftmaxFlavor::Plain | SoftmaxFlavor::Clipped { .. } => logits,
            SoftmaxFlavor::Temperature { beta } => tape.scale(logits, beta),
            SoftmaxFlavor::Capped { capping } => {
                let shrunk = tape.scale(logits, 1.0 / capping);
                let squashed = tape.tanh(shrunk);
                tape.scale(squashed, below(capping))
            }
        };
        let masked = if causal { tape.causal_mask(pre)? } else { pre };
        let weights = tape.softmax(masked);
        Ok(match self {
            SoftmaxFlavor::Clipped { zeta, gamma } => {
                tape.affine_clamp(weights, zeta - gamma, gamma, 0.0, 1.0)
            }
            _ => weights,
        })
    }
}

/// `softmax(β · logit)` over the last axis.
pub fn softmax_temp(logit: &Tensor, beta: f32) -> Result<Tensor> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be > 0, got {beta}")));
    }
    Ok(softmax(&logit.scale(beta)))
}

/// The pre-softmax values of the capped softmax: `tanh(logit / c) · c`,
/// strictly inside `(−c, c)`.
pub fn cap_logits(logit: &Tensor, capping: f32) -> Result<Tensor> {
    if !(capping > 0.0) {
        return Err(Error::Config(format!("capping must be > 0, got {capping}")));
    }
    let c = below(capping);
    Ok(logit.map(|x| (x / capping).tanh() * c))
}

/// Largest `f32` under `c`. `tanh` rounds to exactly ±1 for large inputs,
/// so scaling by this keeps capped logits strictly inside `(−c, c)`.
fn below(c: f32) -> f32 {
    c.next_down()
}

/// `softmax(tanh(logit / c) · c)` over the last axis.
pub fn capped_softmax(logit: &Tensor, capping: f32) -> Result<Tensor> {
    Ok(softmax(&cap_logits(logit, capping)?))
}

/// `clip((ζ − γ) · softmax(logit) + γ, 0, 1)` over the last axis.
pub fn clipped_softmax(logit: &Tensor, zeta: f32, gamma: f32) -> Result<Tensor> {
    if !(zeta >= 1.0) || !(gamma <= 0.0) {
        return Err(Error::Config(format!(
            "clipped softmax needs zeta >= 1 and gamma <= 0, got {zeta}, {gamma}"
        )));
    }
    Ok(softmax(logit).map(|p| ((zeta - gamma) * p + gamma).clamp(0.0, 1.0)))
}

/// Spectrally reparameterized weight `(γ / σ(W)) · W`, with σ from a
/// cold-started power iteration run to convergence.
pub fn sigma_reparam_weight(w: &Tensor, gamma: f32) -> Result<Tensor> {
    let sigma = spectral_norm(w, 2000, 1e-7)?;
    if sigma == 0.0 {
        return Err(Error::Undefined(
            "spectral reparameterization of a zero weight matrix".into(),
        ));
    }
    Ok(w.scale(gamma / sigma))
}

/// Channel-wise scaling of a residual-branch output.
pub fn layer_scale_apply(branch_out: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let d = branch_out.last_dim();
    if scale.len() != d {
        return Err(dim_err!(
            "layer scale of length {} for width {d}",
            scale.len()
        ));
    }
    let mut out = branch_out.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        row.iter_mut().zip(scale.data()).for_each(|(x, s)| *x *= s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f32]) -> Tensor {
        Tensor::new([1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn parse_names() {
        for k in VariantKind::ALL {
            assert_eq!(k.name().parse::<VariantKind>().unwrap(), k);
        }
        assert_eq!(
            "QK-norm-cap".parse::<VariantKind>().unwrap(),
            VariantKind::QkNormCap
        );
        assert!(matches!(
            "z_loss".parse::<VariantKind>(),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn variant_validation() {
        for v in StabilityVariant::all() {
            v.validate().unwrap();
        }
        let mut v = StabilityVariant::new(VariantKind::SoftClip);
        v.zeta = 0.9;
        assert!(v.validate().is_err());
        let mut v = StabilityVariant::new(VariantKind::SoftClip);
        v.gamma_clip = 0.1;
        assert!(v.validate().is_err());
        let mut v = StabilityVariant::new(VariantKind::SoftCap);
        v.capping = 0.0;
        assert!(v.validate().is_err());
        let mut v = StabilityVariant::new(VariantKind::SoftTemp);
        v.beta = -1.0;
        assert!(v.validate().is_err());
    }

    #[test]
    fn temperature_examples() {
        let x = row(&[0.3, -1.2, 2.0]);
        assert_eq!(softmax_temp(&x, 1.0).unwrap(), softmax(&x));
        let s = softmax_temp(&row(&[2.0, 0.0]), 0.5).unwrap();
        let e = std::f32::consts::E;
        assert!((s.data()[0] - e / (e + 1.0)).abs() < 1e-6);
        assert!((s.data()[1] - 1.0 / (e + 1.0)).abs() < 1e-6);
    }

    #[test]
    fn capping_examples() {
        let x = Tensor::uniform([8, 16], -1.0, 1.0, 1);
        let (a, b) = (capped_softmax(&x, 50.0).unwrap(), softmax(&x));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-4);
        }
        let capped = cap_logits(&row(&[1e6, 0.0]), 50.0).unwrap();
        assert_eq!(capped.data(), &[50f32.next_down(), 0.0]);
        assert!(capped.data()[0] < 50.0);
    }

    #[test]
    fn clipping_examples() {
        let x = Tensor::uniform([4, 10], -3.0, 3.0, 2);
        assert_eq!(clipped_softmax(&x, 1.0, 0.0).unwrap(), softmax(&x));
        let f = |p: f32| ((1.03f32 - -0.03) * p + -0.03).clamp(0.0, 1.0);
        assert_eq!(f(1.0), 1.0);
        assert!((f(0.05) - 0.023).abs() < 1e-6);
        assert_eq!(f(0.02), 0.0);
        assert_eq!(f(0.01), 0.0);
        assert!(clipped_softmax(&x, 0.5, 0.0).is_err());
    }

    #[test]
    fn sigma_reparam_examples() {
        let w = Tensor::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]]);
        let r = sigma_reparam_weight(&w, 1.0).unwrap();
        for (a, b) in r.data().iter().zip([1.0, 0.0, 0.0, 0.5]) {
            assert!((a - b).abs() < 1e-5);
        }
        let c = std::f32::consts::FRAC_1_SQRT_2;
        let rot = Tensor::from_rows(&[&[c, -c], &[c, c]]);
        let r = sigma_reparam_weight(&rot, 1.0).unwrap();
        for (a, b) in r.data().iter().zip(rot.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(matches!(
            sigma_reparam_weight(&Tensor::zeros([3, 3]), 1.0),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn layer_scale_examples() {
        let x = Tensor::uniform([3, 4], -1.0, 1.0, 3);
        assert_eq!(layer_scale_apply(&x, &Tensor::ones([4])).unwrap(), x);
        assert!(layer_scale_apply(&x, &Tensor::zeros([4]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let b = row(&[3.0, 5.0, 7.0]);
        let s = Tensor::new([3], vec![2.0, 0.0, 1.0]).unwrap();
        assert_eq!(layer_scale_apply(&b, &s).unwrap().data(), &[6.0, 0.0, 7.0]);
        assert!(layer_scale_apply(&b, &Tensor::ones([2])).is_err());
    }

    #[test]
    fn placement_table_shapes() {
        assert!(!VariantKind::QkvNorm.has_ln(LnSite::PreAttention));
        assert!(VariantKind::QkvNorm.has_ln(LnSite::PreFeedForward));
        assert_eq!(VariantKind::QkFcNorm.ln_sites().len(), 6);
        assert_eq!(
            VariantKind::QkNormCap.ln_sites(),
            VariantKind::QkNorm.ln_sites()
        );
    }
}
