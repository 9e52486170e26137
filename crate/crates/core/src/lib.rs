//! A desk-scale laboratory for transformer training stability.
//!
//! The crate bundles a small reverse-mode autodiff engine, a causal language
//! model whose blocks can be assembled in ten stability variants (softmax
//! temperature, capping and clipping, spectral reparameterization,
//! LayerScale and four layer-norm placements), per-layer norm telemetry and
//! a harness that sweeps learning rates and classifies each run as
//! converged or diverged.
//!
//! See the `examples/` directory for one runnable program per capability.

// NaN-rejecting validation reads best as `!(x > 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autograd;
pub mod block;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod params;
pub mod stability;
pub mod telemetry;
pub mod tensor;

pub use attention::{attention_logits, AttentionConfig, LayerKind, LinearLayer};
pub use autograd::{Tape, Var};
pub use block::{assemble_block, BlockTrace, TransformerBlock};
pub use data::{BatchSource, DataConfig, MarkovChain, SourceKind, Split, TokenBatch};
pub use error::{Error, Result};
pub use model::{ForwardPass, Model, ModelConfig};
pub use optim::{clip_global_norm, AdamW, LrSchedule, OptimizerConfig};
pub use params::{ParamId, ParamSet};
pub use stability::{
    capped_softmax, clipped_softmax, layer_scale_apply, sigma_reparam_weight, softmax_temp, LnSite,
    SoftmaxFlavor, StabilityVariant, VariantKind,
};
pub use telemetry::{
    classify_run, softmax_saturation_demo, DivergenceCriteria, DivergenceMonitor, DivergenceReason,
    RunStatus, RunVerdict, TelemetryRecord,
};
pub use tensor::{finite_diff_grad, l2_norm, softmax, spectral_norm, PowerIteration, Tensor};
