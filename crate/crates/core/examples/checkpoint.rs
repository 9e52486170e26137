//! Train a few steps, save a checkpoint (flat binary plus text manifest),
//! load it into a freshly initialized model and confirm the loss matches.
//!
//! ```bash
//! cargo run --example checkpoint
//! ```

use stablelab::data::{BatchSource, Split};
use stablelab::optim::{clip_global_norm, AdamW, OptimizerConfig};
use stablelab::{DataConfig, Model, ModelConfig, StabilityVariant, VariantKind};

pub fn run_example() -> stablelab::Result<()> {
    let mut cfg = ModelConfig::tiny(StabilityVariant::new(VariantKind::SigmaReparam));
    cfg.seed = 3;
    let source = BatchSource::new(&DataConfig::default(), cfg.vocab_size, cfg.seq_len)?;
    let mut model = Model::init(&cfg)?;
    let mut opt = AdamW::new(OptimizerConfig::default(), model.params())?;
    for step in 0..10 {
        model.refresh_spectral(16, 1e-5)?;
        let mut pass = model.forward(&source.batch_at(Split::Train, step))?;
        pass.backward()?;
        let mut grads = pass.grads();
        clip_global_norm(&mut grads, 1.0)?;
        opt.step(model.params_mut(), &grads, 3e-3)?;
    }
    model.refresh_spectral(500, 1e-7)?;

    let dir = std::env::temp_dir().join("stablelab_checkpoint");
    model.save_checkpoint(&dir)?;
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))
        .map_err(|e| stablelab::Error::io(&dir, e))?;
    for line in manifest.lines().take(6) {
        println!("{line}");
    }
    println!("...");

    let mut restored = Model::init(&ModelConfig {
        seed: 99,
        ..cfg.clone()
    })?;
    restored.load_checkpoint(&dir)?;
    let batch = source.batch_at(Split::Val, 0);
    let (a, _) = model.forward_loss(&batch)?;
    let (b, _) = restored.forward_loss(&batch)?;
    println!("val loss before save {a:.6}, after load {b:.6}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> stablelab::Result<()> {
    run_example()
}
