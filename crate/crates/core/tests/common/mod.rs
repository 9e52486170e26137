#![allow(dead_code)]

use stablelab::data::{BatchSource, Split};
use stablelab::{DataConfig, Model, ModelConfig, StabilityVariant, TokenBatch};

/// vocab 11, seq 4, hidden 8, 2 heads, 1 block.
pub fn fd_config(variant: StabilityVariant) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        seq_len: 4,
        hidden: 8,
        layers: 1,
        heads: 2,
        seed: 5,
        variant,
        ..ModelConfig::default()
    }
}

pub fn batch_for(cfg: &ModelConfig, rows: usize, index: u64) -> TokenBatch {
    let data = DataConfig {
        batch_size: rows,
        branching: 3,
        ..DataConfig::default()
    };
    BatchSource::new(&data, cfg.vocab_size, cfg.seq_len)
        .unwrap()
        .batch_at(Split::Train, index)
}

/// A coordinate whose analytic and central-difference derivatives disagree.
#[derive(Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares backprop gradients of the mean cross-entropy with central
/// differences on every coordinate of the parameters selected by `which`.
/// Returns the number of coordinates checked and the mismatches.
pub fn check_gradients(
    model: &mut Model,
    batch: &TokenBatch,
    which: impl Fn(&str) -> bool,
    h: f32,
    abs_tol: f64,
    rel_tol: f64,
) -> (usize, Vec<Mismatch>) {
    let mut pass = model.forward(batch).unwrap();
    pass.backward().unwrap();
    let grads = pass.grads();
    let mut checked = 0;
    let mut bad = Vec::new();
    let n = model.params().len();
    for p in 0..n {
        let name = model.params().iter().nth(p).unwrap().name.clone();
        if !which(&name) {
            continue;
        }
        let len = grads[p].len();
        for i in 0..len {
            let eval = |m: &mut Model, delta: f32| {
                let orig = m.params().iter().nth(p).unwrap().value.data()[i];
                // Round-trip through the stored value so the divisor is the
                // step actually applied in f32.
                m.params_mut().iter_mut().nth(p).unwrap().value.data_mut()[i] = orig + delta;
                let applied = m.params().iter().nth(p).unwrap().value.data()[i] - orig;
                let (loss, _) = m.forward_loss(batch).unwrap();
                m.params_mut().iter_mut().nth(p).unwrap().value.data_mut()[i] = orig;
                (f64::from(loss), f64::from(applied))
            };
            let (lp, dp) = eval(model, h);
            let (lm, dm) = eval(model, -h);
            let numeric = (lp - lm) / (dp - dm);
            let analytic = f64::from(grads[p].data()[i]);
            checked += 1;
            if (analytic - numeric).abs() > abs_tol.max(rel_tol * numeric.abs()) {
                bad.push(Mismatch {
                    param: name.clone(),
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    (checked, bad)
}
