use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stablelab::attention::LayerKind;
use stablelab::tensor::layer_norm;
use stablelab::{
    finite_diff_grad, ModelConfig, ParamSet, StabilityVariant, Tape, Tensor, TransformerBlock,
    VariantKind,
};

fn small(variant: StabilityVariant) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        seq_len: 4,
        hidden: 8,
        layers: 1,
        heads: 2,
        seed: 9,
        variant,
        ..ModelConfig::default()
    }
}

struct Run {
    tape: Tape,
    out: stablelab::Var,
    x: stablelab::Var,
    trace: stablelab::BlockTrace,
}

fn run_block(
    params: &ParamSet,
    block: &TransformerBlock,
    x: &Tensor,
    batch: usize,
    seq: usize,
) -> Run {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let xv = tape.param(x.clone());
    let (out, trace) = block.forward(&mut tape, &vars, xv, batch, seq).unwrap();
    Run {
        tape,
        out,
        x: xv,
        trace,
    }
}

fn input(rows: usize, hidden: usize, std: f32, seed: u64) -> Tensor {
    Tensor::randn([rows, hidden], std, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn weight<'a>(params: &'a ParamSet, name: &str) -> &'a Tensor {
    &params.get(params.find(name).unwrap()).value
}

#[test]
fn single_token_attends_to_itself() {
    for variant in StabilityVariant::all() {
        if variant.kind == VariantKind::SoftClip {
            continue;
        }
        let cfg = small(variant);
        let (params, block) = TransformerBlock::standalone(&cfg).unwrap();
        let r = run_block(&params, &block, &input(3, 8, 1.0, 1), 3, 1);
        let w = r.tape.value(r.trace.attention_weights);
        assert!(w.data().iter().all(|&p| p == 1.0), "{}", variant.kind);
        // With one position the attention output is V itself, so the Proj
        // input equals the V slice of the fused QKV output (after its LN
        // when present).
        if variant.kind != VariantKind::QkvNorm {
            let fused = r.tape.value(r.trace.layer(LayerKind::Qkv).y);
            let merged = r.tape.value(r.trace.layer(LayerKind::Proj).x);
            for row in 0..3 {
                assert_eq!(
                    &fused.data()[row * 24 + 16..row * 24 + 24],
                    &merged.data()[row * 8..row * 8 + 8]
                );
            }
        }
    }
}

#[test]
fn zero_queries_average_the_visible_values() {
    let cfg = small(StabilityVariant::default());
    let (mut params, block) = TransformerBlock::standalone(&cfg).unwrap();
    let id = params.find("blocks.0.attn.qkv.weight").unwrap();
    params.get_mut(id).value.data_mut()[..8 * 8].fill(0.0);
    let seq = 4;
    let r = run_block(&params, &block, &input(seq, 8, 1.0, 2), 1, seq);
    let fused = r.tape.value(r.trace.layer(LayerKind::Qkv).y);
    let merged = r.tape.value(r.trace.layer(LayerKind::Proj).x);
    for t in 0..seq {
        for c in 0..8 {
            let mean: f32 =
                (0..=t).map(|s| fused.data()[s * 24 + 16 + c]).sum::<f32>() / (t + 1) as f32;
            assert!((merged.data()[t * 8 + c] - mean).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    for variant in StabilityVariant::all() {
        let cfg = small(variant);
        let (params, block) = TransformerBlock::standalone(&cfg).unwrap();
        let r = run_block(&params, &block, &input(8, 8, 3.0, 3), 2, 4);
        let w = r.tape.value(r.trace.attention_weights);
        for row in w.data().chunks(4) {
            assert!(
                row.iter().all(|p| (0.0..=1.0).contains(p)),
                "{}",
                variant.kind
            );
            if variant.kind != VariantKind::SoftClip {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "{}: {s}", variant.kind);
            }
        }
    }
}

#[test]
fn zero_branches_make_the_block_an_identity() {
    for kind in [
        VariantKind::Baseline,
        VariantKind::QkNorm,
        VariantKind::LayerScale,
    ] {
        let cfg = small(StabilityVariant::new(kind));
        let (mut params, block) = TransformerBlock::standalone(&cfg).unwrap();
        for name in ["blocks.0.attn.proj.weight", "blocks.0.ff.fc2.weight"] {
            let id = params.find(name).unwrap();
            params.get_mut(id).value.data_mut().fill(0.0);
        }
        let x = input(4, 8, 1.0, 4);
        let r = run_block(&params, &block, &x, 1, 4);
        assert_eq!(r.tape.value(r.out), &x, "{kind}");
    }
}

#[test]
fn normalized_outputs_ignore_input_scale() {
    let sites: [(VariantKind, &[(LayerKind, &str)]); 2] = [
        (VariantKind::QkvNorm, &[(LayerKind::Qkv, "qkv_norm")]),
        (
            VariantKind::QkFcNorm,
            &[(LayerKind::Proj, "proj_norm"), (LayerKind::Fc2, "fc2_norm")],
        ),
    ];
    for (kind, layers) in sites {
        let cfg = small(StabilityVariant::new(kind));
        let (params, block) = TransformerBlock::standalone(&cfg).unwrap();
        let x = input(8, 8, 1.0, 5);
        for &(layer, site) in layers {
            let normed = |scale: f32| {
                let r = run_block(&params, &block, &x.scale(scale), 2, 4);
                let y = r.tape.value(r.trace.layer(layer).y);
                let gain = weight(&params, &format!("blocks.0.{site}.gain"));
                let bias = weight(&params, &format!("blocks.0.{site}.bias"));
                layer_norm(y, gain, bias, cfg.ln_eps).unwrap().l2_norm()
            };
            let ratio = normed(100.0) / normed(1.0);
            assert!((ratio - 1.0).abs() < 0.01, "{kind} {site}: {ratio}");
        }
    }
}

#[test]
fn qk_norm_attention_is_scale_invariant() {
    for kind in [
        VariantKind::QkvNorm,
        VariantKind::QkFcNorm,
        VariantKind::QkNorm,
    ] {
        let cfg = small(StabilityVariant::new(kind));
        let (params, block) = TransformerBlock::standalone(&cfg).unwrap();
        // Base scale well above the LN eps so only the invariance is tested.
        let x = input(8, 8, 10.0, 6);
        let w = |s: f32| {
            let r = run_block(&params, &block, &x.scale(s), 2, 4);
            r.tape.value(r.trace.attention_weights).clone()
        };
        let (a, b) = (w(1.0), w(100.0));
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f32::max);
        assert!(diff < 1e-3, "{kind}: {diff}");
    }
}

#[test]
fn large_inputs_stay_finite() {
    for variant in StabilityVariant::all() {
        let cfg = small(variant);
        let (params, block) = TransformerBlock::standalone(&cfg).unwrap();
        let mut r = run_block(&params, &block, &input(8, 8, 100.0, 7), 2, 4);
        let s = r.tape.sum(r.out);
        r.tape.backward(s).unwrap();
        assert!(r.tape.value(r.out).is_finite(), "{}", variant.kind);
        assert!(r.tape.grad(r.x).unwrap().is_finite(), "{}", variant.kind);
    }
}

#[test]
fn block_input_gradient_matches_finite_differences() {
    for variant in StabilityVariant::all() {
        let cfg = small(variant);
        let (params, block) = TransformerBlock::standalone(&cfg).unwrap();
        let x = input(8, 8, 1.0, 8);
        let probe = input(8, 8, 1.0, 80);
        let objective = |t: &mut Tape, out| {
            let p = t.constant(probe.clone());
            let m = t.mul(out, p).unwrap();
            t.sum(m)
        };
        let mut r = run_block(&params, &block, &x, 2, 4);
        let root = objective(&mut r.tape, r.out);
        r.tape.backward(root).unwrap();
        let analytic = r.tape.grad(r.x).unwrap().clone();
        let numeric = finite_diff_grad(
            |xp| {
                let mut r = run_block(&params, &block, xp, 2, 4);
                let root = objective(&mut r.tape, r.out);
                f64::from(r.tape.scalar(root))
            },
            &x,
            1e-2,
        )
        .unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let tol = 1e-3f32.max(1e-2 * n.abs());
            assert!((a - n).abs() <= tol, "{}: {a} vs {n}", variant.kind);
        }
    }
}
