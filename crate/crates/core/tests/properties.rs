use proptest::prelude::*;
use stablelab::optim::{AdamW, LrSchedule, OptimizerConfig};
use stablelab::stability::cap_logits;
use stablelab::{
    capped_softmax, clipped_softmax, l2_norm, softmax, softmax_temp, spectral_norm, ParamSet, Tape,
    Tensor,
};

fn rows(max_w: usize) -> impl Strategy<Value = Tensor> {
    (1usize..4, 2usize..max_w).prop_flat_map(|(r, w)| {
        prop::collection::vec(-30.0f32..30.0, r * w)
            .prop_map(move |d| Tensor::new([r, w], d).unwrap())
    })
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in rows(20)) {
        let w = x.last_dim();
        for t in [softmax(&x), softmax_temp(&x, 0.5).unwrap(), capped_softmax(&x, 50.0).unwrap()] {
            for row in t.data().chunks(w) {
                let s: f64 = row.iter().map(|&p| f64::from(p)).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(x in rows(12), c in -20.0f32..20.0) {
        let (a, b) = (softmax(&x), softmax(&x.map(|v| v + c)));
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn temperature_and_capping_keep_the_argmax(x in rows(12), beta in 0.01f32..5.0, cap in 0.5f32..100.0) {
        let w = x.last_dim();
        let t = softmax_temp(&x, beta).unwrap();
        let c = capped_softmax(&x, cap).unwrap();
        for ((orig, a), b) in x.data().chunks(w).zip(t.data().chunks(w)).zip(c.data().chunks(w)) {
            let m = orig[argmax(orig)];
            // Ties after rounding are allowed, a strictly larger entry is not.
            prop_assert_eq!(a[argmax(orig)], a[argmax(a)]);
            prop_assert_eq!(b[argmax(orig)], b[argmax(b)]);
            prop_assert!(orig.iter().all(|&v| v <= m));
        }
    }

    #[test]
    fn capped_logits_stay_inside_the_cap(x in prop::collection::vec(-1e30f32..1e30, 1..64), cap in 0.1f32..100.0) {
        let n = x.len();
        let t = cap_logits(&Tensor::new([n], x).unwrap(), cap).unwrap();
        prop_assert!(t.data().iter().all(|v| v.abs() < cap));
    }

    #[test]
    fn clipped_softmax_is_bounded_with_dead_gradients_when_clipped(x in rows(10)) {
        let (zeta, gamma) = (1.03f32, -0.03f32);
        let y = clipped_softmax(&x, zeta, gamma).unwrap();
        prop_assert!(y.data().iter().all(|p| (0.0..=1.0).contains(p)));

        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let p = tape.softmax(xv);
        let out = tape.affine_clamp(p, zeta - gamma, gamma, 0.0, 1.0);
        prop_assert_eq!(tape.value(out), &y);
        // Gradient flowing back through a clipped entry only.
        let w = x.last_dim();
        for (i, &v) in y.data().iter().enumerate() {
            if v == 0.0 || v == 1.0 {
                let mut t = Tape::new();
                let xv = t.param(x.clone());
                let p = t.softmax(xv);
                let out = t.affine_clamp(p, zeta - gamma, gamma, 0.0, 1.0);
                let mut mask = vec![0.0; y.len()];
                mask[i] = 1.0;
                let m = t.constant(Tensor::new(y.shape().to_vec(), mask).unwrap());
                let picked = t.mul(out, m).unwrap();
                let s = t.sum(picked);
                t.backward(s).unwrap();
                let g = t.grad(xv).unwrap();
                let row = i / w;
                prop_assert!(g.data()[row * w..(row + 1) * w].iter().all(|&d| d == 0.0));
            }
        }
    }

    #[test]
    fn l2_norm_is_homogeneous(x in prop::collection::vec(-100.0f32..100.0, 1..200), c in -50.0f32..50.0) {
        let scaled: Vec<f32> = x.iter().map(|v| v * c).collect();
        let (a, b) = (l2_norm(&scaled), c.abs() * l2_norm(&x));
        prop_assert!((a - b).abs() <= 1e-5 * b.max(1e-30));
    }

    #[test]
    fn spectral_norm_is_homogeneous(
        d in prop::collection::vec(-1.0f32..1.0, 12),
        c in prop_oneof![-20.0f32..-0.05, 0.05f32..20.0],
    ) {
        let w = Tensor::new([4, 3], d).unwrap();
        let s = spectral_norm(&w, 2000, 1e-7).unwrap();
        let sc = spectral_norm(&w.scale(c), 2000, 1e-7).unwrap();
        prop_assert!((sc - c.abs() * s).abs() <= 1e-4 * (c.abs() * s).max(1e-6));
    }

    #[test]
    fn first_adam_step_ignores_gradient_scale(g in prop::collection::vec(-10.0f32..10.0, 1..16), k in 0.01f32..100.0) {
        // eps → 0 limit.
        let cfg = OptimizerConfig { eps: 1e-30, weight_decay: 0.0, ..OptimizerConfig::default() };
        let n = g.len();
        let step = |scale: f32| {
            let mut ps = ParamSet::new();
            ps.add("w", Tensor::zeros([n]), true);
            let mut opt = AdamW::new(cfg, &ps).unwrap();
            let grad = Tensor::new([n], g.iter().map(|v| v * scale).collect()).unwrap();
            opt.step(&mut ps, &[grad], 1e-2).unwrap();
            let w = ps.iter().next().unwrap().value.clone();
            w
        };
        let (a, b) = (step(1.0), step(k));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-9));
        }
    }

    #[test]
    fn schedule_stays_between_floor_and_peak(peak in 1e-5f32..1.0, total in 2u64..5000, step in 0u64..6000) {
        let s = LrSchedule::with_defaults(peak, total).unwrap();
        let lr = s.lr_at(step);
        prop_assert!(lr <= peak * (1.0 + 1e-6));
        if step >= s.warmup_steps {
            prop_assert!(lr >= s.min_lr * (1.0 - 1e-6));
        }
    }
}

#[test]
fn schedule_is_continuous_at_the_warmup_knot() {
    let s = LrSchedule::new(1e-2, 100, 1000, 1e-3).unwrap();
    let w = s.warmup_steps;
    // Left limit along the warmup line and right limit along the cosine.
    let left = f64::from(s.peak_lr) * w as f64 / w as f64;
    let right = f64::from(s.lr_at(w));
    assert!((left - right).abs() < 1e-9);
    assert!((f64::from(s.lr_at(w - 1)) - f64::from(s.peak_lr) * 99.0 / 100.0).abs() < 1e-9);
    let mid = s.lr_at(w + (s.total_steps - w) / 2);
    assert!((mid - (1e-2 + 1e-3) / 2.0).abs() < 1e-9);
}
