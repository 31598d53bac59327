use carope::numcore::{Scalar, Tape, Tensor};
use carope::posenc::{
    apply_rotary, carope_base_freq, carope_init_rope, carope_phases, carope_phases_composed,
    rope_phases, CaropeVars, FreqTensor, PhaseTensor, RotaryConfig, DEFAULT_BASE,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Max |CARoPE-at-init phases - RoPE phases| over a random embedding batch.
fn init_equivalence_gap<T: Scalar>(d_head: usize, n_heads: usize, seq: usize, seed: u64) -> f64 {
    let cfg = RotaryConfig::new(d_head, n_heads, DEFAULT_BASE).unwrap();
    let d_model = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<T>::from_fn(&[2, seq, d_model], |_| {
        T::from_f64(rng.random_range(-3.0..3.0))
    });
    let params = carope_init_rope::<T>(&cfg, d_model);
    let mut tape = Tape::<T>::new();
    let xv = tape.constant(x);
    let vars = CaropeVars {
        w: tape.param(params.w),
        b: tape.param(params.b),
    };
    let f = carope_base_freq(&mut tape, xv, vars, &cfg).unwrap();
    let cp = carope_phases(&mut tape, f, &cfg).unwrap();
    let rp = rope_phases(&mut tape, 2, seq, &cfg);
    tape.value(cp.values).max_abs_diff(tape.value(rp.values))
}

#[test]
fn carope_init_matches_rope_phases() {
    for d_head in [4, 8, 16, 64] {
        for (seq, seed) in [(1, 0), (17, 1), (128, 2)] {
            let g32 = init_equivalence_gap::<f32>(d_head, 2, seq, seed);
            let g64 = init_equivalence_gap::<f64>(d_head, 2, seq, seed);
            assert!(g32 <= 1e-5, "f32 d_head={d_head} seq={seq}: {g32:e}");
            assert!(g64 <= 1e-9, "f64 d_head={d_head} seq={seq}: {g64:e}");
        }
    }
}

/// Rotary dot product of `q` placed at `m` and `k` placed at `n`.
fn rotary_score(q: &[f64], k: &[f64], m: usize, n: usize, cfg: &RotaryConfig) -> f64 {
    let len = m.max(n) + 1;
    let d = cfg.d_head();
    let mut tape = Tape::<f64>::new();
    let mut qs = Tensor::<f64>::zeros(&[1, 1, len, d]);
    let mut ks = Tensor::<f64>::zeros(&[1, 1, len, d]);
    for j in 0..d {
        qs.set(&[0, 0, m, j], q[j]);
        ks.set(&[0, 0, n, j], k[j]);
    }
    let ph = rope_phases(&mut tape, 1, len, cfg);
    let qv = tape.constant(qs);
    let kv = tape.constant(ks);
    let qr = apply_rotary(&mut tape, qv, ph).unwrap();
    let kr = apply_rotary(&mut tape, kv, ph).unwrap();
    let (qr, kr) = (tape.value(qr), tape.value(kr));
    (0..d)
        .map(|j| qr.get(&[0, 0, m, j]) * kr.get(&[0, 0, n, j]))
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rope_scores_depend_only_on_offset(
        seed in any::<u64>(),
        m in 0usize..24,
        n in 0usize..24,
        s in 0usize..8,
        d_half in 1usize..=4,
    ) {
        let cfg = RotaryConfig::new(2 * d_half, 1, DEFAULT_BASE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<f64> = (0..cfg.d_head()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..cfg.d_head()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = rotary_score(&q, &k, m, n, &cfg);
        let b = rotary_score(&q, &k, m + s, n + s, &cfg);
        prop_assert!((a - b).abs() <= 1e-5);
    }

    #[test]
    fn rotation_preserves_pair_norms(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[2, 2, 5, 6], |_| rng.random_range(-3.0..3.0));
        let p = Tensor::<f64>::from_fn(&[2, 2, 5, 3], |_| rng.random_range(-10.0..10.0));
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let pv = tape.constant(p);
        let out = apply_rotary(&mut tape, xv, PhaseTensor { values: pv }).unwrap();
        let o = tape.value(out).data();
        for (a, b) in x.data().chunks(2).zip(o.chunks(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            prop_assert!((na - nb).abs() <= 1e-6);
        }
    }

    #[test]
    fn fused_phases_match_composed_ops(seed in any::<u64>(), seq in 1usize..40) {
        let cfg = RotaryConfig::new(16, 2, DEFAULT_BASE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::<f64>::from_fn(&[2, 2, seq], |_| rng.random_range(0.01..0.999));
        let mut tape = Tape::<f64>::new();
        let fv = tape.constant(f);
        let a = carope_phases(&mut tape, FreqTensor { values: fv }, &cfg).unwrap();
        let b = carope_phases_composed(&mut tape, FreqTensor { values: fv }, &cfg).unwrap();
        let (a, b) = (tape.value(a.values), tape.value(b.values));
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{} vs {}", x, y);
        }
    }

    #[test]
    fn carope_freqs_bounded_and_phases_monotone(seed in any::<u64>(), f32_mode in any::<bool>()) {
        if f32_mode {
            check_bounded_monotone::<f32>(seed)?;
        } else {
            check_bounded_monotone::<f64>(seed)?;
        }
    }

    #[test]
    fn carope_phases_are_causal_and_context_sensitive(seed in any::<u64>(), t in 1usize..10) {
        let cfg = RotaryConfig::new(8, 2, DEFAULT_BASE).unwrap();
        let (seq, d_model) = (12, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[1, seq, d_model], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::<f64>::from_fn(&[d_model, 2], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn(&[2], |_| rng.random_range(-1.0..1.0));
        let mut x2 = x.clone();
        for j in 0..d_model {
            x2.set(&[0, t, j], rng.random_range(-1.0..1.0));
        }
        let phases = |x: Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x);
            let vars = CaropeVars { w: tape.param(w.clone()), b: tape.param(b.clone()) };
            let f = carope_base_freq(&mut tape, xv, vars, &cfg).unwrap();
            let p = carope_phases(&mut tape, f, &cfg).unwrap();
            tape.value(p.values).clone()
        };
        let (p1, p2) = (phases(x), phases(x2));
        let mut later_differs = false;
        for h in 0..2 {
            for p in 0..seq {
                for i in 0..4 {
                    let (a, c) = (p1.get(&[0, h, p, i]), p2.get(&[0, h, p, i]));
                    if p <= t {
                        prop_assert_eq!(a, c);
                    } else if a != c {
                        later_differs = true;
                    }
                }
            }
        }
        prop_assert!(later_differs);
    }
}

fn check_bounded_monotone<T: Scalar>(seed: u64) -> Result<(), TestCaseError> {
    let cfg = RotaryConfig::new(8, 3, DEFAULT_BASE).unwrap();
    let (seq, d_model) = (20, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<T>::from_fn(&[2, seq, d_model], |_| {
        T::from_f64(if rng.random_bool(0.5) { 1e3 } else { -1e3 })
    });
    let w = Tensor::<T>::from_fn(&[d_model, 3], |_| T::from_f64(rng.random_range(-2.0..2.0)));
    let b = Tensor::<T>::from_fn(&[3], |_| T::from_f64(rng.random_range(-2.0..2.0)));
    let mut tape = Tape::<T>::new();
    let xv = tape.constant(x);
    let vars = CaropeVars {
        w: tape.param(w),
        b: tape.param(b),
    };
    let f = carope_base_freq(&mut tape, xv, vars, &cfg).unwrap();
    for &v in tape.value(f.values).data() {
        prop_assert!(v > T::ZERO && v < T::ONE, "f = {}", v);
    }
    let p = carope_phases(&mut tape, f, &cfg).unwrap();
    let pv = tape.value(p.values);
    for bi in 0..2 {
        for h in 0..3 {
            for i in 0..4 {
                for t in 1..seq {
                    prop_assert!(pv.get(&[bi, h, t, i]) >= pv.get(&[bi, h, t - 1, i]));
                }
            }
        }
    }
    Ok(())
}
