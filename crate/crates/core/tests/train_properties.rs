use carope::data::Corpus;
use carope::model::{EncodingKind, ModelConfig, TransformerState};
use carope::numcore::Tensor;
use carope::train::{loss_and_grads, lr_at, TrainConfig, Trainer};
use carope::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(encoding: EncodingKind) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        vocab_size: 40,
        max_context: 16,
        encoding,
        tie_embeddings: true,
        sinusoidal_scale: 1.0,
        seed: 7,
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        max_lr: 3e-3,
        min_lr: 3e-4,
        warmup_steps: 2,
        total_steps: 8,
        tokens_per_update: 64,
        batch_size: 2,
        seq_len: 16,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn corpus() -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let toks = (0..4000).map(|_| rng.random_range(0..40)).collect();
    Corpus::from_tokens(toks, 40, 0.9).unwrap()
}

fn trace(enc: EncodingKind) -> (Vec<f64>, Vec<u8>) {
    let c = corpus();
    let mut t = Trainer::new(
        TransformerState::<f32>::init(&model(enc)).unwrap(),
        train_cfg(),
    )
    .unwrap();
    let mut losses = Vec::new();
    t.run(&c, None, |s| losses.push(s.loss)).unwrap();
    (losses, t.encode())
}

#[test]
fn seeded_runs_repeat_exactly() {
    for enc in EncodingKind::ALL {
        let (a, ca) = trace(enc);
        let (b, cb) = trace(enc);
        assert_eq!(a, b, "{enc}");
        assert_eq!(ca, cb, "{enc}");
        assert_eq!(a.len(), 8);
    }
}

#[test]
fn checkpoint_round_trip_resumes_identically() {
    let c = corpus();
    let mut straight = Trainer::new(
        TransformerState::<f32>::init(&model(EncodingKind::Carope)).unwrap(),
        train_cfg(),
    )
    .unwrap();
    for _ in 0..4 {
        straight.train_step(&c).unwrap();
    }
    let bytes = straight.encode();
    let mut resumed = Trainer::<f32>::decode(&bytes).unwrap();
    assert_eq!(resumed.encode(), bytes);
    for (p, q) in straight.state.params().iter().zip(resumed.state.params()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.value), bits(&q.value), "{}", p.name);
    }
    for _ in 0..4 {
        let a = straight.train_step(&c).unwrap();
        let b = resumed.train_step(&c).unwrap();
        assert!((a.loss - b.loss).abs() <= 1e-7);
    }
    assert_eq!(straight.encode(), resumed.encode());
}

#[test]
fn checkpoint_version_is_checked() {
    let t = Trainer::new(
        TransformerState::<f32>::init(&model(EncodingKind::Rope)).unwrap(),
        train_cfg(),
    )
    .unwrap();
    let mut bytes = t.encode();
    bytes[4] = 9;
    let err = Trainer::<f32>::decode(&bytes).unwrap_err();
    assert!(matches!(
        err,
        Error::Version {
            found: 9,
            expected: 1
        }
    ));
    assert!(Trainer::<f64>::decode(&t.encode()).is_err());
}

#[test]
fn nan_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.caro");
    let c = corpus();
    let cfg = TrainConfig {
        checkpoint_every: 1,
        total_steps: 3,
        ..train_cfg()
    };
    let mut t = Trainer::new(
        TransformerState::<f32>::init(&model(EncodingKind::Rope)).unwrap(),
        cfg,
    )
    .unwrap();
    t.run(&c, Some(&path), |_| {}).unwrap();
    let before = std::fs::read(&path).unwrap();
    t.cfg.total_steps = 6;
    t.state.param_mut("ln_f.gain").unwrap().value.data_mut()[0] = f32::NAN;
    let err = t.run(&c, Some(&path), |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert_eq!(std::fs::read(&path).unwrap(), before);
}

#[test]
fn accumulated_micro_batches_match_one_large_batch() {
    let c = corpus();
    let state = TransformerState::<f32>::init(&model(EncodingKind::Carope)).unwrap();
    let starts: Vec<usize> = (0..8).map(|i| 37 * i + 5).collect();
    let big = c.batch_at(&starts, 16);
    let (_, g_big) = loss_and_grads(&state, &big, &[]).unwrap();
    let mut acc: Vec<Vec<f64>> = g_big
        .iter()
        .map(|g| vec![0.0; g.as_ref().unwrap().numel()])
        .collect();
    for chunk in starts.chunks(2) {
        let (_, g) = loss_and_grads(&state, &c.batch_at(chunk, 16), &[]).unwrap();
        for (a, g) in acc.iter_mut().zip(g) {
            for (x, v) in a.iter_mut().zip(g.unwrap().data()) {
                *x += *v as f64 / 4.0;
            }
        }
    }
    for (a, g) in acc.iter().zip(&g_big) {
        let g = g.as_ref().unwrap();
        let scale = g
            .data()
            .iter()
            .map(|v| v.abs() as f64)
            .fold(0.0, f64::max)
            .max(1e-12);
        let diff = a
            .iter()
            .zip(g.data())
            .map(|(x, y)| (x - *y as f64).abs())
            .fold(0.0, f64::max);
        assert!(diff / scale <= 1e-5, "{diff} / {scale}");
    }
}

proptest! {
    #[test]
    fn schedule_is_bounded_and_shaped(
        warmup in 1usize..500,
        extra in 1usize..2000,
        max_lr in 1e-5f64..1e-2,
        frac in 0.0f64..1.0,
    ) {
        let cfg = TrainConfig {
            max_lr,
            min_lr: max_lr * frac,
            warmup_steps: warmup,
            total_steps: warmup + extra,
            ..TrainConfig::default()
        };
        // continuous at the warmup boundary
        prop_assert!((lr_at(warmup - 1, &cfg) - lr_at(warmup, &cfg)).abs() <= 1e-15);
        let mut prev = 0.0;
        for s in 0..warmup {
            let lr = lr_at(s, &cfg);
            prop_assert!(lr > prev);
            prev = lr;
        }
        for s in warmup..=warmup + extra + 3 {
            let lr = lr_at(s, &cfg);
            prop_assert!(lr <= prev + 1e-18);
            prop_assert!(lr >= cfg.min_lr - 1e-18 && lr <= max_lr + 1e-18);
            prev = lr;
        }
    }
}
