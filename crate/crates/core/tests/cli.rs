use std::fs;
use std::path::{Path, PathBuf};

use carope::cli::{
    run_from, CHECKPOINT_FILE, EFFECTIVE_CONFIG_FILE, EXIT_NUMERIC, EXIT_USAGE, TRACE_FILE,
};
use carope::model::{EncodingKind, ModelConfig, TransformerState};
use carope::posenc::{rope_theta, RotaryConfig, DEFAULT_BASE};
use carope::train::{TrainConfig, Trainer};

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

fn run(args: &[&str]) -> (u8, String) {
    let mut buf = Vec::new();
    let mut all = vec!["carope"];
    all.extend_from_slice(args);
    let code = run_from(all, &mut buf);
    (code, String::from_utf8(buf).unwrap())
}

/// A small text corpus and a matching quick config.
fn setup(dir: &Path) -> PathBuf {
    let text = fs::read(repo_file("data/canterbury.txt")).unwrap();
    fs::write(dir.join("corpus.txt"), &text[..60_000]).unwrap();
    let cfg = dir.join("quick.cfg");
    fs::write(
        &cfg,
        "# quick run\nn_layers = 1\nn_heads = 2\nd_model = 16\nmax_context = 16\n\
         seq_len = 16\nbatch_size = 2\ntokens_per_update = 32\nwarmup_steps = 2\n\
         total_steps = 6\ncorpus = corpus.txt\n",
    )
    .unwrap();
    cfg
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_checkpoint_trace_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("run");
    let (code, text) = run(&[
        "train",
        "--config",
        s(&cfg),
        "--encoding",
        "carope",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0, "{text}");
    assert!(out.join(CHECKPOINT_FILE).exists());
    let trace = fs::read_to_string(out.join(TRACE_FILE)).unwrap();
    let lines: Vec<_> = trace.lines().collect();
    assert_eq!(lines.len(), 6);
    for (i, l) in lines.iter().enumerate() {
        let f: Vec<&str> = l.split(' ').collect();
        assert_eq!(f[0], format!("step={}", i + 1));
        assert!(f[1].starts_with("loss=") && f[1][5..].parse::<f64>().is_ok());
        assert!(f[2].starts_with("lr=") && f[3].starts_with("toks_per_sec="));
    }
    let eff = fs::read_to_string(out.join(EFFECTIVE_CONFIG_FILE)).unwrap();
    assert!(eff.contains("encoding = carope"));
    assert!(eff.contains("d_model = 16"));
}

#[test]
fn same_config_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        let (code, text) = run(&["train", "--config", s(&cfg), "--seed", "4", "--out", s(o)]);
        assert_eq!(code, 0, "{text}");
    }
    assert_eq!(
        fs::read(a.join(CHECKPOINT_FILE)).unwrap(),
        fs::read(b.join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn eval_reports_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let mut ckpts = Vec::new();
    for enc in EncodingKind::ALL {
        let out = dir.path().join(enc.name());
        let (code, text) = run(&[
            "train",
            "--config",
            s(&cfg),
            "--encoding",
            enc.name(),
            "--steps",
            "2",
            "--out",
            s(&out),
        ]);
        assert_eq!(code, 0, "{text}");
        ckpts.push(out.join(CHECKPOINT_FILE).to_str().unwrap().to_string());
    }
    let emit = dir.path().join("records.txt");
    let list = ckpts.join(",");
    let corpus = dir.path().join("corpus.txt");
    let (code, text) = run(&[
        "eval",
        "--checkpoint",
        &list,
        "--corpus",
        s(&corpus),
        "--lengths",
        "16,32",
        "--emit",
        s(&emit),
    ]);
    assert_eq!(code, 0, "{text}");
    let records = fs::read_to_string(&emit).unwrap();
    assert_eq!(records.lines().count(), 8);
    for enc in ["sinusoidal", "learnable"] {
        assert!(records.contains(&format!(
            "encoding={enc} seq_len=32 metric=perplexity value=unsupported"
        )));
    }
    for enc in ["rope", "carope"] {
        let line = records
            .lines()
            .find(|l| l.starts_with(&format!("encoding={enc} seq_len=32 ")))
            .unwrap();
        let v: f64 = line.split(' ').nth(3).unwrap()[6..].parse().unwrap();
        assert!(v.is_finite() && v >= 1.0);
    }
    let learnable_row = text.lines().find(|l| l.starts_with("learnable")).unwrap();
    assert!(learnable_row.trim_end().ends_with('-'), "{text}");
}

#[test]
fn gradcheck_on_shipped_config_passes() {
    let cfg = repo_file("configs/gradcheck.cfg");
    let (code, text) = run(&["gradcheck", "--config", s(&cfg)]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("carope.w") && text.contains("carope.b"));
    let (code, text) = run(&["gradcheck", "--config", s(&cfg), "--encoding", "rope"]);
    assert_eq!(code, 0, "{text}");
    assert!(!text.contains("carope."));
}

#[test]
fn gradcheck_failure_is_numeric_exit() {
    let cfg = repo_file("configs/gradcheck.cfg");
    let (code, text) = run(&["gradcheck", "--config", s(&cfg), "--tolerance", "1e-14"]);
    assert_eq!(code, EXIT_NUMERIC, "{text}");
}

#[test]
fn inspect_fresh_carope_reports_theta_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fresh.caro");
    let cfg = ModelConfig::default();
    let t = Trainer::new(
        TransformerState::<f32>::init(&cfg).unwrap(),
        TrainConfig::default(),
    )
    .unwrap();
    t.save(&path).unwrap();
    let (code, text) = run(&["inspect", "--checkpoint", s(&path)]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains(&format!("parameters = {}", cfg.param_count())));
    let theta1 = rope_theta(1, &RotaryConfig::new(32, 2, DEFAULT_BASE).unwrap()).unwrap();
    let heads: Vec<&str> = text
        .lines()
        .filter(|l| l.trim_start().starts_with("head "))
        .collect();
    assert_eq!(heads.len(), 2);
    for h in heads {
        let mean: f64 = h
            .split("mean=")
            .nth(1)
            .unwrap()
            .split(' ')
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert!((mean - theta1).abs() <= 1e-5, "{h}");
    }
}

#[test]
fn version_mismatch_is_refused_with_versions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("old.caro");
    let t = Trainer::new(
        TransformerState::<f32>::init(&ModelConfig::default()).unwrap(),
        TrainConfig::default(),
    )
    .unwrap();
    let mut bytes = t.encode();
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    let (code, text) = run(&["inspect", "--checkpoint", s(&path)]);
    assert_eq!(code, EXIT_USAGE);
    assert!(text.contains('7') && text.contains('1'), "{text}");
}

#[test]
fn config_errors_stop_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("never");
    let (code, text) = run(&[
        "train",
        "--config",
        s(&cfg),
        "--encoding",
        "learnable",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0, "{text}");
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "d_model = 15\n").unwrap();
    let out2 = dir.path().join("never2");
    let (code, text) = run(&["train", "--config", s(&bad), "--out", s(&out2)]);
    assert_eq!(code, EXIT_USAGE);
    assert!(text.contains("d_model"), "{text}");
    assert!(!out2.exists());
}

#[test]
fn bench_compare_reports_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let emit = dir.path().join("bench.txt");
    let (code, text) = run(&[
        "bench",
        "--config",
        s(&cfg),
        "--warmup",
        "1",
        "--timed",
        "3",
        "--emit",
        s(&emit),
    ]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("ratio carope/rope"));
    let rec = fs::read_to_string(&emit).unwrap();
    assert_eq!(rec.lines().count(), 2);
    assert!(rec.contains("encoding=rope") && rec.contains("encoding=carope"));
    assert!(rec.contains("metric=tokens_per_sec"));
}
