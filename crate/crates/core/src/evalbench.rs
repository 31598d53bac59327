//! Perplexity across context lengths, the encoding x length report,
//! training-step throughput, and the finite-difference gradient checker.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Corpus, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{EncodingKind, ModelConfig, TransformerState};
use crate::numcore::{Scalar, Tape};
use crate::train::{loss_and_grads, TrainConfig, Trainer};

/// Windows per forward pass during evaluation.
pub const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Perplexity,
    TokensPerSec,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Perplexity => "perplexity",
            Metric::TokensPerSec => "tokens_per_sec",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub encoding: EncodingKind,
    pub seq_len: usize,
    pub metric: Metric,
    /// `None` marks a length the encoding cannot represent.
    pub value: Option<f64>,
    pub n_tokens: usize,
    pub wall_seconds: f64,
}

impl MetricsRecord {
    pub fn is_supported(&self) -> bool {
        self.value.is_some()
    }

    /// `encoding=<kind> seq_len=<int> metric=<name> value=<float> n_tokens=<int> wall_s=<float>`;
    /// an unsupported cell has `value=unsupported`.
    pub fn record_line(&self) -> String {
        let value = match self.value {
            Some(v) => v.to_string(),
            None => "unsupported".into(),
        };
        format!(
            "encoding={} seq_len={} metric={} value={} n_tokens={} wall_s={:.6}",
            self.encoding,
            self.seq_len,
            self.metric.name(),
            value,
            self.n_tokens,
            self.wall_seconds
        )
    }
}

/// Summed token cross-entropy (nats) and token count over a set of batches.
pub fn total_cross_entropy<T: Scalar>(
    state: &TransformerState<T>,
    batches: impl IntoIterator<Item = TokenBatch>,
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for b in batches {
        let mut tape = Tape::new();
        let bound = state.bind(&mut tape, &[]);
        let loss = state.loss(&mut tape, &bound, &b.inputs, &b.targets, b.batch, b.seq_len)?;
        let n = b.batch * b.seq_len;
        total += tape.value(loss).item().to_f64() * n as f64;
        count += n;
    }
    Ok((total, count))
}

/// `exp(mean token cross-entropy)` over every eval window of `seq_len`.
/// Additive encodings past their table length yield an unsupported record.
pub fn perplexity<T: Scalar>(
    state: &TransformerState<T>,
    corpus: &Corpus,
    seq_len: usize,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let cfg = state.config();
    let windows = corpus.eval_windows(seq_len)?;
    let mut rec = MetricsRecord {
        encoding: cfg.encoding,
        seq_len,
        metric: Metric::Perplexity,
        value: None,
        n_tokens: 0,
        wall_seconds: 0.0,
    };
    if !cfg.encoding.is_rotary() && seq_len > cfg.max_context {
        return Ok(rec);
    }
    let (total, count) = total_cross_entropy(state, windows.batches(corpus, EVAL_BATCH))?;
    if count == 0 {
        return Err(Error::Config(format!(
            "no eval windows of length {seq_len}"
        )));
    }
    rec.value = Some((total / count as f64).exp());
    rec.n_tokens = count;
    rec.wall_seconds = start.elapsed().as_secs_f64();
    Ok(rec)
}

/// Encodings x lengths grid of perplexities. Each cell carries its own
/// result; a failing cell does not stop the others.
#[derive(Debug)]
pub struct Report {
    pub lengths: Vec<usize>,
    /// `(row label, cells in length order)`.
    pub rows: Vec<(String, Vec<Result<MetricsRecord>>)>,
}

pub fn extrapolation_report<T: Scalar>(
    states: &[(&str, &TransformerState<T>)],
    corpus: &Corpus,
    lengths: &[usize],
) -> Report {
    let rows = states
        .iter()
        .map(|(label, s)| {
            let cells = lengths.iter().map(|&l| perplexity(s, corpus, l)).collect();
            (label.to_string(), cells)
        })
        .collect();
    Report {
        lengths: lengths.to_vec(),
        rows,
    }
}

impl Report {
    pub fn records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.rows
            .iter()
            .flat_map(|(_, cells)| cells.iter().filter_map(|c| c.as_ref().ok()))
    }

    pub fn cell(&self, label: &str, seq_len: usize) -> Option<&Result<MetricsRecord>> {
        let col = self.lengths.iter().position(|&l| l == seq_len)?;
        let (_, cells) = self.rows.iter().find(|(l, _)| l == label)?;
        cells.get(col)
    }

    /// Newline-terminated record lines for every computed cell.
    pub fn record_lines(&self) -> String {
        self.records().map(|r| r.record_line() + "\n").collect()
    }

    pub fn has_errors(&self) -> bool {
        self.rows.iter().any(|(_, c)| c.iter().any(|c| c.is_err()))
    }
}

impl fmt::Display for Report {
    /// Aligned columns; `-` marks an unsupported cell.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label_w = self
            .rows
            .iter()
            .map(|(l, _)| l.len())
            .chain(["encoding".len()])
            .max()
            .unwrap_or(8);
        let col_w = 12;
        write!(f, "{:<label_w$}", "encoding")?;
        for l in &self.lengths {
            write!(f, " {:>col_w$}", format!("ppl@{l}"))?;
        }
        writeln!(f)?;
        for (label, cells) in &self.rows {
            write!(f, "{label:<label_w$}")?;
            for c in cells {
                let s = match c {
                    Ok(MetricsRecord { value: Some(v), .. }) => format!("{v:.4}"),
                    Ok(_) => "-".into(),
                    Err(_) => "error".into(),
                };
                write!(f, " {s:>col_w$}")?;
            }
            writeln!(f)?;
        }
        for (label, cells) in &self.rows {
            for (l, c) in self.lengths.iter().zip(cells) {
                if let Err(e) = c {
                    writeln!(f, "{label} @ {l}: {e}")?;
                }
            }
        }
        Ok(())
    }
}

/// Median tokens/sec over `n_timed` full training steps (forward, backward
/// and optimizer) after `n_warmup` discarded steps, on seeded random tokens.
pub fn throughput_bench(
    model: &ModelConfig,
    train: &TrainConfig,
    encoding: EncodingKind,
    n_warmup: usize,
    n_timed: usize,
) -> Result<MetricsRecord> {
    if n_timed < 3 {
        return Err(Error::Config(format!(
            "n_timed must be at least 3, got {n_timed}"
        )));
    }
    let model = ModelConfig {
        encoding,
        ..model.clone()
    };
    let mut tc = train.clone();
    tc.total_steps = tc.total_steps.max(n_warmup + n_timed + 1);
    tc.warmup_steps = tc.warmup_steps.min(tc.total_steps - 1);
    let state = TransformerState::<f32>::init(&model)?;
    let mut trainer = Trainer::new(state, tc.clone())?;
    let (b, s) = (tc.batch_size, tc.seq_len);
    if !encoding.is_rotary() && s > model.max_context {
        return Err(Error::Config(format!(
            "seq_len {s} exceeds max_context {} for {encoding}",
            model.max_context
        )));
    }
    let batches: Vec<TokenBatch> = (0..tc.micro_batches() as u64)
        .map(|i| random_batch(model.vocab_size, b, s, tc.seed.wrapping_add(i)))
        .collect();
    let tokens_per_step = batches.len() * b * s;
    for _ in 0..n_warmup {
        trainer.update(&batches)?;
    }
    let mut times = Vec::with_capacity(n_timed);
    let start = Instant::now();
    for _ in 0..n_timed {
        let t0 = Instant::now();
        trainer.update(&batches)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let wall = start.elapsed().as_secs_f64();
    Ok(MetricsRecord {
        encoding,
        seq_len: s,
        metric: Metric::TokensPerSec,
        value: Some(tokens_per_step as f64 / median(&mut times).max(1e-12)),
        n_tokens: n_timed * tokens_per_step,
        wall_seconds: wall,
    })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// RoPE and CARoPE throughput plus `carope_tps / rope_tps`.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub rope: MetricsRecord,
    pub carope: MetricsRecord,
    pub ratio: f64,
}

pub fn throughput_compare(
    model: &ModelConfig,
    train: &TrainConfig,
    n_warmup: usize,
    n_timed: usize,
) -> Result<Comparison> {
    let rope = throughput_bench(model, train, EncodingKind::Rope, n_warmup, n_timed)?;
    let carope = throughput_bench(model, train, EncodingKind::Carope, n_warmup, n_timed)?;
    let ratio = carope.value.unwrap_or(0.0) / rope.value.unwrap_or(f64::NAN);
    Ok(Comparison {
        rope,
        carope,
        ratio,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// `(flat index, analytic, numeric)` of entries over tolerance.
    pub offending: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.offending.is_empty())
    }

    pub fn group(&self, name: &str) -> Option<&GroupCheck> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .groups
            .iter()
            .map(|g| g.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(
            f,
            "{:<w$} {:>8} {:>12}  status",
            "group", "entries", "max_rel_err"
        )?;
        for g in &self.groups {
            let status = if g.offending.is_empty() { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{:<w$} {:>8} {:>12.3e}  {status}",
                g.name, g.entries, g.max_rel_err
            )?;
            for (i, a, n) in g.offending.iter().take(10) {
                writeln!(f, "    [{i}] analytic={a:e} numeric={n:e}")?;
            }
        }
        writeln!(f, "tolerance={:e} step={:e}", self.tolerance, self.step)
    }
}

/// Denominator floor of the relative error, so that entries whose true
/// gradient is near zero are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Every parameter entry of a float64 model checked against central
/// differences of the full loss on `batch`. Parameters in `frozen` are bound
/// as constants and do not appear in the report.
pub fn grad_check(
    state: &TransformerState<f64>,
    batch: &TokenBatch,
    frozen: &[&str],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let n_entries = state.num_params();
    if n_entries > 10_000 {
        return Err(Error::Config(format!(
            "grad_check needs at most 10000 parameters, model has {n_entries}"
        )));
    }
    let (_, grads) = loss_and_grads(state, batch, frozen)?;
    let mut work = state.clone();
    let loss_at = |s: &TransformerState<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape, &[]);
        let l = s.loss(
            &mut tape,
            &bound,
            &batch.inputs,
            &batch.targets,
            batch.batch,
            batch.seq_len,
        )?;
        Ok(tape.value(l).item())
    };
    let mut groups = Vec::new();
    for (pi, g) in grads.into_iter().enumerate() {
        let Some(g) = g else { continue };
        let name = state.params()[pi].name.clone();
        let mut check = GroupCheck {
            name,
            entries: g.numel(),
            max_rel_err: 0.0,
            offending: Vec::new(),
        };
        for (i, &a) in g.data().iter().enumerate() {
            let orig = work.params()[pi].value.data()[i];
            work.params_mut()[pi].value.data_mut()[i] = orig + step;
            let up = loss_at(&work)?;
            work.params_mut()[pi].value.data_mut()[i] = orig - step;
            let down = loss_at(&work)?;
            work.params_mut()[pi].value.data_mut()[i] = orig;
            let n = (up - down) / (2.0 * step);
            let e = relative_error(a, n);
            check.max_rel_err = check.max_rel_err.max(e);
            if !(e <= tolerance) {
                check.offending.push((i, a, n));
            }
        }
        groups.push(check);
    }
    if state.config().encoding == EncodingKind::Carope {
        for name in ["carope.w", "carope.b"] {
            if !frozen.contains(&name) && !groups.iter().any(|g| g.name == name) {
                return Err(Error::Contract(format!("gradient check lacks '{name}'")));
            }
        }
    }
    Ok(GradCheckReport {
        groups,
        tolerance,
        step,
    })
}

/// Seeded random batch of `batch x seq_len` tokens with shifted targets.
pub fn random_batch(vocab: usize, batch: usize, seq_len: usize, seed: u64) -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toks: Vec<usize> = (0..batch * (seq_len + 1))
        .map(|_| rng.random_range(0..vocab))
        .collect();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for row in toks.chunks(seq_len + 1) {
        inputs.extend_from_slice(&row[..seq_len]);
        targets.extend_from_slice(&row[1..]);
    }
    TokenBatch {
        inputs,
        targets,
        batch,
        seq_len,
    }
}
