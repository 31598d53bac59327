//! The `carope` executable: `train`, `eval`, `bench`, `gradcheck` and
//! `inspect` subcommands driven by a flat config file plus flag overrides.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
//! (non-finite loss or a failed gradient check).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::data::{self, Corpus, DEFAULT_TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::evalbench::{self, extrapolation_report, throughput_compare};
use crate::kvconf;
use crate::model::{EncodingKind, ModelConfig, TransformerState};
use crate::numcore::{DType, Tape};
use crate::posenc::{carope_base_freq, rope_theta, CaropeVars};
use crate::train::{checkpoint_dtype, Checkpoint, TrainConfig, Trainer};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERIC: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "carope",
    version,
    about = "Context-aware rotary embeddings: train, evaluate, benchmark, verify"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write its checkpoint and loss trace.
    Train(Overrides),
    /// Perplexity grid of one or more checkpoints over several lengths.
    Eval(EvalArgs),
    /// Training-step throughput of RoPE versus CARoPE.
    Bench(BenchArgs),
    /// Finite-difference check of every parameter gradient (float64).
    Gradcheck(GradArgs),
    /// Print a checkpoint's configuration and parameter summary.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// `key = value` config file; flags below win over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// sinusoidal, learnable, rope or carope.
    #[arg(long)]
    pub encoding: Option<String>,
    /// Seeds both initialization and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Byte text or CTOK token file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint files (repeat or comma-separate).
    #[arg(long, required = true, value_delimiter = ',')]
    pub checkpoint: Vec<PathBuf>,
    /// Evaluation corpus; its tail after the train split is scored.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Config supplying the corpus and train_fraction.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated context lengths.
    #[arg(long, value_delimiter = ',', default_value = "64,128")]
    pub lengths: Vec<usize>,
    /// Also write one metrics record per line to this file.
    #[arg(long)]
    pub emit: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: Overrides,
    /// Untimed steps before measuring.
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Timed steps; the median is reported.
    #[arg(long, default_value_t = 20)]
    pub timed: usize,
    /// Also write one metrics record per line to this file.
    #[arg(long)]
    pub emit: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradArgs {
    #[command(flatten)]
    pub run: Overrides,
    /// Maximum relative error per entry.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    /// Parameters bound as constants (comma-separated names).
    #[arg(long, value_delimiter = ',')]
    pub freeze: Vec<String>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus for the sample batch; random tokens otherwise.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

/// Everything a subcommand needs, resolved before any work starts.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: Option<PathBuf>,
    pub train_fraction: f64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            corpus: None,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            out: PathBuf::from("runs/out"),
        }
    }
}

impl RunConfig {
    /// Apply one entry. `seed` seeds both initialization and data order.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            self.train.seed = kvconf::field(key, value)?;
        }
        if self.model.set(key, value)? || self.train.set(key, value)? {
            return Ok(());
        }
        match key {
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "train_fraction" => self.train_fraction = kvconf::field(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown config field '{key}'"))),
        }
        Ok(())
    }

    /// Config file (if any) then flag overrides, then validation.
    pub fn resolve(o: &Overrides) -> Result<Self> {
        let mut rc = RunConfig::default();
        if let Some(path) = &o.config {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (k, v) in kvconf::parse(&text)? {
                rc.set(&k, &v)?;
            }
            // relative corpus paths are taken from the config's directory
            if let (Some(c), Some(dir)) = (&rc.corpus, path.parent()) {
                if c.is_relative() && !c.exists() && dir.join(c).exists() {
                    rc.corpus = Some(dir.join(c));
                }
            }
        }
        if let Some(e) = &o.encoding {
            rc.set("encoding", e)?;
        }
        if let Some(s) = o.seed {
            rc.set("seed", &s.to_string())?;
        }
        if let Some(s) = o.steps {
            rc.train.total_steps = s;
            if rc.train.warmup_steps >= s {
                rc.train.warmup_steps = s / 10;
            }
        }
        if let Some(p) = &o.out {
            rc.out = p.clone();
        }
        if let Some(p) = &o.corpus {
            rc.corpus = Some(p.clone());
        }
        rc.validate()?;
        Ok(rc)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !self.model.encoding.is_rotary() && self.train.seq_len > self.model.max_context {
            return Err(Error::Config(format!(
                "field 'seq_len': {} exceeds max_context {} for the {} encoding",
                self.train.seq_len, self.model.max_context, self.model.encoding
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(
                "field 'train_fraction': must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let mut kv = self.model.to_kv();
        kv.extend(self.train.to_kv());
        if let Some(c) = &self.corpus {
            kv.push(("corpus", c.display().to_string()));
        }
        kv.push(("train_fraction", self.train_fraction.to_string()));
        kv.push(("out", self.out.display().to_string()));
        kv
    }

    fn corpus(&self) -> Result<Corpus> {
        let path = self
            .corpus
            .as_ref()
            .ok_or_else(|| Error::Config("field 'corpus': no corpus path given".into()))?;
        data::ingest(path, self.model.vocab_size, self.train_fraction)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parse `args` (including the program name) and run.
pub fn run_from<I, S>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(out, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> ExitCode {
    let mut stdout = std::io::stdout();
    ExitCode::from(run_from(std::env::args_os(), &mut stdout))
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<u8> {
    match cmd {
        Command::Train(o) => cmd_train(&RunConfig::resolve(&o)?, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.caro";
pub const TRACE_FILE: &str = "trace.txt";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective.cfg";

pub fn cmd_train(rc: &RunConfig, out: &mut dyn Write) -> Result<u8> {
    let corpus = rc.corpus()?;
    // fails early if the train segment is too short
    corpus.train_batches(rc.train.seq_len, rc.train.batch_size, 0)?;
    fs::create_dir_all(&rc.out)?;
    fs::write(
        rc.out.join(EFFECTIVE_CONFIG_FILE),
        kvconf::render(&rc.to_kv()),
    )?;
    writeln!(
        out,
        "corpus {} tokens (train {}, eval {}) sha256 {}",
        corpus.len(),
        corpus.split_point(),
        corpus.len() - corpus.split_point(),
        corpus.digest()
    )?;
    let state = TransformerState::<f32>::init(&rc.model)?;
    writeln!(
        out,
        "{} encoding, {} parameters",
        rc.model.encoding,
        state.num_params()
    )?;
    let mut trainer = Trainer::new(state, rc.train.clone())?;
    let mut trace = fs::File::create(rc.out.join(TRACE_FILE))?;
    let ckpt = rc.out.join(CHECKPOINT_FILE);
    let mut io_err = None;
    let result = trainer.run(&corpus, Some(&ckpt), |s| {
        let line = s.trace_line();
        if let Err(e) = writeln!(trace, "{line}") {
            io_err.get_or_insert(e);
        }
        if s.step % 100 == 0 || s.step == 1 {
            let _ = writeln!(out, "{line}");
        }
    });
    if let Err(e) = result {
        writeln!(
            out,
            "training stopped at step {}: {e}",
            trainer.step_count() + 1
        )?;
        return Ok(exit_code(&e));
    }
    if let Some(e) = io_err {
        return Err(e.into());
    }
    writeln!(out, "wrote {}", ckpt.display())?;
    Ok(0)
}

fn load_f32(path: &Path) -> Result<Trainer<f32>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if checkpoint_dtype(&bytes)? != DType::F32 {
        return Err(Error::Checkpoint(format!(
            "{} is not a float32 checkpoint",
            path.display()
        )));
    }
    Trainer::decode(&bytes)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<u8> {
    if a.lengths.is_empty() || a.lengths.contains(&0) {
        return Err(Error::Config(
            "field 'lengths': need positive lengths".into(),
        ));
    }
    let trainers = a
        .checkpoint
        .iter()
        .map(|p| load_f32(p))
        .collect::<Result<Vec<_>>>()?;
    let rc = RunConfig::resolve(&Overrides {
        config: a.config.clone(),
        corpus: a.corpus.clone(),
        ..Overrides::default()
    })
    .ok();
    let fraction = rc
        .as_ref()
        .map_or(DEFAULT_TRAIN_FRACTION, |r| r.train_fraction);
    let corpus_path = a
        .corpus
        .clone()
        .or_else(|| rc.and_then(|r| r.corpus))
        .ok_or_else(|| Error::Config("field 'corpus': no corpus path given".into()))?;
    let vocab = trainers[0].state.config().vocab_size;
    let corpus = data::ingest(&corpus_path, vocab, fraction)?;
    let labels: Vec<String> = trainers
        .iter()
        .map(|t| t.state.config().encoding.to_string())
        .collect();
    let states: Vec<(&str, &TransformerState<f32>)> = labels
        .iter()
        .map(String::as_str)
        .zip(trainers.iter().map(|t| &t.state))
        .collect();
    let report = extrapolation_report(&states, &corpus, &a.lengths);
    write!(out, "{report}")?;
    if let Some(p) = &a.emit {
        fs::write(p, report.record_lines())?;
    }
    Ok(if report.has_errors() { EXIT_USAGE } else { 0 })
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<u8> {
    let rc = RunConfig::resolve(&a.run)?;
    let c = throughput_compare(&rc.model, &rc.train, a.warmup, a.timed)?;
    for r in [&c.rope, &c.carope] {
        writeln!(
            out,
            "{:<8} {:>12.1} tokens/s  ({} tokens timed, {:.2}s)",
            r.encoding.to_string(),
            r.value.unwrap_or(0.0),
            r.n_tokens,
            r.wall_seconds
        )?;
    }
    writeln!(out, "ratio carope/rope = {:.4}", c.ratio)?;
    if let Some(p) = &a.emit {
        fs::write(
            p,
            format!("{}\n{}\n", c.rope.record_line(), c.carope.record_line()),
        )?;
    }
    Ok(0)
}

pub fn cmd_gradcheck(a: &GradArgs, out: &mut dyn Write) -> Result<u8> {
    let rc = RunConfig::resolve(&a.run)?;
    let state = TransformerState::<f64>::init(&rc.model)?;
    let batch = evalbench::random_batch(
        rc.model.vocab_size,
        rc.train.batch_size,
        rc.train.seq_len,
        rc.train.seed,
    );
    let frozen: Vec<&str> = a.freeze.iter().map(String::as_str).collect();
    let report = evalbench::grad_check(&state, &batch, &frozen, a.step, a.tolerance)?;
    write!(out, "{report}")?;
    if report.passed() {
        writeln!(out, "gradcheck passed")?;
        Ok(0)
    } else {
        writeln!(out, "gradcheck FAILED")?;
        Ok(EXIT_NUMERIC)
    }
}

/// Per-head `(min, mean, max)` of the CARoPE base frequency over a batch.
pub fn frequency_stats(
    state: &TransformerState<f32>,
    tokens: &[usize],
    batch: usize,
    seq_len: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    let cfg = state.config();
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape, &[]);
    state.check_input(tokens, batch, seq_len)?;
    let x = tape.gather_rows(
        bound.get("wte").expect("wte bound"),
        tokens,
        &[batch, seq_len],
    )?;
    let vars = CaropeVars {
        w: bound
            .get("carope.w")
            .ok_or_else(|| Error::Contract("not a CARoPE model".into()))?,
        b: bound.get("carope.b").expect("carope.b bound"),
    };
    let f = carope_base_freq(&mut tape, x, vars, &cfg.rotary()?)?;
    let fv = tape.value(f.values);
    let mut stats = Vec::new();
    for h in 0..cfg.n_heads {
        let vals: Vec<f64> = (0..batch)
            .flat_map(|b| (0..seq_len).map(move |t| (b, t)))
            .map(|(b, t)| fv.get(&[b, h, t]) as f64)
            .collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        stats.push((min, mean, max));
    }
    Ok(stats)
}

pub fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<u8> {
    let bytes = fs::read(&a.checkpoint)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", a.checkpoint.display())))?;
    let dtype = checkpoint_dtype(&bytes)?;
    if dtype == DType::F64 {
        let ck = Checkpoint::<f64>::decode(&bytes)?;
        write!(out, "{}", ck.header)?;
        writeln!(out, "parameters = {}", ck.model.param_count())?;
        return Ok(0);
    }
    let t = Trainer::<f32>::decode(&bytes)?;
    let cfg = t.state.config().clone();
    let ck = Checkpoint::<f32>::decode(&bytes)?;
    write!(out, "{}", ck.header)?;
    writeln!(out, "parameters = {}", t.state.num_params())?;
    if cfg.encoding == EncodingKind::Carope {
        let seq = cfg.max_context.min(t.cfg.seq_len).max(1);
        let batch = 4;
        let tokens: Vec<usize> = match &a.corpus {
            Some(p) => {
                let c = data::ingest(p, cfg.vocab_size, DEFAULT_TRAIN_FRACTION)?;
                let w = c.eval_windows(seq)?;
                let first = w.batches(&c, batch).next();
                first.map(|b| b.inputs).unwrap_or_default()
            }
            None => evalbench::random_batch(cfg.vocab_size, batch, seq, cfg.seed).inputs,
        };
        let batch = tokens.len() / seq;
        let theta1 = rope_theta(1, &cfg.rotary()?)?;
        writeln!(
            out,
            "base frequency f per head over {batch}x{seq} tokens (theta_1 = {theta1:.6}):"
        )?;
        for (h, (min, mean, max)) in frequency_stats(&t.state, &tokens, batch, seq)?
            .into_iter()
            .enumerate()
        {
            writeln!(out, "  head {h}: min={min:.6} mean={mean:.6} max={max:.6}")?;
        }
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bogus_encoding_names_valid_kinds() {
        let mut buf = Vec::new();
        let code = run_from(["carope", "train", "--encoding", "bogus"], &mut buf);
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(code, EXIT_USAGE);
        for k in EncodingKind::ALL {
            assert!(s.contains(k.name()), "{s}");
        }
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        let mut buf = Vec::new();
        assert_eq!(
            run_from(["carope", "train", "--nope"], &mut buf),
            EXIT_USAGE
        );
    }

    #[test]
    fn overrides_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.cfg");
        fs::write(&p, "encoding = rope\nseed = 3\nd_model = 32\n").unwrap();
        let rc = RunConfig::resolve(&Overrides {
            config: Some(p),
            encoding: Some("carope".into()),
            seed: Some(5),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(rc.model.encoding, EncodingKind::Carope);
        assert_eq!((rc.model.seed, rc.train.seed), (5, 5));
        assert_eq!(rc.model.d_model, 32);
    }

    #[test]
    fn bad_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.cfg");
        fs::write(&p, "n_heads = 3\n").unwrap();
        let err = RunConfig::resolve(&Overrides {
            config: Some(p.clone()),
            ..Overrides::default()
        })
        .unwrap_err()
        .to_string();
        assert!(err.contains("n_heads"), "{err}");
        fs::write(&p, "colour = blue\n").unwrap();
        let err = RunConfig::resolve(&Overrides {
            config: Some(p),
            ..Overrides::default()
        })
        .unwrap_err()
        .to_string();
        assert!(err.contains("colour"), "{err}");
    }
}
