//! AdamW with linear warmup and cosine decay, gradient accumulation over
//! micro-batches, and the `CARO` checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"CARO" | u32 version | u32 header_len | header (key = value text)
//! u32 n_tensors | n_tensors x {
//!     u32 name_len | name | u8 dtype tag | u32 rank | u64 dims[rank] | payload
//! }
//! ```
//!
//! Tensors are the model parameters in layout order followed by the Adam
//! moments `adam.m.<name>` and `adam.v.<name>`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_train_starts, Corpus, TokenBatch};
use crate::error::{Error, Result};
use crate::kvconf;
use crate::model::{ModelConfig, Param, TransformerState};
use crate::numcore::{DType, Scalar, Tape, Tensor};

pub const CKPT_MAGIC: &[u8; 4] = b"CARO";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub tokens_per_update: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 6e-4,
            min_lr: 6e-5,
            warmup_steps: 750,
            total_steps: 2000,
            tokens_per_update: 8192,
            batch_size: 8,
            seq_len: 64,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("field '{field}': {why}")));
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return bad("max_lr", "must be positive");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.max_lr) {
            return bad("min_lr", "must satisfy 0 <= min_lr <= max_lr");
        }
        if self.total_steps == 0 {
            return bad("total_steps", "must be positive");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps", "must be below total_steps");
        }
        for (f, v) in [
            ("tokens_per_update", self.tokens_per_update),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return bad(f, "must be positive");
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        for (f, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(f, "must lie in [0, 1)");
            }
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        Ok(())
    }

    /// Micro-batches per optimizer update.
    pub fn micro_batches(&self) -> usize {
        self.tokens_per_update
            .div_ceil(self.batch_size * self.seq_len)
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("max_lr", self.max_lr.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("tokens_per_update", self.tokens_per_update.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("train_seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    /// Apply one config entry; `Ok(false)` if `key` is not a training field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let f = |v: &str| kvconf::field::<f64>(key, v);
        let n = |v: &str| kvconf::field::<usize>(key, v);
        match key {
            "max_lr" => self.max_lr = f(value)?,
            "min_lr" => self.min_lr = f(value)?,
            "warmup_steps" => self.warmup_steps = n(value)?,
            "total_steps" => self.total_steps = n(value)?,
            "tokens_per_update" => self.tokens_per_update = n(value)?,
            "batch_size" => self.batch_size = n(value)?,
            "seq_len" => self.seq_len = n(value)?,
            "weight_decay" => self.weight_decay = f(value)?,
            "beta1" => self.beta1 = f(value)?,
            "beta2" => self.beta2 = f(value)?,
            "eps" => self.eps = f(value)?,
            "grad_clip" => self.grad_clip = f(value)?,
            "train_seed" => self.seed = kvconf::field(key, value)?,
            "checkpoint_every" => self.checkpoint_every = n(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Learning rate for 0-based `step`: linear warmup to `max_lr`, cosine decay
/// to `min_lr` at `total_steps`, constant afterwards.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.max_lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    if step > cfg.total_steps {
        return cfg.min_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + (PI * progress).cos())
}

/// AdamW moments, one pair per parameter in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with 1-based step count `t`. Gradients are clipped to a
    /// global norm of `cfg.grad_clip` first. Returns the pre-clip norm.
    pub fn step(
        &mut self,
        params: &mut [Param<T>],
        grads: &[Tensor<T>],
        lr: f64,
        t: usize,
        cfg: &TrainConfig,
    ) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let mut sq = 0.0;
        for (p, g) in params.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::Contract(format!(
                    "gradient of '{}' has shape {:?}, expected {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of '{}' is {} at flat index {i}",
                    p.name,
                    g.data()[i]
                )));
            }
            sq += g.data().iter().map(|v| v.to_f64().powi(2)).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip = if norm > cfg.grad_clip {
            cfg.grad_clip / norm
        } else {
            1.0
        };
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let decay = if p.decay {
                1.0 - lr * cfg.weight_decay
            } else {
                1.0
            };
            let it = p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in it {
                let gi = gi.to_f64() * clip;
                let m1 = b1 * mi.to_f64() + (1.0 - b1) * gi;
                let v1 = b2 * vi.to_f64() + (1.0 - b2) * gi * gi;
                *mi = T::from_f64(m1);
                *vi = T::from_f64(v1);
                let upd = (m1 / bc1) / ((v1 / bc2).sqrt() + cfg.eps);
                *w = T::from_f64(w.to_f64() * decay - lr * upd);
            }
        }
        Ok(norm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// 1-based index of the completed update.
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub toks_per_sec: f64,
    pub grad_norm: f64,
}

impl StepStats {
    pub fn trace_line(&self) -> String {
        format!(
            "step={} loss={} lr={} toks_per_sec={:.1}",
            self.step, self.loss, self.lr, self.toks_per_sec
        )
    }
}

/// Mean loss and parameter gradients of one batch, in layout order.
pub fn loss_and_grads<T: Scalar>(
    state: &TransformerState<T>,
    batch: &TokenBatch,
    frozen: &[&str],
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape, frozen);
    let loss = state.loss(
        &mut tape,
        &bound,
        &batch.inputs,
        &batch.targets,
        batch.batch,
        batch.seq_len,
    )?;
    let value = tape.value(loss).item().to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let out = bound.iter().map(|(_, v)| grads.take(v)).collect();
    Ok((value, out))
}

/// Model, optimizer and data-order state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub state: TransformerState<T>,
    pub cfg: TrainConfig,
    pub opt: AdamW<T>,
    step: usize,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(state: TransformerState<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(state.params());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            state,
            cfg,
            opt,
            step: 0,
            rng,
        })
    }

    /// Completed optimizer updates.
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Draw the micro-batches of the next update.
    pub fn next_batches(&mut self, corpus: &Corpus) -> Vec<TokenBatch> {
        (0..self.cfg.micro_batches())
            .map(|_| {
                let starts = sample_train_starts(
                    corpus,
                    self.cfg.seq_len,
                    self.cfg.batch_size,
                    &mut self.rng,
                );
                corpus.batch_at(&starts, self.cfg.seq_len)
            })
            .collect()
    }

    /// One optimizer update over the given micro-batches.
    pub fn update(&mut self, batches: &[TokenBatch]) -> Result<StepStats> {
        let start = Instant::now();
        let k = batches.len();
        if k == 0 {
            return Err(Error::Contract(
                "update needs at least one micro-batch".into(),
            ));
        }
        let mut sum: Vec<Tensor<T>> = self
            .state
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        let mut loss = 0.0;
        let mut tokens = 0;
        for b in batches {
            let (l, grads) = loss_and_grads(&self.state, b, &[])?;
            loss += l;
            tokens += b.batch * b.seq_len;
            for (acc, g) in sum.iter_mut().zip(grads) {
                if let Some(g) = g {
                    for (a, gi) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *gi;
                    }
                }
            }
        }
        if k > 1 {
            let inv = T::from_f64(1.0 / k as f64);
            for g in &mut sum {
                for v in g.data_mut() {
                    *v = *v * inv;
                }
            }
        }
        let lr = lr_at(self.step, &self.cfg);
        let grad_norm =
            self.opt
                .step(self.state.params_mut(), &sum, lr, self.step + 1, &self.cfg)?;
        self.step += 1;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        Ok(StepStats {
            step: self.step,
            loss: loss / k as f64,
            lr,
            toks_per_sec: tokens as f64 / secs,
            grad_norm,
        })
    }

    /// Draw batches and update once.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<StepStats> {
        let batches = self.next_batches(corpus);
        self.update(&batches)
    }

    /// Train until `total_steps`. Every `checkpoint_every` steps, and at the
    /// end, the checkpoint at `ckpt` (if any) is replaced. An error leaves
    /// the last written checkpoint in place.
    pub fn run(
        &mut self,
        corpus: &Corpus,
        ckpt: Option<&Path>,
        mut sink: impl FnMut(&StepStats),
    ) -> Result<()> {
        corpus.train_batches(self.cfg.seq_len, self.cfg.batch_size, 0)?;
        while self.step < self.cfg.total_steps {
            let stats = self.train_step(corpus)?;
            sink(&stats);
            let every = self.cfg.checkpoint_every;
            if let Some(path) = ckpt {
                if (every > 0 && self.step % every == 0) || self.step == self.cfg.total_steps {
                    self.save(path)?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = self.state.config().to_kv();
        header.extend(self.cfg.to_kv());
        header.push(("step", self.step.to_string()));
        header.push(("dtype", T::DTYPE.name().to_string()));
        header.push(("rng_seed", hex::encode(self.rng.get_seed())));
        header.push(("rng_stream", self.rng.get_stream().to_string()));
        header.push(("rng_word_pos", self.rng.get_word_pos().to_string()));
        let params = self.state.params();
        let mut tensors: Vec<(String, &Tensor<T>)> =
            params.iter().map(|p| (p.name.clone(), &p.value)).collect();
        for (p, m) in params.iter().zip(&self.opt.m) {
            tensors.push((format!("adam.m.{}", p.name), m));
        }
        for (p, v) in params.iter().zip(&self.opt.v) {
            tensors.push((format!("adam.v.{}", p.name), v));
        }
        encode_checkpoint(&kvconf::render(&header), &tensors)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let ck = Checkpoint::<T>::decode(bytes)?;
        let n = TransformerState::<T>::init(&ck.model)?.params().len();
        if ck.tensors.len() != 3 * n {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                3 * n,
                ck.tensors.len()
            )));
        }
        let mut tensors = ck.tensors;
        let v: Vec<Tensor<T>> = tensors
            .split_off(2 * n)
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        let m: Vec<Tensor<T>> = tensors.split_off(n).into_iter().map(|(_, t)| t).collect();
        let state = TransformerState::from_params(&ck.model, tensors)?;
        for (i, p) in state.params().iter().enumerate() {
            if m[i].shape() != p.value.shape() || v[i].shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "moment shapes differ for '{}'",
                    p.name
                )));
            }
        }
        ck.train.validate()?;
        Ok(Self {
            state,
            cfg: ck.train,
            opt: AdamW { m, v },
            step: ck.step,
            rng: ck.rng,
        })
    }
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub header: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

/// Dtype recorded in a checkpoint header.
pub fn checkpoint_dtype(bytes: &[u8]) -> Result<DType> {
    let (header, _) = split_header(bytes)?;
    let kv = kvconf::parse(&header)?;
    let name = kv
        .iter()
        .find(|(k, _)| k == "dtype")
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Checkpoint("header lacks dtype".into()))?;
    match name {
        "f32" | "float32" => Ok(DType::F32),
        "f64" | "float64" => Ok(DType::F64),
        other => Err(Error::Checkpoint(format!("unknown dtype '{other}'"))),
    }
}

fn encode_checkpoint<T: Scalar>(header: &str, tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn split_header(bytes: &[u8]) -> Result<(String, Reader<'_>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("not a CARO checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let len = r.u32()? as usize;
    let header = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    Ok((header, r))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, mut r) = split_header(bytes)?;
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        let (mut step, mut dtype) = (None, None);
        let (mut seed, mut stream, mut word_pos) = (None, None, None);
        for (k, v) in kvconf::parse(&header)? {
            if model.set(&k, &v)? || train.set(&k, &v)? {
                continue;
            }
            match k.as_str() {
                "step" => step = Some(kvconf::field::<usize>(&k, &v)?),
                "dtype" => dtype = Some(v),
                "rng_seed" => seed = Some(v),
                "rng_stream" => stream = Some(kvconf::field::<u64>(&k, &v)?),
                "rng_word_pos" => word_pos = Some(kvconf::field::<u128>(&k, &v)?),
                _ => return Err(Error::Checkpoint(format!("unknown header key '{k}'"))),
            }
        }
        let missing = |what: &str| Error::Checkpoint(format!("header lacks {what}"));
        if dtype.as_deref() != Some(T::DTYPE.name()) {
            return Err(Error::Checkpoint(format!(
                "checkpoint dtype {:?} cannot be read as {}",
                dtype,
                T::DTYPE.name()
            )));
        }
        let seed: [u8; 32] = hex::decode(seed.ok_or_else(|| missing("rng_seed"))?)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| Error::Checkpoint("rng_seed is not 32 hex bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream.ok_or_else(|| missing("rng_stream"))?);
        rng.set_word_pos(word_pos.ok_or_else(|| missing("rng_word_pos"))?);
        model.validate()?;

        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            if DType::from_tag(tag) != Some(T::DTYPE) {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has dtype tag {tag}"
                )));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let size = T::DTYPE.size_bytes();
            let payload = r.take(numel * size)?;
            let data = payload.chunks_exact(size).map(T::read_le).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model,
            train,
            step: step.ok_or_else(|| missing("step"))?,
            rng,
            header,
            tensors,
        })
    }
}
