//! Decoder-only transformer with a pluggable positional encoding.
//!
//! Pre-layernorm residual blocks, GELU MLP with 4x expansion, causal
//! multi-head attention and (by default) tied input/output embeddings.
//! Additive encodings are added to the token embeddings before the first
//! block; rotary encodings rotate queries and keys in every block using one
//! [`PhaseTensor`] computed per forward pass.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kvconf;
use crate::numcore::{Scalar, Tape, Tensor, Var};
use crate::posenc::{
    self, carope_base_freq, carope_init_rope, carope_phases, rope_phases, CaropeVars, PhaseTensor,
    RotaryConfig, DEFAULT_BASE,
};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncodingKind {
    Sinusoidal,
    Learnable,
    Rope,
    Carope,
}

impl EncodingKind {
    pub const ALL: [EncodingKind; 4] = [
        EncodingKind::Sinusoidal,
        EncodingKind::Learnable,
        EncodingKind::Rope,
        EncodingKind::Carope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncodingKind::Sinusoidal => "sinusoidal",
            EncodingKind::Learnable => "learnable",
            EncodingKind::Rope => "rope",
            EncodingKind::Carope => "carope",
        }
    }

    pub fn is_rotary(self) -> bool {
        matches!(self, EncodingKind::Rope | EncodingKind::Carope)
    }
}

impl fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncodingKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown encoding '{s}'; valid kinds: sinusoidal, learnable, rope, carope"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub encoding: EncodingKind,
    pub tie_embeddings: bool,
    /// Multiplier on the fixed sinusoidal table.
    pub sinusoidal_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The desk-scale profile.
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            vocab_size: 256,
            max_context: 64,
            encoding: EncodingKind::Carope,
            tie_embeddings: true,
            sinusoidal_scale: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if !(self.sinusoidal_scale.is_finite() && self.sinusoidal_scale > 0.0) {
            return Err(Error::Config(format!(
                "sinusoidal_scale must be positive and finite, got {}",
                self.sinusoidal_scale
            )));
        }
        if self.d_head() % 2 != 0 {
            return Err(Error::Config(format!(
                "d_head = d_model / n_heads = {} must be even",
                self.d_head()
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn rotary(&self) -> Result<RotaryConfig> {
        RotaryConfig::new(self.d_head(), self.n_heads, DEFAULT_BASE)
    }

    /// `(key, value)` pairs in config-file syntax.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_model", self.d_model.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_context", self.max_context.to_string()),
            ("encoding", self.encoding.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("sinusoidal_scale", self.sinusoidal_scale.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Apply one config entry; `Ok(false)` if `key` is not a model field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_layers" => self.n_layers = kvconf::field(key, value)?,
            "n_heads" => self.n_heads = kvconf::field(key, value)?,
            "d_model" => self.d_model = kvconf::field(key, value)?,
            "vocab_size" => self.vocab_size = kvconf::field(key, value)?,
            "max_context" => self.max_context = kvconf::field(key, value)?,
            "encoding" => self.encoding = value.parse()?,
            "tie_embeddings" => self.tie_embeddings = kvconf::field(key, value)?,
            "sinusoidal_scale" => self.sinusoidal_scale = kvconf::field(key, value)?,
            "seed" => self.seed = kvconf::field(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Number of trainable scalars; the sinusoidal table is not counted.
    pub fn param_count(&self) -> usize {
        let (d, v) = (self.d_model, self.vocab_size);
        let per_layer = 4 * d + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let mut n = v * d + self.n_layers * per_layer + 2 * d;
        if !self.tie_embeddings {
            n += d * v;
        }
        match self.encoding {
            EncodingKind::Learnable => n += self.max_context * d,
            EncodingKind::Carope => n += d * self.n_heads + self.n_heads,
            EncodingKind::Sinusoidal | EncodingKind::Rope => {}
        }
        n
    }
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerState<T> {
    cfg: ModelConfig,
    params: Vec<Param<T>>,
    /// Fixed sinusoidal table, never touched by the optimizer.
    sinusoidal: Option<Tensor<T>>,
}

/// Parameter names of one block.
struct LayerNames {
    ln_1: (String, String),
    q: (String, String),
    k: (String, String),
    v: (String, String),
    attn_proj: (String, String),
    ln_2: (String, String),
    fc: (String, String),
    mlp_proj: (String, String),
}

impl LayerNames {
    fn new(l: usize) -> Self {
        let wb = |m: &str| (format!("h.{l}.{m}.weight"), format!("h.{l}.{m}.bias"));
        let gb = |m: &str| (format!("h.{l}.{m}.gain"), format!("h.{l}.{m}.bias"));
        Self {
            ln_1: gb("ln_1"),
            q: wb("attn.q"),
            k: wb("attn.k"),
            v: wb("attn.v"),
            attn_proj: wb("attn.proj"),
            ln_2: gb("ln_2"),
            fc: wb("mlp.fc"),
            mlp_proj: wb("mlp.proj"),
        }
    }
}

impl<T: Scalar> TransformerState<T> {
    /// Fresh parameters: normal(0, 0.02) weights, residual projections scaled
    /// by `1/sqrt(2 n_layers)`, zero biases, unit gains, and CARoPE set to
    /// reproduce RoPE.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, v) = (cfg.d_model, cfg.vocab_size);
        let normal = |std: f64| Normal::new(0.0, std).expect("positive std");
        let mut params = Vec::new();
        let weight = |params: &mut Vec<Param<T>>,
                      name: String,
                      shape: &[usize],
                      std: f64,
                      rng: &mut ChaCha8Rng| {
            let dist = normal(std);
            let value = Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)));
            params.push(Param {
                name,
                value,
                decay: true,
            });
        };
        let zeros = |params: &mut Vec<Param<T>>, name: String, n: usize| {
            params.push(Param {
                name,
                value: Tensor::zeros(&[n]),
                decay: false,
            });
        };
        let ones = |params: &mut Vec<Param<T>>, name: String, n: usize| {
            params.push(Param {
                name,
                value: Tensor::full(&[n], T::ONE),
                decay: false,
            });
        };

        weight(&mut params, "wte".into(), &[v, d], INIT_STD, &mut rng);
        let mut sinusoidal = None;
        match cfg.encoding {
            EncodingKind::Learnable => {
                let table =
                    posenc::learnable_table::<T, _>(cfg.max_context, d, INIT_STD, &mut rng)?;
                params.push(Param {
                    name: "wpe".into(),
                    value: table.table,
                    decay: false,
                });
            }
            EncodingKind::Sinusoidal => {
                let mut table = posenc::sinusoidal_table::<T>(cfg.max_context, d)?.table;
                if cfg.sinusoidal_scale != 1.0 {
                    let k = T::from_f64(cfg.sinusoidal_scale);
                    table.data_mut().iter_mut().for_each(|x| *x = *x * k);
                }
                sinusoidal = Some(table);
            }
            EncodingKind::Rope | EncodingKind::Carope => {}
        }
        let resid_std = INIT_STD / ((2 * cfg.n_layers.max(1)) as f64).sqrt();
        for l in 0..cfg.n_layers {
            let n = LayerNames::new(l);
            ones(&mut params, n.ln_1.0, d);
            zeros(&mut params, n.ln_1.1, d);
            for (w, b) in [n.q, n.k, n.v] {
                weight(&mut params, w, &[d, d], INIT_STD, &mut rng);
                zeros(&mut params, b, d);
            }
            weight(&mut params, n.attn_proj.0, &[d, d], resid_std, &mut rng);
            zeros(&mut params, n.attn_proj.1, d);
            ones(&mut params, n.ln_2.0, d);
            zeros(&mut params, n.ln_2.1, d);
            weight(&mut params, n.fc.0, &[d, 4 * d], INIT_STD, &mut rng);
            zeros(&mut params, n.fc.1, 4 * d);
            weight(&mut params, n.mlp_proj.0, &[4 * d, d], resid_std, &mut rng);
            zeros(&mut params, n.mlp_proj.1, d);
        }
        ones(&mut params, "ln_f.gain".into(), d);
        zeros(&mut params, "ln_f.bias".into(), d);
        if !cfg.tie_embeddings {
            weight(&mut params, "lm_head".into(), &[d, v], INIT_STD, &mut rng);
        }
        if cfg.encoding == EncodingKind::Carope {
            // Deterministic and RNG-free, so a CARoPE model shares every other
            // weight with the RoPE model of the same seed.
            let cp = carope_init_rope::<T>(&cfg.rotary()?, d);
            params.push(Param {
                name: "carope.w".into(),
                value: cp.w,
                decay: true,
            });
            params.push(Param {
                name: "carope.b".into(),
                value: cp.b,
                decay: false,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            params,
            sinusoidal,
        })
    }

    /// Reassemble a state from named tensors, checking names and shapes
    /// against a fresh layout of `cfg`.
    pub fn from_params(cfg: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut state = Self::init(cfg)?;
        if named.len() != state.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                state.params.len(),
                named.len()
            )));
        }
        for (p, (name, value)) in state.params.iter_mut().zip(named) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' {:?} does not match expected '{}' {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(state)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Put every parameter on `tape`. Parameters named in `frozen` are bound
    /// as constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape<T>, frozen: &[&str]) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let v = p.value.clone();
                if frozen.contains(&p.name.as_str()) {
                    tape.constant(v)
                } else {
                    tape.param(v)
                }
            })
            .collect();
        let sinusoidal = self.sinusoidal.as_ref().map(|t| tape.constant(t.clone()));
        Bound {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            vars,
            sinusoidal,
        }
    }

    /// Check token ids and the context length for additive encodings.
    pub fn check_input(&self, tokens: &[usize], batch: usize, seq_len: usize) -> Result<()> {
        if tokens.len() != batch * seq_len || seq_len == 0 {
            return Err(Error::Dimension(format!(
                "{} tokens do not form a [{batch}, {seq_len}] batch",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} >= vocab_size {}",
                self.cfg.vocab_size
            )));
        }
        if !self.cfg.encoding.is_rotary() {
            posenc::check_positions(seq_len, self.cfg.max_context)?;
        }
        Ok(())
    }

    /// Token embeddings after any additive position table: `[batch, seq, d]`,
    /// plus the rotary phases if the encoding is rotary.
    pub fn embed(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: &[usize],
        batch: usize,
        seq_len: usize,
    ) -> Result<(Var, Option<PhaseTensor>)> {
        self.check_input(tokens, batch, seq_len)?;
        let x = tape.gather_rows(bound.var("wte"), tokens, &[batch, seq_len])?;
        let rot = self.cfg.rotary()?;
        let out = match self.cfg.encoding {
            EncodingKind::Sinusoidal => {
                let table = bound.sinusoidal.expect("sinusoidal table bound");
                (posenc::add_positions(tape, x, table, batch, seq_len)?, None)
            }
            EncodingKind::Learnable => (
                posenc::add_positions(tape, x, bound.var("wpe"), batch, seq_len)?,
                None,
            ),
            EncodingKind::Rope => (x, Some(rope_phases(tape, batch, seq_len, &rot))),
            EncodingKind::Carope => {
                let vars = CaropeVars {
                    w: bound.var("carope.w"),
                    b: bound.var("carope.b"),
                };
                let f = carope_base_freq(tape, x, vars, &rot)?;
                (x, Some(carope_phases(tape, f, &rot)?))
            }
        };
        Ok(out)
    }

    /// Logits `[batch, seq_len, vocab_size]` for row-major `tokens`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: &[usize],
        batch: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (mut x, phases) = self.embed(tape, bound, tokens, batch, seq_len)?;
        let (h, d) = (self.cfg.n_heads, self.cfg.d_model);
        let dh = self.cfg.d_head();
        for l in 0..self.cfg.n_layers {
            let n = LayerNames::new(l);
            let a = tape.layernorm(x, bound.var(&n.ln_1.0), bound.var(&n.ln_1.1))?;
            let mut heads = Vec::with_capacity(3);
            for (w, b) in [&n.q, &n.k, &n.v] {
                let y = linear(tape, a, bound.var(w), bound.var(b))?;
                let y = tape.reshape(y, &[batch, seq_len, h, dh])?;
                heads.push(tape.transpose(y, 1, 2)?);
            }
            let att = causal_attention(tape, heads[0], heads[1], heads[2], phases)?;
            let att = tape.transpose(att, 1, 2)?;
            let att = tape.reshape(att, &[batch, seq_len, d])?;
            let att = linear(
                tape,
                att,
                bound.var(&n.attn_proj.0),
                bound.var(&n.attn_proj.1),
            )?;
            x = tape.add(x, att)?;

            let m = tape.layernorm(x, bound.var(&n.ln_2.0), bound.var(&n.ln_2.1))?;
            let m = linear(tape, m, bound.var(&n.fc.0), bound.var(&n.fc.1))?;
            let m = tape.gelu(m);
            let m = linear(tape, m, bound.var(&n.mlp_proj.0), bound.var(&n.mlp_proj.1))?;
            x = tape.add(x, m)?;
        }
        let x = tape.layernorm(x, bound.var("ln_f.gain"), bound.var("ln_f.bias"))?;
        let head = if self.cfg.tie_embeddings {
            tape.transpose(bound.var("wte"), 0, 1)?
        } else {
            bound.var("lm_head")
        };
        tape.matmul(x, head)
    }

    /// Mean next-token cross-entropy of a batch.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        inputs: &[usize],
        targets: &[usize],
        batch: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let logits = self.forward(tape, bound, inputs, batch, seq_len)?;
        cross_entropy(tape, logits, targets)
    }
}

/// Parameters of a [`TransformerState`] as bound on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
    sinusoidal: Option<Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
    }

    fn var(&self, name: &str) -> Var {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' missing from layout"))
    }

    /// `(name, var)` in parameter order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.vars.iter().copied())
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Scaled dot-product attention with a causal mask over
/// `[batch, heads, seq, d_head]`; `q` and `k` are rotated first when phases
/// are given.
pub fn causal_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    phases: Option<PhaseTensor>,
) -> Result<Var> {
    let (q, k) = match phases {
        Some(p) => (
            posenc::apply_rotary(tape, q, p)?,
            posenc::apply_rotary(tape, k, p)?,
        ),
        None => (q, k),
    };
    let dh = *tape.shape(q).last().unwrap_or(&1);
    let kt = tape.transpose(k, 2, 3)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = tape.causal_softmax(scores)?;
    tape.matmul(probs, v)
}

/// Mean of `-log softmax(logits)[target]` over every position.
pub fn cross_entropy<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(encoding: EncodingKind) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            vocab_size: 11,
            max_context: 5,
            encoding,
            tie_embeddings: true,
            sinusoidal_scale: 1.0,
            seed: 3,
        }
    }

    #[test]
    fn encoding_parse() {
        for k in EncodingKind::ALL {
            assert_eq!(k.name().parse::<EncodingKind>().unwrap(), k);
        }
        let err = "bogus".parse::<EncodingKind>().unwrap_err().to_string();
        for k in EncodingKind::ALL {
            assert!(err.contains(k.name()), "{err}");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(EncodingKind::Rope);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 8; // d_head = 1
        assert!(c.validate().is_err());
        c.n_heads = 4;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn param_count_matches_state() {
        for enc in EncodingKind::ALL {
            for tie in [true, false] {
                for layers in [0, 1, 3] {
                    let mut c = tiny(enc);
                    c.tie_embeddings = tie;
                    c.n_layers = layers;
                    let s = TransformerState::<f32>::init(&c).unwrap();
                    assert_eq!(
                        s.num_params(),
                        c.param_count(),
                        "{enc} tie={tie} L={layers}"
                    );
                }
            }
        }
    }

    #[test]
    fn decay_flags() {
        let mut c = tiny(EncodingKind::Learnable);
        c.tie_embeddings = false;
        let s = TransformerState::<f32>::init(&c).unwrap();
        for p in s.params() {
            let expect = p.value.rank() == 2 && p.name != "wpe";
            assert_eq!(p.decay, expect, "{}", p.name);
        }
        let s = TransformerState::<f32>::init(&tiny(EncodingKind::Carope)).unwrap();
        assert!(s.param("carope.w").unwrap().decay);
        assert!(!s.param("carope.b").unwrap().decay);
    }

    #[test]
    fn single_position_attention_returns_v() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::from_fn(&[1, 2, 1, 4], |i| i as f64));
        let k = tape.constant(Tensor::from_fn(&[1, 2, 1, 4], |i| -(i as f64)));
        let vt = Tensor::from_fn(&[1, 2, 1, 4], |i| 0.5 * i as f64);
        let v = tape.constant(vt.clone());
        let out = causal_attention(&mut tape, q, k, v, None).unwrap();
        assert_eq!(tape.value(out), &vt);
    }

    #[test]
    fn zero_phases_match_plain_attention() {
        let mut tape = Tape::<f64>::new();
        let mk = |s: f64| Tensor::from_fn(&[1, 1, 3, 4], move |i| (i as f64 * s).sin());
        let (q, k, v) = (
            tape.constant(mk(0.7)),
            tape.constant(mk(1.3)),
            tape.constant(mk(2.1)),
        );
        let zero = tape.constant(Tensor::zeros(&[1, 1, 3, 2]));
        let a = causal_attention(&mut tape, q, k, v, None).unwrap();
        let b = causal_attention(&mut tape, q, k, v, Some(PhaseTensor { values: zero })).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn bad_token_is_contract_error() {
        let s = TransformerState::<f32>::init(&tiny(EncodingKind::Rope)).unwrap();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, &[]);
        let err = s.forward(&mut tape, &b, &[1, 11], 1, 2).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }
}
