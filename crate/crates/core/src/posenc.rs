//! Positional encodings: sinusoidal and learnable additive tables, RoPE, and
//! context-aware RoPE (CARoPE).
//!
//! Both rotary variants produce a [`PhaseTensor`] of rotation angles with
//! shape `[batch, n_heads, seq_len, n_pairs]`. RoPE uses the fixed angles
//! `p * theta_i`. CARoPE replaces the fixed base frequency with a per-token,
//! per-head value `f in (0, 1)` derived from the token embedding, and
//! accumulates `f^i` over the preceding tokens:
//!
//! ```text
//! f[b,h,t]        = 1 / (softplus(x[b,t,:] . W[:,h] + bias[h]) + 1)
//! phase[b,h,p,i]  = sum_{t < p} f[b,h,t]^i          (i = 1..n_pairs)
//! ```
//!
//! With `W = 0` and `bias = softplus^-1(1/theta_1 - 1)` every `f` equals
//! `theta_1` and the phases collapse to RoPE's `p * theta_1^i`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::numcore::{Scalar, Tape, Tensor, Var};

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotaryConfig {
    d_head: usize,
    n_heads: usize,
    base: f64,
}

impl RotaryConfig {
    pub fn new(d_head: usize, n_heads: usize, base: f64) -> Result<Self> {
        if d_head == 0 || d_head % 2 != 0 {
            return Err(Error::Config(format!(
                "d_head must be a positive even integer, got {d_head}"
            )));
        }
        if n_heads == 0 {
            return Err(Error::Config("n_heads must be positive".into()));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::Config(format!(
                "rotary base must exceed 1, got {base}"
            )));
        }
        Ok(Self {
            d_head,
            n_heads,
            base,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn n_pairs(&self) -> usize {
        self.d_head / 2
    }

    /// Upper clamp on CARoPE logits. Always leaves room for the RoPE init logit.
    fn logit_ceiling(&self) -> f64 {
        (30.0 * self.d_head as f64).max(2.0 / rope_theta(1, self).unwrap_or(1.0))
    }
}

/// `base^(-2i/d_head)` for the 1-based pair index `i`.
pub fn rope_theta(i: usize, cfg: &RotaryConfig) -> Result<f64> {
    if i == 0 || i > cfg.n_pairs() {
        return Err(Error::Contract(format!(
            "pair index {i} outside 1..={}",
            cfg.n_pairs()
        )));
    }
    Ok(cfg.base.powf(-2.0 * i as f64 / cfg.d_head as f64))
}

/// Rotation angles `[batch, n_heads, seq_len, n_pairs]` on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PhaseTensor {
    pub values: Var,
}

/// Base frequencies `[batch, n_heads, seq_len]`, each in `(0, 1)`.
#[derive(Clone, Copy, Debug)]
pub struct FreqTensor {
    pub values: Var,
}

/// Plain RoPE angles `p * theta_i` for 0-based positions, `[1, 1, seq_len, n_pairs]`
/// flattened into `[seq_len, n_pairs]`.
pub fn rope_angle_table(seq_len: usize, cfg: &RotaryConfig) -> Vec<f64> {
    let thetas: Vec<f64> = (1..=cfg.n_pairs())
        .map(|i| rope_theta(i, cfg).expect("pair index in range"))
        .collect();
    (0..seq_len)
        .flat_map(|p| thetas.iter().map(move |&th| p as f64 * th))
        .collect()
}

/// RoPE phases, identical across batch and head.
pub fn rope_phases<T: Scalar>(
    tape: &mut Tape<T>,
    batch: usize,
    seq_len: usize,
    cfg: &RotaryConfig,
) -> PhaseTensor {
    let table = rope_angle_table(seq_len, cfg);
    let per_head: Vec<T> = table.iter().map(|&v| T::from_f64(v)).collect();
    let mut data = Vec::with_capacity(batch * cfg.n_heads * per_head.len());
    for _ in 0..batch * cfg.n_heads {
        data.extend_from_slice(&per_head);
    }
    let shape = vec![batch, cfg.n_heads, seq_len, cfg.n_pairs()];
    PhaseTensor {
        values: tape.constant(Tensor::new(shape, data).expect("phase shape")),
    }
}

/// CARoPE projection `W: [d_model, n_heads]` and per-head bias.
#[derive(Clone, Debug, PartialEq)]
pub struct CaropeParams<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

/// The CARoPE parameters as bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CaropeVars {
    pub w: Var,
    pub b: Var,
}

/// Stable `softplus^-1(y) = y + log(1 - exp(-y))` for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp()).ln_1p()
}

/// Parameters for which CARoPE reproduces RoPE exactly: `W = 0`, bias set so
/// that every base frequency equals `theta_1`.
pub fn carope_init_rope<T: Scalar>(cfg: &RotaryConfig, d_model: usize) -> CaropeParams<T> {
    let theta1 = rope_theta(1, cfg).expect("n_pairs >= 1");
    let bias = inverse_softplus(1.0 / theta1 - 1.0);
    CaropeParams {
        w: Tensor::zeros(&[d_model, cfg.n_heads]),
        b: Tensor::full(&[cfg.n_heads], T::from_f64(bias)),
    }
}

/// Lower clamp on CARoPE logits. Below it `softplus` is small enough that
/// `1 / (softplus + 1)` would round to exactly 1 in the working precision.
fn logit_floor<T: Scalar>() -> f64 {
    match T::DTYPE {
        crate::numcore::DType::F32 => -15.0,
        crate::numcore::DType::F64 => -30.0,
    }
}

/// `f[b,h,t] = 1 / (softplus(x[b,t,:] . W[:,h] + bias[h]) + 1)` for
/// `x: [batch, seq_len, d_model]`.
pub fn carope_base_freq<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    params: CaropeVars,
    cfg: &RotaryConfig,
) -> Result<FreqTensor> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(params.w).to_vec();
    if xs.len() != 3 || ws.len() != 2 || xs[2] != ws[0] || ws[1] != cfg.n_heads {
        return dim_err(format!(
            "carope_base_freq: embeddings {xs:?} do not match projection {ws:?} for {} heads",
            cfg.n_heads
        ));
    }
    let z = tape.matmul(x, params.w)?;
    let z = tape.add_row(z, params.b)?;
    let z = tape.clamp(z, logit_floor::<T>(), cfg.logit_ceiling());
    let f = tape.squash(z);
    // [batch, seq, heads] -> [batch, heads, seq]
    let f = tape.transpose(f, 1, 2)?;
    Ok(FreqTensor { values: f })
}

/// `phase[b,h,p,i] = sum_{t<p} exp(i * log f[b,h,t])`.
///
/// The powers and the prefix sum are fused so that float32 phases carry a
/// single rounding; see [`carope_phases_composed`] for the op-by-op route.
pub fn carope_phases<T: Scalar>(
    tape: &mut Tape<T>,
    f: FreqTensor,
    cfg: &RotaryConfig,
) -> Result<PhaseTensor> {
    let fs = tape.shape(f.values).to_vec();
    if fs.len() != 3 || fs[1] != cfg.n_heads {
        return dim_err(format!(
            "carope_phases: frequencies {fs:?} are not [batch, {}, seq]",
            cfg.n_heads
        ));
    }
    if let Some(bad) = tape
        .value(f.values)
        .data()
        .iter()
        .find(|&&v| !(v > T::ZERO && v < T::ONE))
    {
        return Err(Error::Contract(format!(
            "base frequency {bad} outside the open interval (0, 1)"
        )));
    }
    let phases = tape.phase_accumulate(f.values, cfg.n_pairs())?;
    Ok(PhaseTensor { values: phases })
}

/// The same phases assembled from primitive ops (log, exp, exclusive cumsum).
pub fn carope_phases_composed<T: Scalar>(
    tape: &mut Tape<T>,
    f: FreqTensor,
    cfg: &RotaryConfig,
) -> Result<PhaseTensor> {
    let n_pairs = cfg.n_pairs();
    let exponents = tape.constant(Tensor::from_fn(&[n_pairs], |i| T::from_f64((i + 1) as f64)));
    let log_f = tape.log(f.values);
    let log_f = tape.expand_last(log_f, n_pairs);
    let scaled = tape.mul_row(log_f, exponents)?;
    let powers = tape.exp(scaled);
    let phases = tape.cumsum_exclusive(powers, 2)?;
    Ok(PhaseTensor { values: phases })
}

/// Rotate adjacent pairs of `qk: [batch, n_heads, seq_len, d_head]`.
pub fn apply_rotary<T: Scalar>(tape: &mut Tape<T>, qk: Var, phases: PhaseTensor) -> Result<Var> {
    tape.rotary(qk, phases.values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApeKind {
    SinusoidalFixed,
    LearnableTrainable,
}

/// Additive position table `[max_positions, d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ApeTable<T> {
    pub table: Tensor<T>,
    pub kind: ApeKind,
}

impl<T: Scalar> ApeTable<T> {
    pub fn max_positions(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn check_len(&self, seq_len: usize) -> Result<()> {
        check_positions(seq_len, self.max_positions())
    }
}

pub(crate) fn check_positions(seq_len: usize, max_positions: usize) -> Result<()> {
    if seq_len > max_positions {
        return Err(Error::OutOfRange {
            position: seq_len - 1,
            max_positions,
        });
    }
    Ok(())
}

/// Add the rows of `table` (bound as `table_var`) for positions `0..seq_len`
/// to `x: [batch, seq_len, d_model]`.
pub fn add_positions<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    table_var: Var,
    batch: usize,
    seq_len: usize,
) -> Result<Var> {
    check_positions(seq_len, tape.shape(table_var)[0])?;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq_len).collect();
    let pos = tape.gather_rows(table_var, &positions, &[batch, seq_len])?;
    tape.add(x, pos)
}

pub fn sinusoidal_table<T: Scalar>(max_positions: usize, d_model: usize) -> Result<ApeTable<T>> {
    if max_positions == 0 || d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal table needs max_positions >= 1 and even d_model, got {max_positions} x {d_model}"
        )));
    }
    let table = Tensor::from_fn(&[max_positions, d_model], |idx| {
        let (p, c) = (idx / d_model, idx % d_model);
        let j = c / 2;
        let angle = p as f64 / DEFAULT_BASE.powf(2.0 * j as f64 / d_model as f64);
        T::from_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    });
    Ok(ApeTable {
        table,
        kind: ApeKind::SinusoidalFixed,
    })
}

pub fn learnable_table<T: Scalar, R: Rng>(
    max_positions: usize,
    d_model: usize,
    init_scale: f64,
    rng: &mut R,
) -> Result<ApeTable<T>> {
    if max_positions == 0 || d_model == 0 {
        return Err(Error::Config(
            "learnable table needs max_positions >= 1 and d_model >= 1".into(),
        ));
    }
    let normal = Normal::new(0.0, init_scale)
        .map_err(|e| Error::Config(format!("learnable table init scale: {e}")))?;
    let table = Tensor::from_fn(&[max_positions, d_model], |_| {
        T::from_f64(normal.sample(rng))
    });
    Ok(ApeTable {
        table,
        kind: ApeKind::LearnableTrainable,
    })
}
