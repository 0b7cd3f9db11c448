//! Building blocks shared by the two transformer models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numcore::{Params, Tape, Tensor, Var};

/// Additive attention bias for hidden keys. Large enough that `exp` of it
/// underflows to exactly zero, small enough to stay finite.
pub(crate) const MASKED_SCORE: f64 = -1e9;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Forward-pass mode. Dropout draws from the caller's generator in
/// training mode and is disabled in evaluation mode.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
pub(crate) fn dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let Mode::Train(rng) = mode else {
        return Ok(x);
    };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

/// `x [N, in] * w [in, out] + b`.
pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// `[B * L, heads * d]` to `[B * heads, L, d]`.
pub(crate) fn split_heads(tape: &mut Tape, x: Var, batch: usize, len: usize, heads: usize, d: usize) -> Result<Var> {
    let x = tape.reshape(x, &[batch, len, heads, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch * heads, len, d])
}

/// Inverse of [`split_heads`].
pub(crate) fn merge_heads(tape: &mut Tape, x: Var, batch: usize, len: usize, heads: usize, d: usize) -> Result<Var> {
    let x = tape.reshape(x, &[batch, heads, len, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch * len, heads * d])
}

/// Position-wise feed-forward block with GELU.
pub(crate) struct FeedForward {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl FeedForward {
    pub fn init(params: &mut Params, prefix: &str, hidden: usize, inner: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: params.push_normal(&format!("{prefix}.ff.w1"), &[hidden, inner], std, rng),
            b1: params.push(format!("{prefix}.ff.b1"), Tensor::zeros(&[inner])),
            w2: params.push_normal(&format!("{prefix}.ff.w2"), &[inner, hidden], std, rng),
            b2: params.push(format!("{prefix}.ff.b2"), Tensor::zeros(&[hidden])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, v: &[Var], x: Var) -> Result<Var> {
        let h = linear(tape, x, v[self.w1], Some(v[self.b1]))?;
        let h = tape.gelu(h)?;
        linear(tape, h, v[self.w2], Some(v[self.b2]))
    }
}

pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

impl Norm {
    pub fn init(params: &mut Params, name: &str, dim: usize) -> Self {
        Self {
            gamma: params.push(format!("{name}.g"), Tensor::full(&[dim], 1.0)),
            beta: params.push(format!("{name}.b"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, v: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, v[self.gamma], v[self.beta], LN_EPS)
    }
}

/// Sinusoidal encodings of the distances `0..len`, shape `[len, dim]`.
/// Even columns hold sines and odd columns cosines of the same frequency.
pub fn sinusoid_table(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        for j in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            let angle = p as f64 * freq;
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_parts(vec![len, dim], data)
}

/// Checks that a loaded parameter set has exactly the expected names and
/// shapes.
pub(crate) fn check_layout(expected: &Params, got: &Params) -> Result<()> {
    use crate::error::Error;
    if expected.len() != got.len() {
        return Err(Error::ConfigMismatch(format!(
            "expected {} parameter tensors, found {}",
            expected.len(),
            got.len()
        )));
    }
    for i in 0..expected.len() {
        if expected.name(i) != got.name(i) || expected.get(i).shape() != got.get(i).shape() {
            return Err(Error::ConfigMismatch(format!(
                "parameter {} {:?} does not match {} {:?}",
                got.name(i),
                got.get(i).shape(),
                expected.name(i),
                expected.get(i).shape()
            )));
        }
    }
    Ok(())
}
