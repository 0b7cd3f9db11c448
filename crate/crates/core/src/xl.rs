//! Unidirectional transformer with segment-level recurrence and relative
//! positional attention.
//!
//! Each layer attends over `[memory ∥ segment]`. The memory of a layer is
//! the input that layer received on previous segments, cached as plain
//! values so no gradient reaches it. Attention scores decompose into a
//! content term `(q + u)·k` and a position term `(q + v)·W_r r(i - j)` with
//! sinusoidal distance encodings `r` and two learned bias vectors per layer.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, dropout, linear, sinusoid_table, FeedForward, Mode, Norm, MASKED_SCORE};
use crate::numcore::{log_softmax_row, Params, Tape, Tensor, Var};
use crate::subseg::{NUM_SPECIAL, PAD};

/// Target value ignored by [`xl_loss`].
pub const IGNORE_ID: u32 = PAD;

#[derive(Clone, Debug, PartialEq)]
pub struct XlConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub head_size: usize,
    pub intermediate_size: usize,
    pub seg_len: usize,
    pub mem_len: usize,
    pub dropout_prob: f64,
    pub vocab_size: usize,
    /// Standard deviation of the initial weight matrices.
    pub init_std: f64,
}

impl XlConfig {
    /// Desk-scale defaults: 2 layers, 64 hidden, 2 heads of 32, 256 inner,
    /// segment and memory length 16.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 2,
            head_size: 32,
            intermediate_size: 256,
            seg_len: 16,
            mem_len: 16,
            dropout_prob: 0.1,
            vocab_size,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("head_size", self.head_size),
            ("intermediate_size", self.intermediate_size),
            ("seg_len", self.seg_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= NUM_SPECIAL as usize {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the special tokens",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!("dropout_prob {} outside [0, 1)", self.dropout_prob)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std {} must be non-negative", self.init_std)));
        }
        Ok(())
    }

    /// Attention width `num_heads * head_size`.
    pub fn attn_width(&self) -> usize {
        self.num_heads * self.head_size
    }
}

/// Cached layer inputs, oldest first. Every layer holds `len` positions
/// per batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct XlMemory {
    batch: usize,
    hidden: usize,
    len: usize,
    layers: Vec<Vec<f64>>,
}

/// Empty memory for `batch` parallel streams.
pub fn init_memory(config: &XlConfig, batch: usize) -> XlMemory {
    XlMemory {
        batch,
        hidden: config.hidden_size,
        len: 0,
        layers: vec![Vec::new(); config.num_layers],
    }
}

impl XlMemory {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Cached states of layer `l` as `[B, len, hidden]`, or `None` when empty.
    pub fn layer(&self, l: usize) -> Option<Tensor> {
        (self.len > 0).then(|| {
            Tensor::new(vec![self.batch, self.len, self.hidden], self.layers[l].clone())
                .expect("memory layout")
        })
    }

    /// Restores a memory from raw per-layer data, as stored in checkpoints.
    pub fn from_layers(batch: usize, hidden: usize, len: usize, layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.iter().any(|l| l.len() != batch * len * hidden) {
            return Err(Error::Shape(format!(
                "memory layers do not hold {batch} x {len} x {hidden} values"
            )));
        }
        Ok(Self {
            batch,
            hidden,
            len,
            layers,
        })
    }

    pub fn raw_layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Appends `s` new states per row (`[B * s, hidden]`) to layer `l` of
    /// `next`, keeping the most recent `keep` positions.
    fn extend_layer(&self, next: &mut XlMemory, l: usize, new: &[f64], s: usize, keep: usize) {
        let h = self.hidden;
        let total = self.len + s;
        let start = total - keep;
        let mut out = Vec::with_capacity(self.batch * keep * h);
        for b in 0..self.batch {
            for p in start..total {
                if p < self.len {
                    let off = (b * self.len + p) * h;
                    out.extend_from_slice(&self.layers[l][off..off + h]);
                } else {
                    let off = (b * s + p - self.len) * h;
                    out.extend_from_slice(&new[off..off + h]);
                }
            }
        }
        next.layers[l] = out;
    }
}

struct RelAttention {
    wq: usize,
    wk: usize,
    wv: usize,
    wr: usize,
    u: usize,
    v: usize,
    wo: usize,
    bo: usize,
}

struct XlLayer {
    attn: RelAttention,
    ln1: Norm,
    ff: FeedForward,
    ln2: Norm,
}

struct Layout {
    tok_emb: usize,
    layers: Vec<XlLayer>,
    out_bias: usize,
}

fn build(config: &XlConfig, rng: &mut ChaCha8Rng) -> (Params, Layout) {
    let (h, w, std) = (config.hidden_size, config.attn_width(), config.init_std);
    let mut p = Params::new();
    let tok_emb = p.push_normal("tok_emb", &[config.vocab_size, h], std, rng);
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let pre = format!("layer{l}");
        let attn = RelAttention {
            wq: p.push_normal(&format!("{pre}.attn.wq"), &[h, w], std, rng),
            wk: p.push_normal(&format!("{pre}.attn.wk"), &[h, w], std, rng),
            wv: p.push_normal(&format!("{pre}.attn.wv"), &[h, w], std, rng),
            wr: p.push_normal(&format!("{pre}.attn.wr"), &[h, w], std, rng),
            u: p.push_normal(&format!("{pre}.attn.u"), &[w], std, rng),
            v: p.push_normal(&format!("{pre}.attn.v"), &[w], std, rng),
            wo: p.push_normal(&format!("{pre}.attn.wo"), &[w, h], std, rng),
            bo: p.push(format!("{pre}.attn.bo"), Tensor::zeros(&[h])),
        };
        let ln1 = Norm::init(&mut p, &format!("{pre}.ln1"), h);
        let ff = FeedForward::init(&mut p, &pre, h, config.intermediate_size, std, rng);
        let ln2 = Norm::init(&mut p, &format!("{pre}.ln2"), h);
        layers.push(XlLayer { attn, ln1, ff, ln2 });
    }
    let out_bias = p.push("out_bias", Tensor::zeros(&[config.vocab_size]));
    (
        p,
        Layout {
            tok_emb,
            layers,
            out_bias,
        },
    )
}

/// Mean next-token negative log-likelihood (natural log) of `logits [N, V]`
/// (or `[B, s, V]`) against `targets`, skipping [`IGNORE_ID`].
pub fn xl_loss(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let v = logits.last_dim();
    if logits.numel() != targets.len() * v {
        return Err(Error::Shape(format!(
            "logits {:?} for {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        if t == IGNORE_ID {
            continue;
        }
        if t as usize >= v {
            return Err(Error::VocabOverflow {
                id: t as usize,
                vocab: v,
            });
        }
        total -= log_softmax_row(row)[t as usize];
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoSupervisedPositions);
    }
    Ok(total / count as f64)
}

/// Output of one recorded segment.
pub struct SegmentOutput {
    /// Logits `[B * s, V]` on the tape.
    pub logits: Var,
    pub memory: XlMemory,
}

pub struct XlModel {
    config: XlConfig,
    params: Params,
    layout: Layout,
}

impl XlModel {
    pub fn new(config: XlConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build(&config, &mut rng);
        Ok(Self { config, params, layout })
    }

    pub fn from_params(config: XlConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let zero = XlConfig {
            init_std: 0.0,
            ..config.clone()
        };
        let (expected, layout) = build(&zero, &mut ChaCha8Rng::seed_from_u64(0));
        nn::check_layout(&expected, &params)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &XlConfig {
        &self.config
    }

    /// Overrides segment and memory lengths, e.g. for evaluation.
    pub fn set_lengths(&mut self, seg_len: usize, mem_len: usize) -> Result<()> {
        if seg_len == 0 {
            return Err(Error::Config("seg_len must be positive".into()));
        }
        self.config.seg_len = seg_len;
        self.config.mem_len = mem_len;
        Ok(())
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn into_params(self) -> Params {
        self.params
    }

    pub fn init_memory(&self, batch: usize) -> XlMemory {
        init_memory(&self.config, batch)
    }

    /// Records one segment `tokens [batch × s]` on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        tokens: &[u32],
        batch: usize,
        memory: &XlMemory,
        mode: &mut Mode<'_>,
    ) -> Result<SegmentOutput> {
        self.forward_impl(tape, vars, tokens, batch, memory, mode, None)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_impl(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        tokens: &[u32],
        batch: usize,
        memory: &XlMemory,
        mode: &mut Mode<'_>,
        mut scores_out: Option<&mut Vec<Tensor>>,
    ) -> Result<SegmentOutput> {
        let c = &self.config;
        if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
            return Err(Error::Shape(format!("{} tokens for batch {batch}", tokens.len())));
        }
        let s = tokens.len() / batch;
        if s > c.seg_len {
            return Err(Error::SequenceTooLong {
                len: s,
                max: c.seg_len,
            });
        }
        if memory.batch != batch || memory.num_layers() != c.num_layers || memory.hidden != c.hidden_size {
            return Err(Error::Shape(format!(
                "memory for batch {} with {} layers does not fit batch {batch} with {} layers",
                memory.batch,
                memory.num_layers(),
                c.num_layers
            )));
        }
        let (h, nh, d) = (c.hidden_size, c.num_heads, c.head_size);
        let m = memory.len;
        let k = m + s;
        let lay = &self.layout;

        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = tape.embedding(vars[lay.tok_emb], &ids)?;
        let mut x = dropout(tape, x, c.dropout_prob, mode)?;

        let mut idx = vec![0usize; s * k];
        let mut mask = vec![0.0; s * k];
        for i in 0..s {
            for j in 0..k {
                if j <= m + i {
                    idx[i * k + j] = m + i - j;
                } else {
                    mask[i * k + j] = MASKED_SCORE;
                }
            }
        }
        let mask_full: Vec<f64> = (0..batch * nh).flat_map(|_| mask.iter().copied()).collect();
        let mask = tape.constant(Tensor::new(vec![batch * nh, s, k], mask_full)?);
        let rel = tape.constant(sinusoid_table(k, h));
        let scale = 1.0 / (d as f64).sqrt();

        let keep = c.mem_len.min(k);
        let mut next = XlMemory {
            batch,
            hidden: h,
            len: keep,
            layers: vec![Vec::new(); c.num_layers],
        };

        for (l, layer) in lay.layers.iter().enumerate() {
            if keep > 0 {
                memory.extend_layer(&mut next, l, tape.value(x).data(), s, keep);
            }
            let a = &layer.attn;
            let ctx_in = match memory.layer(l) {
                Some(mem) => {
                    let mem = tape.constant(mem);
                    let cur = tape.reshape(x, &[batch, s, h])?;
                    let cat = tape.concat(&[mem, cur], 1)?;
                    tape.reshape(cat, &[batch * k, h])?
                }
                None => x,
            };
            let q = linear(tape, x, vars[a.wq], None)?;
            let key = linear(tape, ctx_in, vars[a.wk], None)?;
            let val = linear(tape, ctx_in, vars[a.wv], None)?;
            let qu = tape.add_row(q, vars[a.u])?;
            let qv = tape.add_row(q, vars[a.v])?;
            let qu = nn::split_heads(tape, qu, batch, s, nh, d)?;
            let qv = nn::split_heads(tape, qv, batch, s, nh, d)?;
            let key = nn::split_heads(tape, key, batch, k, nh, d)?;
            let val = nn::split_heads(tape, val, batch, k, nh, d)?;

            let content = tape.bmm(qu, key, true)?;
            let r = tape.matmul(rel, vars[a.wr])?;
            let r = nn::split_heads(tape, r, 1, k, nh, d)?;
            let by_distance = tape.bmm(qv, r, true)?;
            let position = tape.gather_last(by_distance, &idx, k)?;
            let scores = tape.add(content, position)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add(scores, mask)?;
            if let Some(out) = scores_out.as_deref_mut() {
                out.push(tape.value(scores).clone());
            }
            let probs = tape.softmax(scores)?;
            let ctx = tape.bmm(probs, val, false)?;
            let ctx = nn::merge_heads(tape, ctx, batch, s, nh, d)?;
            let out = linear(tape, ctx, vars[a.wo], Some(vars[a.bo]))?;
            let out = dropout(tape, out, c.dropout_prob, mode)?;
            let y = tape.add(x, out)?;
            let y = layer.ln1.forward(tape, vars, y)?;
            let f = layer.ff.forward(tape, vars, y)?;
            let f = dropout(tape, f, c.dropout_prob, mode)?;
            let y2 = tape.add(y, f)?;
            x = layer.ln2.forward(tape, vars, y2)?;
        }
        let logits = tape.matmul_t(x, vars[lay.tok_emb], false, true)?;
        let logits = tape.add_row(logits, vars[lay.out_bias])?;
        Ok(SegmentOutput { logits, memory: next })
    }

    /// Logits `[B, s, V]` for one segment and the updated memory.
    pub fn forward_segment(
        &self,
        tokens: &[u32],
        batch: usize,
        memory: &XlMemory,
        mut mode: Mode<'_>,
    ) -> Result<(Tensor, XlMemory)> {
        let mut tape = Tape::new();
        let vars = tape.params(&self.params, false);
        let out = self.forward_on_tape(&mut tape, &vars, tokens, batch, memory, &mut mode)?;
        let s = tokens.len() / batch;
        let logits = tape.value(out.logits).reshape(&[batch, s, self.config.vocab_size])?;
        Ok((logits, out.memory))
    }

    /// Scaled, masked pre-softmax attention scores of every layer, each
    /// `[B * heads, s, memory + s]`, in evaluation mode.
    pub fn attention_scores(&self, tokens: &[u32], batch: usize, memory: &XlMemory) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let vars = tape.params(&self.params, false);
        let mut out = Vec::new();
        self.forward_impl(&mut tape, &vars, tokens, batch, memory, &mut Mode::Eval, Some(&mut out))?;
        Ok(out)
    }

    /// Next-token loss of one segment, parameter gradients and the updated
    /// memory.
    pub fn loss_and_grads(
        &self,
        inputs: &[u32],
        targets: &[u32],
        batch: usize,
        memory: &XlMemory,
        mut mode: Mode<'_>,
    ) -> Result<(f64, Vec<Tensor>, XlMemory)> {
        if inputs.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs for {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        let mut tape = Tape::new();
        let vars = tape.params(&self.params, true);
        let out = self.forward_on_tape(&mut tape, &vars, inputs, batch, memory, &mut mode)?;
        let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        let loss = tape.cross_entropy(out.logits, &t, IGNORE_ID as usize)?;
        let value = tape.value(loss).scalar_value()?;
        let mut grads = tape.backward(loss)?;
        let grads = vars.iter().map(|&v| grads.take(v)).collect();
        Ok((value, grads, out.memory))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mem_len: usize) -> XlConfig {
        XlConfig {
            num_layers: 2,
            hidden_size: 6,
            num_heads: 2,
            head_size: 4,
            intermediate_size: 10,
            seg_len: 8,
            mem_len,
            dropout_prob: 0.0,
            vocab_size: 11,
            init_std: 0.4,
        }
    }

    #[test]
    fn memory_starts_empty_and_grows_to_mem_len() {
        let model = XlModel::new(tiny(5), 1).unwrap();
        let mem = model.init_memory(2);
        assert_eq!(mem.len(), 0);
        assert!((0..2).all(|l| mem.layer(l).is_none()));
        let seg = [5, 6, 7, 8, 9, 10];
        let (_, mem) = model.forward_segment(&seg, 2, &mem, Mode::Eval).unwrap();
        assert_eq!(mem.len(), 3);
        let (_, mem) = model.forward_segment(&seg, 2, &mem, Mode::Eval).unwrap();
        assert_eq!(mem.len(), 5);
        assert_eq!(mem.layer(1).unwrap().shape(), &[2, 5, 6]);
    }

    #[test]
    fn zero_mem_len_keeps_memory_empty() {
        let model = XlModel::new(tiny(0), 1).unwrap();
        let mut mem = model.init_memory(1);
        for _ in 0..3 {
            mem = model.forward_segment(&[5, 6, 7], 1, &mem, Mode::Eval).unwrap().1;
            assert!(mem.is_empty());
        }
    }

    #[test]
    fn rejects_long_segments_and_foreign_memory() {
        let model = XlModel::new(tiny(4), 1).unwrap();
        let mem = model.init_memory(1);
        assert!(matches!(
            model.forward_segment(&[5; 9], 1, &mem, Mode::Eval),
            Err(Error::SequenceTooLong { len: 9, max: 8 })
        ));
        let other = model.init_memory(2);
        assert!(model.forward_segment(&[5, 6], 1, &other, Mode::Eval).is_err());
    }

    #[test]
    fn loss_of_uniform_and_perfect_logits() {
        let uniform = Tensor::zeros(&[4, 11]);
        let l = xl_loss(&uniform, &[5, 6, 0, 7]).unwrap();
        assert!((l - 11f64.ln()).abs() < 1e-12);
        let mut sharp = Tensor::zeros(&[2, 11]);
        sharp.data_mut()[5] = 1e4;
        sharp.data_mut()[11 + 6] = 1e4;
        assert_eq!(xl_loss(&sharp, &[5, 6]).unwrap(), 0.0);
        assert!(matches!(xl_loss(&uniform, &[0; 4]), Err(Error::NoSupervisedPositions)));
    }
}
