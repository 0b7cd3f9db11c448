//! Bidirectional transformer encoder trained with the masked-LM objective.
//!
//! Input is a single segment framed as `<s> tokens </s>`. There is no
//! sentence-pair objective and no classification token. The output
//! projection reuses the token embedding matrix and adds its own bias.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpusio::PaddedBatch;
use crate::error::{Error, Result};
use crate::nn::{self, dropout, linear, FeedForward, Mode, Norm, MASKED_SCORE};
use crate::numcore::{argmax, log_softmax_row, Params, Tape, Tensor, Var};
use crate::subseg::{MASK, NUM_SPECIAL, PAD};

/// Target value at positions that carry no supervision.
pub const IGNORE_ID: u32 = PAD;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub dropout_prob: f64,
    pub max_position: usize,
    pub vocab_size: usize,
    /// Standard deviation of the initial weight matrices.
    pub init_std: f64,
}

impl EncoderConfig {
    /// Desk-scale defaults: 4 layers, 128 hidden, 4 heads, 512 inner, 128 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            num_layers: 4,
            hidden_size: 128,
            num_heads: 4,
            intermediate_size: 512,
            dropout_prob: 0.1,
            max_position: 128,
            vocab_size,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("intermediate_size", self.intermediate_size),
            ("max_position", self.max_position),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
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

    fn head_size(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// Selection probability and how selected positions are rewritten. The
/// remainder `1 - mask_frac - random_frac` is left unchanged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskPolicy {
    pub mask_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
        }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidArgument(format!(
                "mask_prob {} outside [0, 1]",
                self.mask_prob
            )));
        }
        let ok = self.mask_frac >= 0.0
            && self.random_frac >= 0.0
            && self.mask_frac + self.random_frac <= 1.0 + 1e-12;
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "replacement proportions {} / {} do not form a distribution",
                self.mask_frac, self.random_frac
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub input_ids: Vec<u32>,
    /// `true` at real positions.
    pub attention_padding_mask: Vec<bool>,
    /// Original id at selected positions, [`IGNORE_ID`] elsewhere.
    pub mlm_targets: Vec<u32>,
}

impl MaskedBatch {
    /// A batch with the given inputs and no supervision.
    pub fn unmasked(batch: &PaddedBatch) -> Self {
        Self {
            batch: batch.batch,
            seq_len: batch.seq_len,
            input_ids: batch.ids.clone(),
            attention_padding_mask: batch.padding_mask(),
            mlm_targets: vec![IGNORE_ID; batch.ids.len()],
        }
    }

    pub fn num_targets(&self) -> usize {
        self.mlm_targets.iter().filter(|&&t| t != IGNORE_ID).count()
    }

    /// Flat indices of supervised positions.
    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.mlm_targets.len())
            .filter(|&i| self.mlm_targets[i] != IGNORE_ID)
            .collect()
    }
}

/// Selects and rewrites positions for the masked-LM objective.
///
/// Positions are visited in row-major order. Each eligible position (a
/// regular token, not special and not padding) consumes one uniform draw
/// for selection; a selected position consumes a second draw for the
/// rewrite and, for a random replacement, a third for the token, drawn
/// uniformly from the regular ids `NUM_SPECIAL..vocab_size`.
pub fn mask_tokens<R: Rng>(
    batch: &PaddedBatch,
    policy: &MaskPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedBatch> {
    policy.validate()?;
    let mut out = MaskedBatch::unmasked(batch);
    for (i, &id) in batch.ids.iter().enumerate() {
        if id == MASK {
            return Err(Error::InvalidArgument(format!("input already contains MASK at position {i}")));
        }
        if id as usize >= vocab_size {
            return Err(Error::VocabOverflow {
                id: id as usize,
                vocab: vocab_size,
            });
        }
        if id < NUM_SPECIAL {
            continue;
        }
        if rng.gen::<f64>() >= policy.mask_prob {
            continue;
        }
        out.mlm_targets[i] = id;
        let r = rng.gen::<f64>();
        if r < policy.mask_frac {
            out.input_ids[i] = MASK;
        } else if r < policy.mask_frac + policy.random_frac {
            out.input_ids[i] = rng.gen_range(NUM_SPECIAL..vocab_size as u32);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmMetrics {
    pub masked_lm_loss: f64,
    pub masked_lm_accuracy: f64,
    pub supervised: usize,
}

/// Cross-entropy (natural log) and argmax accuracy over supervised
/// positions of `logits [N, V]` (or `[B, T, V]`).
pub fn mlm_metrics(logits: &Tensor, targets: &[u32]) -> Result<MlmMetrics> {
    let v = logits.last_dim();
    if logits.numel() != targets.len() * v {
        return Err(Error::Shape(format!(
            "logits {:?} for {} targets",
            logits.shape(),
            targets.len()
        )));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut count = 0usize;
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        if t == IGNORE_ID {
            continue;
        }
        let t = t as usize;
        if t >= v {
            return Err(Error::VocabOverflow { id: t, vocab: v });
        }
        loss -= log_softmax_row(row)[t];
        correct += usize::from(argmax(row) == t);
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoSupervisedPositions);
    }
    Ok(MlmMetrics {
        masked_lm_loss: loss / count as f64,
        masked_lm_accuracy: correct as f64 / count as f64,
        supervised: count,
    })
}

struct Attention {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

struct EncoderLayer {
    attn: Attention,
    ln1: Norm,
    ff: FeedForward,
    ln2: Norm,
}

struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    emb_ln: Norm,
    layers: Vec<EncoderLayer>,
    out_bias: usize,
}

fn build(config: &EncoderConfig, rng: &mut ChaCha8Rng) -> (Params, Layout) {
    let (h, std) = (config.hidden_size, config.init_std);
    let mut p = Params::new();
    let tok_emb = p.push_normal("tok_emb", &[config.vocab_size, h], std, rng);
    let pos_emb = p.push_normal("pos_emb", &[config.max_position, h], std, rng);
    let emb_ln = Norm::init(&mut p, "emb_ln", h);
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let pre = format!("layer{l}");
        let mut proj = |p: &mut Params, name: &str| {
            (
                p.push_normal(&format!("{pre}.attn.w{name}"), &[h, h], std, rng),
                p.push(format!("{pre}.attn.b{name}"), Tensor::zeros(&[h])),
            )
        };
        let (wq, bq) = proj(&mut p, "q");
        let (wk, bk) = proj(&mut p, "k");
        let (wv, bv) = proj(&mut p, "v");
        let (wo, bo) = proj(&mut p, "o");
        let attn = Attention {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        };
        let ln1 = Norm::init(&mut p, &format!("{pre}.ln1"), h);
        let ff = FeedForward::init(&mut p, &pre, h, config.intermediate_size, std, rng);
        let ln2 = Norm::init(&mut p, &format!("{pre}.ln2"), h);
        layers.push(EncoderLayer { attn, ln1, ff, ln2 });
    }
    let out_bias = p.push("out_bias", Tensor::zeros(&[config.vocab_size]));
    (
        p,
        Layout {
            tok_emb,
            pos_emb,
            emb_ln,
            layers,
            out_bias,
        },
    )
}

/// Masked-LM encoder: configuration plus parameters.
pub struct MlmModel {
    config: EncoderConfig,
    params: Params,
    layout: Layout,
}

impl MlmModel {
    /// Random initialization: weight matrices from `N(0, init_std^2)`,
    /// biases zero, layer-norm gains one.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build(&config, &mut rng);
        Ok(Self { config, params, layout })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: EncoderConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let zero = EncoderConfig {
            init_std: 0.0,
            ..config.clone()
        };
        let (expected, layout) = build(&zero, &mut ChaCha8Rng::seed_from_u64(0));
        nn::check_layout(&expected, &params)?;
        Ok(Self { config, params, layout })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
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

    /// Records the encoder on `tape` and returns logits `[B * T, V]`.
    /// `vars` are the tape handles of [`Self::params`], in order.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], batch: &MaskedBatch, mode: &mut Mode<'_>) -> Result<Var> {
        let c = &self.config;
        let (b, t) = (batch.batch, batch.seq_len);
        if t > c.max_position {
            return Err(Error::SequenceTooLong {
                len: t,
                max: c.max_position,
            });
        }
        let lay = &self.layout;
        let ids: Vec<usize> = batch.input_ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let tok = tape.embedding(vars[lay.tok_emb], &ids)?;
        let pos = tape.embedding(vars[lay.pos_emb], &positions)?;
        let x = tape.add(tok, pos)?;
        let x = lay.emb_ln.forward(tape, vars, x)?;
        let mut x = dropout(tape, x, c.dropout_prob, mode)?;

        let (nh, d) = (c.num_heads, c.head_size());
        let mut bias = Vec::with_capacity(b * nh * t * t);
        for bi in 0..b {
            let keys = &batch.attention_padding_mask[bi * t..(bi + 1) * t];
            for _ in 0..nh * t {
                bias.extend(keys.iter().map(|&real| if real { 0.0 } else { MASKED_SCORE }));
            }
        }
        let bias = tape.constant(Tensor::new(vec![b * nh, t, t], bias)?);
        let scale = 1.0 / (d as f64).sqrt();

        for layer in &lay.layers {
            let a = &layer.attn;
            let q = linear(tape, x, vars[a.wq], Some(vars[a.bq]))?;
            let k = linear(tape, x, vars[a.wk], Some(vars[a.bk]))?;
            let v = linear(tape, x, vars[a.wv], Some(vars[a.bv]))?;
            let q = nn::split_heads(tape, q, b, t, nh, d)?;
            let k = nn::split_heads(tape, k, b, t, nh, d)?;
            let v = nn::split_heads(tape, v, b, t, nh, d)?;
            let scores = tape.bmm(q, k, true)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add(scores, bias)?;
            let probs = tape.softmax(scores)?;
            let ctx = tape.bmm(probs, v, false)?;
            let ctx = nn::merge_heads(tape, ctx, b, t, nh, d)?;
            let out = linear(tape, ctx, vars[a.wo], Some(vars[a.bo]))?;
            let out = dropout(tape, out, c.dropout_prob, mode)?;
            let h = tape.add(x, out)?;
            let h = layer.ln1.forward(tape, vars, h)?;
            let f = layer.ff.forward(tape, vars, h)?;
            let f = dropout(tape, f, c.dropout_prob, mode)?;
            let h2 = tape.add(h, f)?;
            x = layer.ln2.forward(tape, vars, h2)?;
        }
        let logits = tape.matmul_t(x, vars[lay.tok_emb], false, true)?;
        tape.add_row(logits, vars[lay.out_bias])
    }

    /// Logits `[B, T, V]` without recording gradients.
    pub fn encode(&self, batch: &MaskedBatch, mut mode: Mode<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = tape.params(&self.params, false);
        let logits = self.forward(&mut tape, &vars, batch, &mut mode)?;
        tape.value(logits)
            .reshape(&[batch.batch, batch.seq_len, self.config.vocab_size])
    }

    /// Masked-LM loss, metrics and one gradient per parameter.
    pub fn loss_and_grads(&self, batch: &MaskedBatch, mut mode: Mode<'_>) -> Result<(MlmMetrics, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = tape.params(&self.params, true);
        let logits = self.forward(&mut tape, &vars, batch, &mut mode)?;
        let metrics = mlm_metrics(tape.value(logits), &batch.mlm_targets)?;
        let targets: Vec<usize> = batch.mlm_targets.iter().map(|&t| t as usize).collect();
        let loss = tape.cross_entropy(logits, &targets, IGNORE_ID as usize)?;
        let mut grads = tape.backward(loss)?;
        let grads = vars.iter().map(|&v| grads.take(v)).collect();
        Ok((metrics, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            intermediate_size: 12,
            dropout_prob: 0.1,
            max_position: 16,
            vocab_size: 13,
            init_std: 0.3,
        }
    }

    fn batch(rows: &[&[u32]]) -> PaddedBatch {
        PaddedBatch::from_sequences(rows).unwrap()
    }

    #[test]
    fn mask_prob_zero_is_identity() {
        let b = batch(&[&[3, 5, 6, 7, 4]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = MaskPolicy {
            mask_prob: 0.0,
            ..MaskPolicy::default()
        };
        let m = mask_tokens(&b, &policy, 13, &mut rng).unwrap();
        assert_eq!(m.input_ids, b.ids);
        assert_eq!(m.num_targets(), 0);
    }

    #[test]
    fn full_masking_targets_every_regular_token() {
        let b = batch(&[&[3, 5, 6, 4], &[3, 9, 4]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = MaskPolicy {
            mask_prob: 1.0,
            mask_frac: 1.0,
            random_frac: 0.0,
        };
        let m = mask_tokens(&b, &policy, 13, &mut rng).unwrap();
        assert_eq!(m.input_ids, vec![3, MASK, MASK, 4, 3, MASK, 4, PAD]);
        assert_eq!(m.mlm_targets, vec![0, 5, 6, 0, 0, 9, 0, 0]);
    }

    #[test]
    fn rejects_bad_policy_and_existing_mask() {
        let b = batch(&[&[3, 5, 4]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bad = MaskPolicy {
            mask_prob: 1.5,
            ..MaskPolicy::default()
        };
        assert!(mask_tokens(&b, &bad, 13, &mut rng).is_err());
        let masked = batch(&[&[3, MASK, 4]]);
        assert!(mask_tokens(&masked, &MaskPolicy::default(), 13, &mut rng).is_err());
    }

    #[test]
    fn metrics_on_one_hot_and_uniform_logits() {
        let mut data = vec![0.0; 2 * 100];
        data[7] = 1e4;
        data[100 + 42] = 1e4;
        let logits = Tensor::new(vec![2, 100], data).unwrap();
        let m = mlm_metrics(&logits, &[7, 42]).unwrap();
        assert_eq!(m.masked_lm_loss, 0.0);
        assert_eq!(m.masked_lm_accuracy, 1.0);

        let uniform = Tensor::zeros(&[3, 100]);
        let m = mlm_metrics(&uniform, &[7, 0, 42]).unwrap();
        assert!((m.masked_lm_loss - 100f64.ln()).abs() < 1e-12);
        assert_eq!(m.supervised, 2);
        assert!(matches!(
            mlm_metrics(&uniform, &[0, 0, 0]),
            Err(Error::NoSupervisedPositions)
        ));
    }

    #[test]
    fn encode_shape_and_length_limit() {
        let model = MlmModel::new(tiny(), 3).unwrap();
        let m = MaskedBatch::unmasked(&batch(&[&[3, 5, 6, 4], &[3, 9, 4]]));
        let logits = model.encode(&m, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), &[2, 4, 13]);
        let long: Vec<u32> = vec![5; 17];
        let m = MaskedBatch::unmasked(&batch(&[&long]));
        assert!(matches!(
            model.encode(&m, Mode::Eval),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn eval_mode_is_bit_identical_and_train_mode_uses_dropout() {
        let model = MlmModel::new(tiny(), 3).unwrap();
        let m = MaskedBatch::unmasked(&batch(&[&[3, 5, 6, 7, 8, 4]]));
        let a = model.encode(&m, Mode::Eval).unwrap();
        let b = model.encode(&m, Mode::Eval).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = model.encode(&m, Mode::Train(&mut rng)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn from_params_rejects_foreign_layout() {
        let model = MlmModel::new(tiny(), 3).unwrap();
        let params = model.into_params();
        let other = EncoderConfig {
            hidden_size: 6,
            ..tiny()
        };
        assert!(matches!(
            MlmModel::from_params(other, params.clone()),
            Err(Error::ConfigMismatch(_))
        ));
        assert!(MlmModel::from_params(tiny(), params).is_ok());
    }
}
