//! Autoregressive perplexity and masked pseudo-perplexity.
//!
//! Both scores use natural logs internally. `T` counts different things in
//! the two modes: every predicted position after `<s>` including `</s>` for
//! autoregressive scoring, and every non-framing position for pseudo
//! scoring. The two perplexities are therefore not comparable numerically.

use std::fmt::{self, Write as _};
use std::path::Path;

use crate::corpusio::{EncodedCorpus, PaddedBatch};
use crate::error::{Error, Result};
use crate::mlm::{MaskedBatch, MlmModel};
use crate::nn::Mode;
use crate::numcore::log_softmax_row;
use crate::subseg::{EOS, MASK, PAD, SOS};
use crate::xl::XlModel;

/// Masked variants scored per forward pass.
pub const PSEUDO_BATCH: usize = 64;

/// A left-to-right model that can score a sequence from a fresh state.
pub trait AutoregressiveLm {
    fn vocab_size(&self) -> usize;

    /// `log p(targets[t] | inputs[..=t])` for every `t`.
    fn sequence_log_probs(&self, inputs: &[u32], targets: &[u32]) -> Result<Vec<f64>>;
}

/// A bidirectional model that predicts masked positions.
pub trait MaskedLm {
    fn vocab_size(&self) -> usize;

    fn max_len(&self) -> usize;

    /// For each variant (all the same length), the log-probability of
    /// `targets[k]` at `positions[k]`.
    fn masked_log_probs(&self, variants: &[Vec<u32>], positions: &[usize], targets: &[u32]) -> Result<Vec<f64>>;
}

impl AutoregressiveLm for XlModel {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    /// Feeds the sequence in segments of `seg_len`, carrying memory.
    fn sequence_log_probs(&self, inputs: &[u32], targets: &[u32]) -> Result<Vec<f64>> {
        let mut memory = self.init_memory(1);
        let mut out = Vec::with_capacity(inputs.len());
        let v = self.config().vocab_size;
        let seg = self.config().seg_len;
        for (chunk, tchunk) in inputs.chunks(seg).zip(targets.chunks(seg)) {
            let (logits, next) = self.forward_segment(chunk, 1, &memory, Mode::Eval)?;
            for (row, &t) in logits.data().chunks(v).zip(tchunk) {
                out.push(log_softmax_row(row)[t as usize]);
            }
            memory = next;
        }
        Ok(out)
    }
}

impl MaskedLm for MlmModel {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_len(&self) -> usize {
        self.config().max_position
    }

    fn masked_log_probs(&self, variants: &[Vec<u32>], positions: &[usize], targets: &[u32]) -> Result<Vec<f64>> {
        let batch = MaskedBatch::unmasked(&PaddedBatch::from_sequences(variants)?);
        let logits = self.encode(&batch, Mode::Eval)?;
        let (t, v) = (batch.seq_len, self.config().vocab_size);
        Ok(positions
            .iter()
            .zip(targets)
            .enumerate()
            .map(|(k, (&i, &target))| {
                let off = (k * t + i) * v;
                log_softmax_row(&logits.data()[off..off + v])[target as usize]
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Autoregressive,
    Pseudo,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Autoregressive => "ar",
            EvalMode::Pseudo => "pseudo",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SentenceScore {
    pub id: usize,
    pub log_prob: f64,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub total_log_prob: f64,
    pub token_count: usize,
    pub perplexity: f64,
    pub unk: usize,
    pub per_sentence: Vec<SentenceScore>,
}

impl EvalReport {
    pub fn from_scores(mode: EvalMode, per_sentence: Vec<SentenceScore>, unk: usize) -> Result<Self> {
        let token_count: usize = per_sentence.iter().map(|s| s.length).sum();
        if token_count == 0 {
            return Err(Error::EmptyInput);
        }
        let total_log_prob: f64 = per_sentence.iter().map(|s| s.log_prob).sum();
        Ok(Self {
            mode,
            total_log_prob,
            token_count,
            perplexity: (-total_log_prob / token_count as f64).exp(),
            unk,
            per_sentence,
        })
    }

    /// `mode=<ar|pseudo> T=<int> logprob=<float> ppl=<float> unk=<int>`
    pub fn summary_line(&self) -> String {
        format!(
            "mode={} T={} logprob={} ppl={} unk={}",
            self.mode, self.token_count, self.total_log_prob, self.perplexity, self.unk
        )
    }

    /// One `id<TAB>length<TAB>log_prob` line per sentence under a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tlength\tlog_prob\n");
        for s in &self.per_sentence {
            let _ = writeln!(out, "{}\t{}\t{}", s.id, s.length, s.log_prob);
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&t| t as usize >= vocab) {
        Some(&t) => Err(Error::VocabOverflow {
            id: t as usize,
            vocab,
        }),
        None => Ok(()),
    }
}

/// Chain-rule log-probability of a framed sentence `<s> x </s>` and the
/// number of predicted positions. A bare `<s> </s>` scores `</s>` alone.
pub fn sentence_log_prob_ar<M: AutoregressiveLm + ?Sized>(model: &M, framed: &[u32]) -> Result<(f64, usize)> {
    if framed.len() < 2 || framed[0] != SOS || framed[framed.len() - 1] != EOS {
        return Err(Error::InvalidArgument("sentence must be framed as <s> ... </s>".into()));
    }
    check_ids(framed, model.vocab_size())?;
    let n = framed.len() - 1;
    let lps = model.sequence_log_probs(&framed[..n], &framed[1..])?;
    Ok((lps.iter().sum(), n))
}

/// Autoregressive perplexity with the model state reset for every sentence.
pub fn corpus_perplexity_ar<M: AutoregressiveLm + ?Sized>(model: &M, corpus: &EncodedCorpus) -> Result<EvalReport> {
    let scores = corpus
        .sequences
        .iter()
        .enumerate()
        .map(|(id, s)| {
            sentence_log_prob_ar(model, s).map(|(log_prob, length)| SentenceScore { id, log_prob, length })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(EvalMode::Autoregressive, scores, corpus.unk)
}

/// Add-one unigram model estimated from `train`, scored under the same
/// convention as [`corpus_perplexity_ar`]: every position after `<s>`
/// counts, `</s>` included.
pub fn unigram_perplexity(train: &EncodedCorpus, eval: &EncodedCorpus, vocab_size: usize) -> Result<EvalReport> {
    let mut counts = vec![1.0; vocab_size];
    for s in &train.sequences {
        check_ids(s, vocab_size)?;
        for &t in s.iter().skip(1) {
            counts[t as usize] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let scores = eval
        .sequences
        .iter()
        .enumerate()
        .map(|(id, s)| {
            check_ids(s, vocab_size)?;
            let lp = s.iter().skip(1).map(|&t| (counts[t as usize] / total).ln()).sum();
            Ok(SentenceScore {
                id,
                log_prob: lp,
                length: s.len().saturating_sub(1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(EvalMode::Autoregressive, scores, eval.unk)
}

fn is_framing(id: u32) -> bool {
    id == SOS || id == EOS || id == PAD
}

/// Sum over scored positions of `log p(x_i | every other position)`, each
/// obtained by masking position `i` alone. Variants are scored in groups of
/// `batch_size`.
pub fn sentence_pseudo_log_prob<M: MaskedLm + ?Sized>(model: &M, ids: &[u32], batch_size: usize) -> Result<(f64, usize)> {
    if ids.len() > model.max_len() {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: model.max_len(),
        });
    }
    if let Some(i) = ids.iter().position(|&t| t == MASK) {
        return Err(Error::InvalidArgument(format!("input already contains MASK at position {i}")));
    }
    check_ids(ids, model.vocab_size())?;
    let positions: Vec<usize> = (0..ids.len()).filter(|&i| !is_framing(ids[i])).collect();
    let mut total = 0.0;
    for group in positions.chunks(batch_size.max(1)) {
        let variants: Vec<Vec<u32>> = group
            .iter()
            .map(|&i| {
                let mut v = ids.to_vec();
                v[i] = MASK;
                v
            })
            .collect();
        let targets: Vec<u32> = group.iter().map(|&i| ids[i]).collect();
        total += model.masked_log_probs(&variants, group, &targets)?.iter().sum::<f64>();
    }
    Ok((total, positions.len()))
}

pub fn corpus_pseudo_perplexity<M: MaskedLm + ?Sized>(
    model: &M,
    corpus: &EncodedCorpus,
    batch_size: usize,
) -> Result<EvalReport> {
    let scores = corpus
        .sequences
        .iter()
        .enumerate()
        .map(|(id, s)| {
            sentence_pseudo_log_prob(model, s, batch_size)
                .map(|(log_prob, length)| SentenceScore { id, log_prob, length })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_scores(EvalMode::Pseudo, scores, corpus.unk)
}
