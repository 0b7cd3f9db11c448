//! Perplexity and pseudo-perplexity against count tables, hand computations
//! and the loop-based encoder.

mod common;

use std::collections::HashMap;

use common::reference::encoder_logits;
use common::*;
use rand::Rng;
use subword_lm::corpusio::EncodedCorpus;
use subword_lm::mlm::{EncoderConfig, MlmModel};
use subword_lm::nn::Mode;
use subword_lm::numcore::{log_softmax_row, Tensor};
use subword_lm::scorer::{
    corpus_perplexity_ar, corpus_pseudo_perplexity, sentence_log_prob_ar, sentence_pseudo_log_prob, AutoregressiveLm,
    MaskedLm,
};
use subword_lm::subseg::{EOS, MASK, SOS, UNK};
use subword_lm::xl::{xl_loss, XlConfig, XlModel};
use subword_lm::Result;

fn toy_corpus(n: usize, vocab: u32, seed: u64) -> Vec<Vec<u32>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let len = r.gen_range(0..6);
            let mut s = vec![SOS];
            s.extend((0..len).map(|_| r.gen_range(5..vocab)));
            s.push(EOS);
            s
        })
        .collect()
}

/// Maximum-likelihood bigram model over a corpus, exposed through log
/// probabilities computed from counts.
struct Bigram {
    vocab: usize,
    log_probs: Vec<Vec<f64>>,
}

impl Bigram {
    fn fit(corpus: &[Vec<u32>], vocab: usize) -> Self {
        let mut counts = vec![vec![0u64; vocab]; vocab];
        for s in corpus {
            for w in s.windows(2) {
                counts[w[0] as usize][w[1] as usize] += 1;
            }
        }
        let log_probs = counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if total == 0 { -(vocab as f64).ln() } else { (c as f64 / total as f64).ln() })
                    .collect()
            })
            .collect();
        Self { vocab, log_probs }
    }
}

impl AutoregressiveLm for Bigram {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn sequence_log_probs(&self, inputs: &[u32], targets: &[u32]) -> Result<Vec<f64>> {
        Ok(inputs
            .iter()
            .zip(targets)
            .map(|(&a, &b)| self.log_probs[a as usize][b as usize])
            .collect())
    }
}

#[test]
fn bigram_model_matches_count_table_perplexity() {
    let vocab = 12;
    let corpus = toy_corpus(20, vocab as u32, 1);
    let model = Bigram::fit(&corpus, vocab);
    let report = corpus_perplexity_ar(
        &model,
        &EncodedCorpus {
            sequences: corpus.clone(),
            unk: 0,
        },
    )
    .unwrap();

    let mut pair: HashMap<(u32, u32), f64> = HashMap::new();
    let mut left: HashMap<u32, f64> = HashMap::new();
    for s in &corpus {
        for w in s.windows(2) {
            *pair.entry((w[0], w[1])).or_default() += 1.0;
            *left.entry(w[0]).or_default() += 1.0;
        }
    }
    let mut log_p = 0.0;
    let mut t = 0usize;
    for s in &corpus {
        for w in s.windows(2) {
            log_p += (pair[&(w[0], w[1])] / left[&w[0]]).ln();
            t += 1;
        }
    }
    let brute = (-log_p / t as f64).exp();
    assert_eq!(report.token_count, t);
    assert!((report.perplexity - brute).abs() < 1e-9, "{} vs {brute}", report.perplexity);
    assert_eq!(report.perplexity, (-report.total_log_prob / t as f64).exp());
}

fn zero_xl(vocab: usize) -> XlModel {
    XlModel::new(
        XlConfig {
            init_std: 0.0,
            seg_len: 3,
            mem_len: 3,
            ..XlConfig::desk(vocab)
        },
        0,
    )
    .unwrap()
}

#[test]
fn zero_initialized_model_has_perplexity_equal_to_vocab_size() {
    let model = zero_xl(23);
    let corpus = EncodedCorpus {
        sequences: toy_corpus(10, 23, 2),
        unk: 0,
    };
    let report = corpus_perplexity_ar(&model, &corpus).unwrap();
    assert!((report.perplexity - 23.0).abs() < 1e-9);
    let (lp, n) = sentence_log_prob_ar(&model, &corpus.sequences[0]).unwrap();
    assert!((lp + n as f64 * 23f64.ln()).abs() < 1e-9);
}

/// Two regular symbols `a = 5`, `b = 6`; the next-token distribution
/// depends only on the previous token.
struct HandSet;

impl AutoregressiveLm for HandSet {
    fn vocab_size(&self) -> usize {
        7
    }

    fn sequence_log_probs(&self, inputs: &[u32], targets: &[u32]) -> Result<Vec<f64>> {
        Ok(inputs
            .iter()
            .zip(targets)
            .map(|(&prev, &t)| {
                let mut logits = vec![-30.0; 7];
                match prev {
                    SOS => (logits[5], logits[6]) = (2.0, 0.0),
                    5 => (logits[5], logits[6], logits[EOS as usize]) = (0.0, 1.0, 0.0),
                    _ => (logits[5], logits[EOS as usize]) = (1.0, 1.0),
                }
                log_softmax_row(&logits)[t as usize]
            })
            .collect())
    }
}

#[test]
fn hand_set_chain_probability() {
    let (lp, n) = sentence_log_prob_ar(&HandSet, &[SOS, 5, 6, EOS]).unwrap();
    assert_eq!(n, 3);
    let e = std::f64::consts::E;
    let tiny = (-30f64).exp();
    let p_a = e * e / (e * e + 1.0 + 5.0 * tiny);
    let p_b_after_a = e / (1.0 + e + 1.0 + 4.0 * tiny);
    let p_eos_after_b = e / (2.0 * e + 5.0 * tiny);
    let expected = p_a * p_b_after_a * p_eos_after_b;
    assert!((lp - expected.ln()).abs() < 1e-12);
}

#[test]
fn perplexity_equals_exp_of_training_loss() {
    let mut r = rng(3);
    let cfg = XlConfig {
        num_layers: 2,
        hidden_size: 6,
        num_heads: 2,
        head_size: 3,
        intermediate_size: 8,
        seg_len: 4,
        mem_len: 4,
        dropout_prob: 0.0,
        vocab_size: 10,
        init_std: 0.5,
    };
    let model = XlModel::new(cfg, 3).unwrap();
    let sequences: Vec<Vec<u32>> = (0..3)
        .map(|_| {
            let mut s = vec![SOS];
            s.extend((0..5).map(|_| r.gen_range(5..10)));
            s.push(EOS);
            s
        })
        .collect();
    let report = corpus_perplexity_ar(
        &model,
        &EncodedCorpus {
            sequences: sequences.clone(),
            unk: 0,
        },
    )
    .unwrap();
    let mut logits = Vec::new();
    let mut targets = Vec::new();
    for s in &sequences {
        let mut mem = model.init_memory(1);
        for (chunk, tchunk) in s[..6].chunks(4).zip(s[1..].chunks(4)) {
            let (l, next) = model.forward_segment(chunk, 1, &mem, Mode::Eval).unwrap();
            logits.extend_from_slice(l.data());
            targets.extend_from_slice(tchunk);
            mem = next;
        }
    }
    let logits = Tensor::new(vec![targets.len(), 10], logits).unwrap();
    let loss = xl_loss(&logits, &targets).unwrap();
    assert!((report.perplexity - loss.exp()).abs() < 1e-9 * loss.exp());
}

fn hand_encoder() -> MlmModel {
    let cfg = EncoderConfig {
        num_layers: 1,
        hidden_size: 2,
        num_heads: 1,
        intermediate_size: 2,
        dropout_prob: 0.0,
        max_position: 4,
        vocab_size: 8,
        init_std: 0.0,
    };
    let mut model = MlmModel::new(cfg, 0).unwrap();
    let params = model.params_mut();
    for i in 0..params.len() {
        let name = params.name(i).to_string();
        let t = params.get_mut(i);
        let n = t.numel();
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            let h = (name.len() * 31 + k * 17) as f64;
            *v = match name.as_str() {
                "emb_ln.g" | "layer0.ln1.g" | "layer0.ln2.g" => 1.0 + 0.1 * k as f64,
                _ => ((h * 0.37).sin() * 0.8 + 0.05 * (n - k) as f64).clamp(-1.5, 1.5),
            };
        }
    }
    model
}

#[test]
fn two_token_pseudo_log_prob_matches_manual_forwards() {
    let model = hand_encoder();
    let ids = [SOS, 6, 7, EOS];
    let (lp, n) = sentence_pseudo_log_prob(&model, &ids, 64).unwrap();
    assert_eq!(n, 2);
    let mut expected = 0.0;
    for i in [1, 2] {
        let mut v = ids.to_vec();
        v[i] = MASK;
        let logits = encoder_logits(model.params(), 1, 2, 1, 2, 8, &v, &[true; 4]);
        expected += log_softmax_row(&logits[i])[ids[i] as usize];
    }
    assert!((lp - expected).abs() < 1e-10, "{lp} vs {expected}");
}

#[test]
fn pseudo_scores_do_not_depend_on_batching() {
    let model = MlmModel::new(
        EncoderConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            intermediate_size: 8,
            dropout_prob: 0.1,
            max_position: 12,
            vocab_size: 15,
            init_std: 0.4,
        },
        5,
    )
    .unwrap();
    let mut r = rng(5);
    let mut ids = vec![SOS];
    ids.extend((0..8).map(|_| r.gen_range(5..15)));
    ids.push(EOS);
    let (one, n) = sentence_pseudo_log_prob(&model, &ids, 1).unwrap();
    let (all, _) = sentence_pseudo_log_prob(&model, &ids, n).unwrap();
    assert!((one - all).abs() < 1e-10);
}

/// Per-variant conditionals, for probing which context a score used.
fn conditionals(model: &MlmModel, ids: &[u32]) -> Vec<f64> {
    (1..ids.len() - 1)
        .map(|i| {
            let mut v = ids.to_vec();
            v[i] = MASK;
            model.masked_log_probs(&[v], &[i], &[ids[i]]).unwrap()[0]
        })
        .collect()
}

#[test]
fn pseudo_scores_use_right_context() {
    for seed in 0..10 {
        let model = MlmModel::new(
            EncoderConfig {
                init_std: 0.5,
                ..EncoderConfig::desk(12)
            },
            seed,
        )
        .unwrap();
        let mut r = rng(seed);
        let mut ids = vec![SOS];
        ids.extend((0..5).map(|_| r.gen_range(5..12)));
        ids.push(EOS);
        let before = conditionals(&model, &ids);
        ids[4] = UNK;
        let after = conditionals(&model, &ids);
        for i in 0..3 {
            assert!((before[i] - after[i]).abs() > 1e-9, "seed {seed} position {}", i + 1);
        }
    }
}

/// Wraps a masked model and mixes its predictive distribution toward the
/// true token with weight `lambda`.
struct Sharpened<'m> {
    inner: &'m MlmModel,
    lambda: f64,
}

impl MaskedLm for Sharpened<'_> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn max_len(&self) -> usize {
        self.inner.max_len()
    }

    fn masked_log_probs(&self, variants: &[Vec<u32>], positions: &[usize], targets: &[u32]) -> Result<Vec<f64>> {
        let lps = self.inner.masked_log_probs(variants, positions, targets)?;
        Ok(lps
            .iter()
            .map(|lp| ((1.0 - self.lambda) * lp.exp() + self.lambda).ln())
            .collect())
    }
}

#[test]
fn sharpening_never_increases_pseudo_perplexity() {
    let model = hand_encoder();
    let corpus = EncodedCorpus {
        sequences: vec![vec![SOS, 6, 7, EOS], vec![SOS, 5, EOS]],
        unk: 0,
    };
    let mut last = f64::INFINITY;
    for step in 0..=10 {
        let lambda = step as f64 / 10.0;
        let ppl = corpus_pseudo_perplexity(&Sharpened { inner: &model, lambda }, &corpus, 64)
            .unwrap()
            .perplexity;
        assert!(ppl <= last + 1e-12, "lambda {lambda}: {ppl} > {last}");
        last = ppl;
    }
    assert_eq!(last, 1.0);
}

#[test]
fn per_sentence_scores_add_up() {
    let model = zero_xl(9);
    let corpus = EncodedCorpus {
        sequences: toy_corpus(6, 9, 4),
        unk: 0,
    };
    let report = corpus_perplexity_ar(&model, &corpus).unwrap();
    let sum: f64 = report.per_sentence.iter().map(|s| s.log_prob).sum();
    assert!((sum - report.total_log_prob).abs() < 1e-9);
    let lens: usize = report.per_sentence.iter().map(|s| s.length).sum();
    assert_eq!(lens, report.token_count);
}
