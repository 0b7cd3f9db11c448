use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PaddedBatch;
use crate::error::{Error, Result};
use crate::subseg::{tokenize, SegmentationModel, SubwordVocab, EOS, SOS};

/// Segments, marks and encodes one preprocessed sentence as
/// `<s> ids </s>`. Returns the ids and how many tokens fell back to `<unk>`.
pub fn encode_sentence(sentence: &str, model: &SegmentationModel, vocab: &SubwordVocab) -> Result<(Vec<u32>, usize)> {
    let tokens = tokenize(model, sentence, vocab.scheme())?;
    let (ids, unk) = vocab.encode(&tokens);
    let mut framed = Vec::with_capacity(ids.len() + 2);
    framed.push(SOS);
    framed.extend(ids);
    framed.push(EOS);
    Ok((framed, unk))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodedCorpus {
    pub sequences: Vec<Vec<u32>>,
    pub unk: usize,
}

pub fn encode_corpus<S: AsRef<str>>(
    sentences: &[S],
    model: &SegmentationModel,
    vocab: &SubwordVocab,
) -> Result<EncodedCorpus> {
    let mut out = EncodedCorpus::default();
    for s in sentences {
        let (ids, unk) = encode_sentence(s.as_ref(), model, vocab)?;
        out.sequences.push(ids);
        out.unk += unk;
    }
    Ok(out)
}

/// Permutation of `0..n` for one epoch, seeded with `seed ^ epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochBatches {
    pub batches: Vec<PaddedBatch>,
    /// Sequences longer than the length cap, left out of the epoch.
    pub skipped: usize,
}

/// Groups encoded sequences into padded batches in the epoch's shuffled
/// order. The final batch may be smaller.
pub fn batches_from_encoded(
    sequences: &[Vec<u32>],
    batch_size: usize,
    max_len: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochBatches> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut skipped = 0;
    let mut kept: Vec<&[u32]> = Vec::new();
    for i in epoch_order(sequences.len(), seed, epoch) {
        if sequences[i].len() > max_len {
            skipped += 1;
        } else {
            kept.push(&sequences[i]);
        }
    }
    let batches = kept
        .chunks(batch_size)
        .map(PaddedBatch::from_sequences)
        .collect::<Result<_>>()?;
    Ok(EpochBatches { batches, skipped })
}

/// Shuffles, encodes and batches a corpus for one epoch.
pub fn epoch_batches<S: AsRef<str>>(
    sentences: &[S],
    vocab: &SubwordVocab,
    model: &SegmentationModel,
    batch_size: usize,
    max_len: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochBatches> {
    let encoded = encode_corpus(sentences, model, vocab)?;
    batches_from_encoded(&encoded.sequences, batch_size, max_len, seed, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_sequences_are_skipped_and_counted() {
        let seqs = vec![vec![3, 5, 4], vec![3, 5, 6, 7, 4], vec![3, 4]];
        let e = batches_from_encoded(&seqs, 2, 4, 0, 0).unwrap();
        assert_eq!(e.skipped, 1);
        let total: usize = e.batches.iter().map(|b| b.batch).sum();
        assert_eq!(total, 2);
    }

    #[test]
    fn epochs_reshuffle() {
        assert_ne!(epoch_order(20, 5, 0), epoch_order(20, 5, 1));
        assert_eq!(epoch_order(20, 5, 1), epoch_order(20, 5, 1));
    }
}
