//! Subword segmentation, boundary marking and vocabularies.

mod marking;
mod morfessor;
mod vocab;

pub use marking::{apply_marking, detokenize, MarkingScheme, MARKER};
pub use morfessor::{log_star, SegTrainOptions, SegTrainReport, SegmentationModel};
pub use vocab::{SubwordVocab, EOS, MASK, NUM_SPECIAL, PAD, SOS, SPECIAL_TOKENS, UNK};

use std::collections::BTreeMap;

use crate::error::Result;

/// Whitespace-separated word counts over preprocessed sentences.
pub fn word_counts<'a, I: IntoIterator<Item = &'a str>>(sentences: I) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for w in s.split_whitespace() {
            *counts.entry(w.to_string()).or_default() += 1;
        }
    }
    counts
}

/// Segments and marks one preprocessed sentence.
pub fn tokenize(model: &SegmentationModel, sentence: &str, scheme: MarkingScheme) -> Result<Vec<String>> {
    apply_marking(&model.segment_sentence(sentence)?, scheme)
}
