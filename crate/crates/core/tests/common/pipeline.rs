use std::path::{Path, PathBuf};

use subword_lm::corpusio::read_sentences;
use subword_lm::subseg::{word_counts, MarkingScheme, SegTrainOptions, SegmentationModel, SubwordVocab};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// A segmentation lexicon and `mm` vocabulary trained on `corpus`.
pub struct Resources {
    pub lexicon: PathBuf,
    pub vocab: PathBuf,
    pub vocab_size: usize,
}

pub fn resources(dir: &Path, corpus: &Path) -> Resources {
    let sentences = read_sentences(corpus).unwrap().0;
    let counts = word_counts(sentences.iter().map(String::as_str));
    let seg = SegmentationModel::train(&counts, 0.001, &SegTrainOptions::default()).unwrap().model;
    let vocab = SubwordVocab::build(sentences.iter().map(String::as_str), &seg, MarkingScheme::LeftRightMarked).unwrap();
    let r = Resources {
        lexicon: dir.join("model.lex"),
        vocab: dir.join("vocab.txt"),
        vocab_size: vocab.len(),
    };
    seg.save(&r.lexicon).unwrap();
    vocab.save(&r.vocab).unwrap();
    r
}

/// Config text for `kind` on `corpus`, followed by `extra` lines.
pub fn config_text(kind: &str, corpus: &Path, r: &Resources, out_dir: &Path, extra: &str) -> String {
    format!(
        "model={kind}\ntrain_data={}\nlexicon={}\nvocab={}\nout_dir={}\n{extra}",
        corpus.display(),
        r.lexicon.display(),
        r.vocab.display(),
        out_dir.display()
    )
}

/// Small layer sizes so integration runs take seconds.
pub const TINY_XL: &str = "num_layers=2\nhidden_size=16\nnum_heads=2\nhead_size=8\nintermediate_size=32\nseg_len=8\nmem_len=8\n";
pub const TINY_MLM: &str = "num_layers=2\nhidden_size=16\nnum_heads=2\nintermediate_size=32\nmax_position=64\n";
