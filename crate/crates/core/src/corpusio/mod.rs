//! Text ingestion, preprocessing, splitting, epoch batching and the binary
//! record format.

mod batch;
mod epoch;
mod records;
mod text;

pub use batch::PaddedBatch;
pub use epoch::{
    batches_from_encoded, encode_corpus, encode_sentence, epoch_batches, epoch_order, EncodedCorpus, EpochBatches,
};
pub use records::{RecordFile, RECORD_MAGIC, RECORD_VERSION};
pub use text::{
    load_and_split, preprocess_line, read_lines, read_sentences, split_indices, Corpus, Manifest, SourceFile,
    PREPROCESS_VERSION,
};
