use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::marking::{apply_marking, MarkingScheme};
use super::morfessor::SegmentationModel;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const SOS: u32 = 3;
pub const EOS: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;

/// Surface forms of the special tokens, in id order.
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<mask>", "<s>", "</s>"];

/// Marked-subword vocabulary. Ids `0..5` are the special tokens; corpus
/// tokens follow. Corpus tokens are looked up separately from the specials,
/// so a corpus string that happens to spell `<s>` still gets its own id.
#[derive(Clone, Debug, PartialEq)]
pub struct SubwordVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    scheme: MarkingScheme,
}

impl SubwordVocab {
    /// Specials followed by `tokens` in the given order.
    pub fn from_tokens(tokens: Vec<String>, scheme: MarkingScheme) -> Result<Self> {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for t in tokens {
            let id = all.len() as u32;
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocab token {t:?}")));
            }
            all.push(t);
        }
        Ok(Self {
            tokens: all,
            index,
            scheme,
        })
    }

    /// Vocabulary of every marked subword in the segmented corpus, ordered
    /// by descending frequency, then byte order.
    pub fn build<'a, I>(corpus: I, model: &SegmentationModel, scheme: MarkingScheme) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut freq: HashMap<String, u64> = HashMap::new();
        for sentence in corpus {
            let words = model.segment_sentence(sentence)?;
            for tok in apply_marking(&words, scheme)? {
                *freq.entry(tok).or_default() += 1;
            }
        }
        let mut entries: Vec<(String, u64)> = freq.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(entries.into_iter().map(|(t, _)| t).collect(), scheme)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn scheme(&self) -> MarkingScheme {
        self.scheme
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Corpus tokens (ids 5 and up), in id order.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[NUM_SPECIAL as usize..]
    }

    /// Maps tokens to ids, sending unknown tokens to UNK. Also returns the
    /// number of UNKs produced.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> (Vec<u32>, usize) {
        let mut unk = 0;
        let ids = tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref()).unwrap_or_else(|| {
                    unk += 1;
                    UNK
                })
            })
            .collect();
        (ids, unk)
    }

    /// Inverse of [`encode`](Self::encode) for corpus ids; special ids are
    /// dropped.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i >= NUM_SPECIAL)
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, scheme: MarkingScheme) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|_| Error::InvalidUtf8 {
                path: path.to_path_buf(),
                line: i + 1,
            })?;
            if i < SPECIAL_TOKENS.len() {
                if line != SPECIAL_TOKENS[i] {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: format!("expected special token {}", SPECIAL_TOKENS[i]),
                    });
                }
                continue;
            }
            tokens.push(line);
        }
        Self::from_tokens(tokens, scheme).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }
}
