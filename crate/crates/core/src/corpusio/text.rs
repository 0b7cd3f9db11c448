use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unicode_general_category::{get_general_category, GeneralCategory as G};

use crate::error::{Error, Result};

/// Tag recorded in manifests; bump when [`preprocess_line`] changes.
pub const PREPROCESS_VERSION: &str = "strip-punct-symbols-v1";

fn is_stripped(c: char) -> bool {
    matches!(
        get_general_category(c),
        G::ConnectorPunctuation
            | G::DashPunctuation
            | G::OpenPunctuation
            | G::ClosePunctuation
            | G::InitialPunctuation
            | G::FinalPunctuation
            | G::OtherPunctuation
            | G::MathSymbol
            | G::CurrencySymbol
            | G::ModifierSymbol
            | G::OtherSymbol
    )
}

/// Deletes punctuation and symbol characters, collapses whitespace runs to
/// single spaces and trims. Letter case and digits are kept. Returns `None`
/// when nothing remains.
///
/// ```
/// use subword_lm::corpusio::preprocess_line;
/// assert_eq!(preprocess_line("Kissa istuu, ja katsoo.").as_deref(), Some("Kissa istuu ja katsoo"));
/// assert_eq!(preprocess_line("———"), None);
/// ```
pub fn preprocess_line(raw: &str) -> Option<String> {
    let kept: String = raw.chars().filter(|&c| !is_stripped(c)).collect();
    let out = kept.split_whitespace().collect::<Vec<_>>().join(" ");
    (!out.is_empty()).then_some(out)
}

/// Lines of a UTF-8 text file, without line terminators.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    let mut body: &[u8] = &bytes;
    if body.last() == Some(&b'\n') {
        body = &body[..body.len() - 1];
    }
    if bytes.is_empty() {
        return Ok(lines);
    }
    for (i, raw) in body.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw).map_err(|_| Error::InvalidUtf8 {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        lines.push(line.to_string());
    }
    Ok(lines)
}

/// Preprocessed sentences of one file, skipping lines that become empty.
pub fn read_sentences(path: &Path) -> Result<(Vec<String>, usize)> {
    let lines = read_lines(path)?;
    let n = lines.len();
    Ok((lines.iter().filter_map(|l| preprocess_line(l)).collect(), n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceFile {
    pub path: PathBuf,
    pub lines: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub sources: Vec<SourceFile>,
    pub preprocess_version: String,
    pub split_seed: u64,
    pub valid_fraction: f64,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "preprocess_version\t{}", self.preprocess_version);
        let _ = writeln!(out, "split_seed\t{}", self.split_seed);
        let _ = writeln!(out, "valid_fraction\t{}", self.valid_fraction);
        for s in &self.sources {
            let _ = writeln!(out, "source\t{}\t{}", s.path.display(), s.lines);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<String>,
    pub manifest: Manifest,
}

/// Reads, preprocesses and splits sentences into train and validation sets.
///
/// A seeded shuffle picks `round(n * valid_fraction)` sentences for
/// validation, clamped so both sides are non-empty. Both sides keep the
/// original sentence order.
pub fn load_and_split<P: AsRef<Path>>(paths: &[P], valid_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(valid_fraction > 0.0 && valid_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "valid fraction {valid_fraction} outside (0, 1)"
        )));
    }
    let mut sentences = Vec::new();
    let mut sources = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let (s, lines) = read_sentences(p)?;
        sentences.extend(s);
        sources.push(SourceFile {
            path: p.to_path_buf(),
            lines,
        });
    }
    if sentences.len() < 2 {
        return Err(Error::EmptyInput);
    }
    let (train_idx, valid_idx) = split_indices(sentences.len(), valid_fraction, seed);
    let manifest = Manifest {
        sources,
        preprocess_version: PREPROCESS_VERSION.to_string(),
        split_seed: seed,
        valid_fraction,
    };
    let pick = |idx: &[usize]| Corpus {
        sentences: idx.iter().map(|&i| sentences[i].clone()).collect(),
        manifest: manifest.clone(),
    };
    Ok((pick(&train_idx), pick(&valid_idx)))
}

/// Sorted train and validation indices of a seeded split of `n` items.
pub fn split_indices(n: usize, valid_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64 * valid_fraction).round() as usize).clamp(1, n - 1);
    let mut valid = order[..k].to_vec();
    let mut train = order[k..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    (train, valid)
}
