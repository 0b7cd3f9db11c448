//! Unsupervised two-part-code segmentation in the Morfessor Baseline
//! family.
//!
//! The total cost of a lexicon is
//!
//! ```text
//! C = C_lexicon + alpha * C_corpus
//! C_lexicon = sum over types (len + 1) * log2(|alphabet| + 1) + log*(count)
//! C_corpus  = N log2 N - sum over types c log2 c
//! ```
//!
//! where `N` is the number of subword tokens in the segmented corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const LOG_STAR_C0: f64 = 2.865_064;
const LEXICON_HEADER: &str = "#morfessor-baseline alpha=";

/// Rissanen's universal code length (bits) for a positive integer.
pub fn log_star(n: u64) -> f64 {
    let mut bits = LOG_STAR_C0.log2();
    let mut x = n as f64;
    loop {
        x = x.log2();
        if x <= 0.0 {
            break;
        }
        bits += x;
    }
    bits
}

fn xlog2x(c: u64) -> f64 {
    if c == 0 {
        0.0
    } else {
        let c = c as f64;
        c * c.log2()
    }
}

/// Options for [`SegmentationModel::train`].
#[derive(Clone, Copy, Debug)]
pub struct SegTrainOptions {
    /// Stop once a full pass improves the cost by less than this many bits.
    pub epsilon: f64,
    pub seed: u64,
    pub max_passes: usize,
}

impl Default for SegTrainOptions {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            seed: 0,
            max_passes: 50,
        }
    }
}

/// Result of training: the model plus the final analysis of every training
/// word and the cost after initialization and after each pass.
#[derive(Clone, Debug)]
pub struct SegTrainReport {
    pub model: SegmentationModel,
    pub analyses: BTreeMap<String, Vec<String>>,
    pub cost_history: Vec<f64>,
}

/// Subword lexicon with token counts and the corpus weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationModel {
    lexicon: BTreeMap<String, u64>,
    alpha: f64,
    alphabet: BTreeSet<char>,
    total: u64,
    max_unit_chars: usize,
}

/// Incrementally maintained cost terms.
struct CostState {
    counts: HashMap<String, u64>,
    alpha: f64,
    char_bits: f64,
    total: u64,
    type_len_sum: u64,
    log_star_sum: f64,
    xlogx_sum: f64,
}

impl CostState {
    fn new(alpha: f64, alphabet_size: usize) -> Self {
        Self {
            counts: HashMap::new(),
            alpha,
            char_bits: ((alphabet_size + 1) as f64).log2(),
            total: 0,
            type_len_sum: 0,
            log_star_sum: 0.0,
            xlogx_sum: 0.0,
        }
    }

    fn cost(&self) -> f64 {
        let lexicon = self.type_len_sum as f64 * self.char_bits + self.log_star_sum;
        let corpus = xlog2x(self.total) - self.xlogx_sum;
        lexicon + self.alpha * corpus
    }

    fn add(&mut self, unit: &str, n: u64) {
        let old = self.counts.get(unit).copied().unwrap_or(0);
        let new = old + n;
        self.update(unit, old, new);
        self.counts.insert(unit.to_string(), new);
    }

    fn remove(&mut self, unit: &str, n: u64) {
        let old = self.counts[unit];
        let new = old - n;
        self.update(unit, old, new);
        if new == 0 {
            self.counts.remove(unit);
        } else {
            self.counts.insert(unit.to_string(), new);
        }
    }

    fn update(&mut self, unit: &str, old: u64, new: u64) {
        let len = unit.chars().count() as u64 + 1;
        if old == 0 && new > 0 {
            self.type_len_sum += len;
        } else if old > 0 && new == 0 {
            self.type_len_sum -= len;
        }
        if old > 0 {
            self.log_star_sum -= log_star(old);
        }
        if new > 0 {
            self.log_star_sum += log_star(new);
        }
        self.xlogx_sum += xlog2x(new) - xlog2x(old);
        self.total = self.total + new - old;
    }

    /// Greedy recursive binary splitting of `unit`, which must not currently
    /// be counted. Leaves the chosen pieces counted and returns them.
    fn best_split(&mut self, unit: &str, n: u64) -> Vec<String> {
        self.add(unit, n);
        let mut best_cost = self.cost();
        self.remove(unit, n);
        let mut best = None;
        for (split, _) in unit.char_indices().skip(1) {
            let (l, r) = unit.split_at(split);
            self.add(l, n);
            self.add(r, n);
            let c = self.cost();
            self.remove(l, n);
            self.remove(r, n);
            if c < best_cost - 1e-9 {
                best_cost = c;
                best = Some(split);
            }
        }
        match best {
            None => {
                self.add(unit, n);
                vec![unit.to_string()]
            }
            Some(split) => {
                let (l, r) = unit.split_at(split);
                self.add(r, n);
                let mut out = self.best_split(l, n);
                self.remove(r, n);
                out.extend(self.best_split(r, n));
                out
            }
        }
    }
}

impl SegmentationModel {
    /// Trains on `word -> count`. Every word starts as a single unit; each
    /// pass revisits the words in a seeded random order and keeps a new
    /// analysis only when it lowers the total cost.
    pub fn train(
        word_counts: &BTreeMap<String, u64>,
        alpha: f64,
        opts: &SegTrainOptions,
    ) -> Result<SegTrainReport> {
        if word_counts.is_empty() || word_counts.keys().any(|w| w.is_empty()) {
            return Err(Error::EmptyInput);
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidCorpusWeight(alpha));
        }
        if !(opts.epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {}", opts.epsilon)));
        }
        let alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
        let mut state = CostState::new(alpha, alphabet.len());
        let mut analyses: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (w, &c) in word_counts {
            if c == 0 {
                continue;
            }
            state.add(w, c);
            analyses.insert(w.clone(), vec![w.clone()]);
        }
        if analyses.is_empty() {
            return Err(Error::EmptyInput);
        }

        let mut history = vec![state.cost()];
        let mut order: Vec<String> = analyses.keys().cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.max_passes {
            order.shuffle(&mut rng);
            for w in &order {
                let n = word_counts[w];
                let before = state.cost();
                let old = analyses[w].clone();
                for u in &old {
                    state.remove(u, n);
                }
                let new = state.best_split(w, n);
                if state.cost() > before {
                    for u in &new {
                        state.remove(u, n);
                    }
                    for u in &old {
                        state.add(u, n);
                    }
                } else {
                    analyses.insert(w.clone(), new);
                }
            }
            let cost = state.cost();
            let prev = *history.last().expect("non-empty history");
            history.push(cost);
            if prev - cost < opts.epsilon {
                break;
            }
        }

        let lexicon: BTreeMap<String, u64> = state.counts.into_iter().collect();
        let model = Self::from_lexicon(lexicon, alpha)?;
        Ok(SegTrainReport {
            model,
            analyses,
            cost_history: history,
        })
    }

    /// Builds a model from explicit counts. The alphabet is the set of
    /// characters used by the lexicon.
    pub fn from_lexicon(lexicon: BTreeMap<String, u64>, alpha: f64) -> Result<Self> {
        if lexicon.is_empty() {
            return Err(Error::EmptyInput);
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidCorpusWeight(alpha));
        }
        if lexicon.iter().any(|(k, &c)| k.is_empty() || c == 0) {
            return Err(Error::InvalidArgument(
                "lexicon entries must be non-empty with positive counts".into(),
            ));
        }
        let alphabet = lexicon.keys().flat_map(|w| w.chars()).collect();
        let total = lexicon.values().sum();
        let max_unit_chars = lexicon.keys().map(|k| k.chars().count()).max().unwrap_or(1);
        Ok(Self {
            lexicon,
            alpha,
            alphabet,
            total,
            max_unit_chars,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lexicon(&self) -> &BTreeMap<String, u64> {
        &self.lexicon
    }

    pub fn alphabet(&self) -> &BTreeSet<char> {
        &self.alphabet
    }

    /// Number of subword tokens in the segmented training corpus.
    pub fn total_tokens(&self) -> u64 {
        self.total
    }

    /// Total two-part code length of this lexicon, in bits.
    pub fn cost(&self) -> f64 {
        let mut st = CostState::new(self.alpha, self.alphabet.len());
        for (u, &c) in &self.lexicon {
            st.add(u, c);
        }
        st.cost()
    }

    /// Natural-log unigram probability of `unit`, or `None` when the unit is
    /// neither in the lexicon nor a single character.
    pub fn unit_log_prob(&self, unit: &str) -> Option<f64> {
        let n = self.total as f64;
        match self.lexicon.get(unit) {
            Some(&c) => Some((c as f64 / n).ln()),
            None if unit.chars().count() == 1 => {
                Some(-n.ln() - (self.alphabet.len() as f64).ln())
            }
            None => None,
        }
    }

    /// Maximum-probability split of `word` under the unigram model.
    pub fn segment_word(&self, word: &str) -> Result<Vec<String>> {
        self.segment_word_scored(word).map(|(pieces, _)| pieces)
    }

    /// Like [`segment_word`](Self::segment_word), also returning the joint
    /// log-probability of the chosen split.
    pub fn segment_word_scored(&self, word: &str) -> Result<(Vec<String>, f64)> {
        if word.is_empty() {
            return Err(Error::Unsegmentable(word.to_string()));
        }
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let n = bounds.len() - 1;
        let mut best = vec![f64::NEG_INFINITY; n + 1];
        let mut back = vec![0usize; n + 1];
        best[0] = 0.0;
        for end in 1..=n {
            let first = end.saturating_sub(self.max_unit_chars.max(1));
            for start in first..end {
                if best[start] == f64::NEG_INFINITY {
                    continue;
                }
                let Some(lp) = self.unit_log_prob(&word[bounds[start]..bounds[end]]) else {
                    continue;
                };
                let cand = best[start] + lp;
                if cand > best[end] {
                    best[end] = cand;
                    back[end] = start;
                }
            }
        }
        if best[n] == f64::NEG_INFINITY {
            return Err(Error::Unsegmentable(word.to_string()));
        }
        let mut pieces = Vec::new();
        let mut end = n;
        while end > 0 {
            let start = back[end];
            pieces.push(word[bounds[start]..bounds[end]].to_string());
            end = start;
        }
        pieces.reverse();
        Ok((pieces, best[n]))
    }

    /// Segments every whitespace-separated word of `sentence`.
    pub fn segment_sentence(&self, sentence: &str) -> Result<Vec<Vec<String>>> {
        sentence.split_whitespace().map(|w| self.segment_word(w)).collect()
    }

    /// Lexicon file text: a header line, then `count<TAB>subword` by
    /// descending count (ties in byte order).
    pub fn to_lexicon_string(&self) -> String {
        let mut entries: Vec<(&String, &u64)> = self.lexicon.iter().collect();
        entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let mut out = format!("{LEXICON_HEADER}{}\n", self.alpha);
        for (u, c) in entries {
            let _ = writeln!(out, "{c}\t{u}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_lexicon_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut alpha = None;
        let mut lexicon = BTreeMap::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|_| Error::InvalidUtf8 {
                path: path.to_path_buf(),
                line: i + 1,
            })?;
            if i == 0 {
                let a = line
                    .strip_prefix(LEXICON_HEADER)
                    .ok_or_else(|| parse_err(1, "missing lexicon header".into()))?;
                alpha = Some(
                    a.trim()
                        .parse::<f64>()
                        .map_err(|e| parse_err(1, format!("alpha: {e}")))?,
                );
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (c, u) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(i + 1, "expected count<TAB>subword".into()))?;
            let c: u64 = c
                .parse()
                .map_err(|e| parse_err(i + 1, format!("count: {e}")))?;
            if lexicon.insert(u.to_string(), c).is_some() {
                return Err(parse_err(i + 1, format!("duplicate subword {u:?}")));
            }
        }
        let alpha = alpha.ok_or_else(|| parse_err(1, "empty lexicon file".into()))?;
        Self::from_lexicon(lexicon, alpha)
    }
}
