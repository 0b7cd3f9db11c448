use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mlm::{EncoderConfig, MaskPolicy};
use crate::numcore::LrSchedule;
use crate::subseg::{MarkingScheme, NUM_SPECIAL};
use crate::xl::XlConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Mlm,
    Xl,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlm => "mlm",
            ModelKind::Xl => "xl",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the recurrent model's memory is carried during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryMode {
    /// Sentences of a shuffled epoch form one continuous stream per batch
    /// lane; memory is reset only at epoch boundaries.
    Stream,
    /// Each batch of padded sentences starts from empty memory.
    Sentence,
}

impl fmt::Display for MemoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryMode::Stream => "stream",
            MemoryMode::Sentence => "sentence",
        })
    }
}

impl FromStr for MemoryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "stream" => Ok(MemoryMode::Stream),
            "sentence" => Ok(MemoryMode::Sentence),
            _ => Err("expected stream or sentence".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Mlm { encoder: EncoderConfig, masking: MaskPolicy },
    Xl { xl: XlConfig, memory: MemoryMode },
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Mlm { .. } => ModelKind::Mlm,
            ModelSpec::Xl { .. } => ModelKind::Xl,
        }
    }

    /// `0` until resolved against a vocabulary file.
    pub fn vocab_size(&self) -> usize {
        match self {
            ModelSpec::Mlm { encoder, .. } => encoder.vocab_size,
            ModelSpec::Xl { xl, .. } => xl.vocab_size,
        }
    }

    fn set_vocab_size(&mut self, v: usize) {
        match self {
            ModelSpec::Mlm { encoder, .. } => encoder.vocab_size = v,
            ModelSpec::Xl { xl, .. } => xl.vocab_size = v,
        }
    }
}

/// Everything a training run needs, read from a flat `key=value` file.
///
/// Keys shared by both model kinds:
///
/// | key | default |
/// |---|---|
/// | `model` | required, `mlm` or `xl` |
/// | `train_data`, `lexicon`, `vocab`, `out_dir` | required |
/// | `valid_data` | unset: split `valid_fraction` off `train_data` |
/// | `valid_fraction` | 0.1 |
/// | `scheme` | `mm` |
/// | `seed` | 0 |
/// | `batch_size` | 16 |
/// | `peak_lr`, `warmup_steps`, `total_steps`, `min_lr` | 0.001, 100, 2000, 0.00001 |
/// | `clip_norm` | 1 (0 disables) |
/// | `valid_every` | 200 |
/// | `checkpoint_every` | 0 (final checkpoint only) |
/// | `vocab_size` | taken from the vocabulary file |
/// | `num_layers`, `hidden_size`, `num_heads`, `intermediate_size` | per kind |
/// | `dropout_prob`, `init_std` | 0.1, 0.02 |
///
/// Masked-LM keys: `max_position` (128), `mask_prob` (0.15), `mask_frac`
/// (0.8), `random_frac` (0.1); layer defaults 4 / 128 / 4 / 512.
///
/// Recurrent keys: `head_size` (32), `seg_len` (16), `mem_len` (16),
/// `memory_mode` (`stream` or `sentence`, default `stream`); layer
/// defaults 2 / 64 / 2 / 256.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train_data: PathBuf,
    pub valid_data: Option<PathBuf>,
    pub valid_fraction: f64,
    pub lexicon: PathBuf,
    pub vocab: PathBuf,
    pub scheme: MarkingScheme,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    pub valid_every: u64,
    pub checkpoint_every: u64,
}

struct Entries<'a> {
    source: &'a str,
    map: BTreeMap<String, (String, usize)>,
}

impl Entries<'_> {
    fn take<T: FromStr>(&mut self, key: &str, default: Option<T>) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        match self.map.remove(key) {
            Some((raw, line)) => raw.parse().map_err(|e| {
                Error::Config(format!("{}:{line}: {key}: cannot parse {raw:?}: {e}", self.source))
            }),
            None => default.ok_or_else(|| Error::Config(format!("{}: missing required key {key}", self.source))),
        }
    }

    fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        if self.map.contains_key(key) {
            self.take(key, None).map(Some)
        } else {
            Ok(None)
        }
    }
}

impl RunConfig {
    /// Parses configuration text. `source` names the file in errors.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected key=value", i + 1)))?;
            let k = k.trim().to_string();
            if map.insert(k.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(Error::Config(format!("{source}:{}: duplicate key {k}", i + 1)));
            }
        }
        let mut e = Entries { source, map };
        let kind: String = e.take("model", None)?;
        let kind = match kind.as_str() {
            "mlm" => ModelKind::Mlm,
            "xl" => ModelKind::Xl,
            other => {
                return Err(Error::Config(format!("{source}: model must be mlm or xl, got {other:?}")));
            }
        };
        let vocab_size: usize = e.take("vocab_size", Some(0))?;
        let dropout_prob = e.take("dropout_prob", Some(0.1))?;
        let init_std = e.take("init_std", Some(0.02))?;
        let model = match kind {
            ModelKind::Mlm => {
                let d = EncoderConfig::desk(vocab_size);
                let encoder = EncoderConfig {
                    num_layers: e.take("num_layers", Some(d.num_layers))?,
                    hidden_size: e.take("hidden_size", Some(d.hidden_size))?,
                    num_heads: e.take("num_heads", Some(d.num_heads))?,
                    intermediate_size: e.take("intermediate_size", Some(d.intermediate_size))?,
                    dropout_prob,
                    max_position: e.take("max_position", Some(d.max_position))?,
                    vocab_size,
                    init_std,
                };
                let p = MaskPolicy::default();
                let masking = MaskPolicy {
                    mask_prob: e.take("mask_prob", Some(p.mask_prob))?,
                    mask_frac: e.take("mask_frac", Some(p.mask_frac))?,
                    random_frac: e.take("random_frac", Some(p.random_frac))?,
                };
                masking
                    .validate()
                    .map_err(|err| Error::Config(format!("{source}: {err}")))?;
                ModelSpec::Mlm { encoder, masking }
            }
            ModelKind::Xl => {
                let d = XlConfig::desk(vocab_size);
                let xl = XlConfig {
                    num_layers: e.take("num_layers", Some(d.num_layers))?,
                    hidden_size: e.take("hidden_size", Some(d.hidden_size))?,
                    num_heads: e.take("num_heads", Some(d.num_heads))?,
                    head_size: e.take("head_size", Some(d.head_size))?,
                    intermediate_size: e.take("intermediate_size", Some(d.intermediate_size))?,
                    seg_len: e.take("seg_len", Some(d.seg_len))?,
                    mem_len: e.take("mem_len", Some(d.mem_len))?,
                    dropout_prob,
                    vocab_size,
                    init_std,
                };
                let memory = e.take("memory_mode", Some(MemoryMode::Stream))?;
                ModelSpec::Xl { xl, memory }
            }
        };
        let schedule = LrSchedule {
            peak_lr: e.take("peak_lr", Some(1e-3))?,
            warmup_steps: e.take("warmup_steps", Some(100))?,
            total_steps: e.take("total_steps", Some(2000))?,
            min_lr: e.take("min_lr", Some(1e-5))?,
        };
        let cfg = Self {
            train_data: e.take("train_data", None)?,
            valid_data: e.take_opt("valid_data")?,
            valid_fraction: e.take("valid_fraction", Some(0.1))?,
            lexicon: e.take("lexicon", None)?,
            vocab: e.take("vocab", None)?,
            scheme: e.take("scheme", Some(MarkingScheme::LeftRightMarked))?,
            out_dir: e.take("out_dir", None)?,
            seed: e.take("seed", Some(0))?,
            batch_size: e.take("batch_size", Some(16))?,
            schedule,
            clip_norm: e.take("clip_norm", Some(1.0))?,
            valid_every: e.take("valid_every", Some(200))?,
            checkpoint_every: e.take("checkpoint_every", Some(0))?,
            model,
        };
        if let Some((key, (_, line))) = e.map.iter().next() {
            return Err(Error::Config(format!(
                "{source}:{line}: unknown key {key} for model={kind}"
            )));
        }
        cfg.validate()
            .map_err(|err| Error::Config(format!("{source}: {}", strip_prefix(&err))))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    fn validate(&self) -> Result<()> {
        let mut probe = self.model.clone();
        if probe.vocab_size() == 0 {
            probe.set_vocab_size(NUM_SPECIAL as usize + 1);
        }
        match &probe {
            ModelSpec::Mlm { encoder, .. } => encoder.validate()?,
            ModelSpec::Xl { xl, .. } => xl.validate()?,
        }
        let s = &self.schedule;
        if s.total_steps < s.warmup_steps {
            return Err(Error::Config(format!(
                "total_steps {} is below warmup_steps {}",
                s.total_steps, s.warmup_steps
            )));
        }
        if !(s.peak_lr >= 0.0 && s.min_lr >= 0.0 && s.peak_lr.is_finite() && s.min_lr.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.valid_every == 0 {
            return Err(Error::Config("valid_every must be positive".into()));
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(Error::Config(format!("valid_fraction {} outside (0, 1)", self.valid_fraction)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config(format!("clip_norm {} must be non-negative", self.clip_norm)));
        }
        Ok(())
    }

    /// Fills in `vocab_size` from the vocabulary, or checks it if set.
    pub fn resolve_vocab_size(&mut self, actual: usize) -> Result<()> {
        match self.model.vocab_size() {
            0 => {
                self.model.set_vocab_size(actual);
                self.validate()
            }
            v if v == actual => Ok(()),
            v => Err(Error::ConfigMismatch(format!(
                "vocab_size={v} but the vocabulary has {actual} entries"
            ))),
        }
    }

    /// Every key with its effective value, one `key=value` per line in a
    /// fixed order. Parsing the echo reproduces the configuration.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: &dyn fmt::Display| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("model", &self.kind());
        put("train_data", &self.train_data.display());
        if let Some(v) = &self.valid_data {
            put("valid_data", &v.display());
        }
        put("valid_fraction", &self.valid_fraction);
        put("lexicon", &self.lexicon.display());
        put("vocab", &self.vocab.display());
        put("scheme", &self.scheme);
        put("out_dir", &self.out_dir.display());
        put("seed", &self.seed);
        put("batch_size", &self.batch_size);
        put("peak_lr", &self.schedule.peak_lr);
        put("warmup_steps", &self.schedule.warmup_steps);
        put("total_steps", &self.schedule.total_steps);
        put("min_lr", &self.schedule.min_lr);
        put("clip_norm", &self.clip_norm);
        put("valid_every", &self.valid_every);
        put("checkpoint_every", &self.checkpoint_every);
        match &self.model {
            ModelSpec::Mlm { encoder: c, masking } => {
                put("vocab_size", &c.vocab_size);
                put("num_layers", &c.num_layers);
                put("hidden_size", &c.hidden_size);
                put("num_heads", &c.num_heads);
                put("intermediate_size", &c.intermediate_size);
                put("dropout_prob", &c.dropout_prob);
                put("init_std", &c.init_std);
                put("max_position", &c.max_position);
                put("mask_prob", &masking.mask_prob);
                put("mask_frac", &masking.mask_frac);
                put("random_frac", &masking.random_frac);
            }
            ModelSpec::Xl { xl: c, memory } => {
                put("vocab_size", &c.vocab_size);
                put("num_layers", &c.num_layers);
                put("hidden_size", &c.hidden_size);
                put("num_heads", &c.num_heads);
                put("intermediate_size", &c.intermediate_size);
                put("dropout_prob", &c.dropout_prob);
                put("init_std", &c.init_std);
                put("head_size", &c.head_size);
                put("seg_len", &c.seg_len);
                put("mem_len", &c.mem_len);
                put("memory_mode", memory);
            }
        }
        out
    }

    /// Configurations that may continue each other's training: equal in
    /// every key except `out_dir`.
    pub fn same_run(&self, other: &RunConfig) -> bool {
        let strip = |c: &RunConfig| RunConfig {
            out_dir: PathBuf::new(),
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

fn strip_prefix(err: &Error) -> String {
    match err {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
