use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 generator, enough to resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Where the data stream stands: the epoch and the next work unit in it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DataCursor {
    pub epoch: u64,
    pub unit: u64,
}

/// Complete training state. Tensors are stored by name: model parameters
/// under their own names, optimizer moments under `adam.m.<name>` and
/// `adam.v.<name>`, and recurrent memory under `memory.<layer>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub step: u64,
    pub rng: RngState,
    pub cursor: DataCursor,
    pub adam_t: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Little-endian layout: magic, version, echo (u32 length + UTF-8),
    /// step, RNG seed/stream/word position, cursor, Adam step count, then a
    /// u32 tensor count and per tensor its name, rank, extents and `f64`
    /// values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_echo);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.cursor.epoch.to_le_bytes());
        out.extend_from_slice(&self.cursor.unit.to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = || Error::Truncated(path.to_path_buf());
        if bytes.len() < 4 {
            return Err(truncated());
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32().ok_or_else(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let bad_text = || Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "checkpoint text is not UTF-8".into(),
        };
        let config_echo = r.string().ok_or_else(truncated)?.ok_or_else(bad_text)?;
        let step = r.u64().ok_or_else(truncated)?;
        let seed = r.array::<32>().ok_or_else(truncated)?;
        let stream = r.u64().ok_or_else(truncated)?;
        let word_pos = u128::from_le_bytes(r.array().ok_or_else(truncated)?);
        let epoch = r.u64().ok_or_else(truncated)?;
        let unit = r.u64().ok_or_else(truncated)?;
        let adam_t = r.u64().ok_or_else(truncated)?;
        let count = r.u32().ok_or_else(truncated)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string().ok_or_else(truncated)?.ok_or_else(bad_text)?;
            let ndim = r.u32().ok_or_else(truncated)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64().ok_or_else(truncated)? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(truncated)?;
            if r.remaining() / 8 < n {
                return Err(truncated());
            }
            let data = (0..n)
                .map(|_| r.array().map(f64::from_le_bytes))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(truncated)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: format!("tensor {name}: {e}"),
            })?;
            tensors.push((name, t));
        }
        if r.remaining() > 0 {
            return Err(Error::TrailingBytes(path.to_path_buf()));
        }
        Ok(Self {
            config_echo,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            cursor: DataCursor { epoch, unit },
            adam_t,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        let out = self.bytes.get(self.pos..self.pos + N)?.try_into().ok()?;
        self.pos += N;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Option<u64> {
        self.array().map(u64::from_le_bytes)
    }

    /// Outer `None` on truncation, inner `None` on invalid UTF-8.
    fn string(&mut self) -> Option<Option<String>> {
        let n = self.u32()? as usize;
        let raw = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(String::from_utf8(raw.to_vec()).ok())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
