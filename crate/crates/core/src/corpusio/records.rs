use std::path::Path;

use crate::error::{Error, Result};

pub const RECORD_MAGIC: &[u8; 4] = b"SPPL";
pub const RECORD_VERSION: u32 = 1;

/// Encoded sentences with the vocabulary size they were encoded against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordFile {
    pub vocab_size: u32,
    pub records: Vec<Vec<u32>>,
}

impl RecordFile {
    /// Little-endian layout: magic, version, vocab size, record count, then
    /// per record a token count followed by the ids.
    pub fn to_bytes(&self, path: &Path) -> Result<Vec<u8>> {
        let n: usize = self.records.iter().map(|r| 4 + 4 * r.len()).sum();
        let mut out = Vec::with_capacity(20 + n);
        out.extend_from_slice(RECORD_MAGIC);
        out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.len() as u32).to_le_bytes());
            for &id in r {
                if id >= self.vocab_size {
                    return Err(Error::IdOutOfRange {
                        path: path.to_path_buf(),
                        id,
                        vocab: self.vocab_size,
                    });
                }
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses bytes produced by [`Self::to_bytes`]; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = || Error::Truncated(path.to_path_buf());
        if bytes.len() < 4 {
            return Err(truncated());
        }
        if &bytes[..4] != RECORD_MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let mut cur = Cursor { bytes, pos: 4 };
        let version = cur.u32().ok_or_else(truncated)?;
        if version != RECORD_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: RECORD_VERSION,
            });
        }
        let vocab_size = cur.u32().ok_or_else(truncated)?;
        let count = cur.u64().ok_or_else(truncated)?;
        let bad_record = || Error::TruncatedRecord(path.to_path_buf());
        let mut records = Vec::new();
        for _ in 0..count {
            let n = cur.u32().ok_or_else(bad_record)? as usize;
            if cur.remaining() / 4 < n {
                return Err(bad_record());
            }
            let mut r = Vec::with_capacity(n);
            for _ in 0..n {
                let id = cur.u32().ok_or_else(bad_record)?;
                if id >= vocab_size {
                    return Err(Error::IdOutOfRange {
                        path: path.to_path_buf(),
                        id,
                        vocab: vocab_size,
                    });
                }
                r.push(id);
            }
            records.push(r);
        }
        if cur.remaining() > 0 {
            return Err(Error::TrailingBytes(path.to_path_buf()));
        }
        Ok(Self { vocab_size, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes(path)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Option<[u8; N]> {
        let out = self.bytes.get(self.pos..self.pos + N)?.try_into().ok()?;
        self.pos += N;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take().map(u64::from_le_bytes)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
