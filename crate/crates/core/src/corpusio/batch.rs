use crate::error::{Error, Result};
use crate::subseg::PAD;

/// Row-major `[batch × seq_len]` token ids, right-padded with `PAD`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<u32>,
}

impl PaddedBatch {
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S]) -> Result<Self> {
        let seq_len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if seqs.is_empty() || seq_len == 0 {
            return Err(Error::EmptyInput);
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            let s = s.as_ref();
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, seq_len - s.len()));
        }
        Ok(Self {
            batch: seqs.len(),
            seq_len,
            ids,
        })
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// `true` at real positions, `false` at padding.
    pub fn padding_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD).collect()
    }

    /// Rows with trailing padding removed.
    pub fn sequences(&self) -> Vec<Vec<u32>> {
        (0..self.batch)
            .map(|b| {
                let row = self.row(b);
                let n = row.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
                row[..n].to_vec()
            })
            .collect()
    }
}
