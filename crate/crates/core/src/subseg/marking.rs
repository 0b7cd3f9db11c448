use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Reserved boundary marker.
pub const MARKER: char = '+';

/// How split points inside a word are made visible in the token stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MarkingScheme {
    /// `slipp+ +er+ +s`: both sides of every internal boundary are marked.
    LeftRightMarked,
    /// `slipp +er +s`: only continuation pieces carry a leading marker.
    LeftMarked,
}

impl MarkingScheme {
    /// Short flag form: `mm` or `m`.
    pub fn flag(self) -> &'static str {
        match self {
            MarkingScheme::LeftRightMarked => "mm",
            MarkingScheme::LeftMarked => "m",
        }
    }
}

impl fmt::Display for MarkingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for MarkingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mm" | "+m+" => Ok(MarkingScheme::LeftRightMarked),
            "m" | "+m" => Ok(MarkingScheme::LeftMarked),
            _ => Err(Error::InvalidArgument(format!(
                "unknown marking scheme {s:?} (expected m or mm)"
            ))),
        }
    }
}

/// Decorates the subwords of each word with boundary markers and flattens
/// them into one token sequence.
pub fn apply_marking<S: AsRef<str>>(words: &[Vec<S>], scheme: MarkingScheme) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for word in words {
        if word.is_empty() {
            return Err(Error::InvalidArgument("word with no subwords".into()));
        }
        let last = word.len() - 1;
        for (i, piece) in word.iter().enumerate() {
            let piece = piece.as_ref();
            if piece.is_empty() {
                return Err(Error::InvalidArgument("empty subword".into()));
            }
            if piece.starts_with(MARKER) || piece.ends_with(MARKER) {
                return Err(Error::MarkerCollision(piece.to_string()));
            }
            let mut tok = String::with_capacity(piece.len() + 2);
            if i > 0 {
                tok.push(MARKER);
            }
            tok.push_str(piece);
            if i < last && scheme == MarkingScheme::LeftRightMarked {
                tok.push(MARKER);
            }
            out.push(tok);
        }
    }
    Ok(out)
}

/// Rebuilds the sentence from marked tokens.
pub fn detokenize<S: AsRef<str>>(tokens: &[S], scheme: MarkingScheme) -> Result<String> {
    let mut out = String::new();
    let mut open = false;
    for (index, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        let leading = tok.len() > 1 && tok.starts_with(MARKER);
        let body = if leading { &tok[1..] } else { tok };
        let trailing = scheme == MarkingScheme::LeftRightMarked
            && body.len() > 1
            && body.ends_with(MARKER);
        let body = if trailing { &body[..body.len() - 1] } else { body };
        let orphan = || Error::OrphanContinuation {
            index,
            token: tok.to_string(),
        };
        if leading {
            if index == 0 {
                return Err(orphan());
            }
            if scheme == MarkingScheme::LeftRightMarked && !open {
                return Err(orphan());
            }
        } else {
            if open {
                return Err(Error::DanglingContinuation {
                    index: index - 1,
                    token: tokens[index - 1].as_ref().to_string(),
                });
            }
            if index > 0 {
                out.push(' ');
            }
        }
        out.push_str(body);
        open = trailing;
    }
    if open {
        let index = tokens.len() - 1;
        return Err(Error::DanglingContinuation {
            index,
            token: tokens[index].as_ref().to_string(),
        });
    }
    Ok(out)
}
