//! Repeat handling outside the model: run collapsing, and the `<concat>`
//! codec that lets ODD decoding express genuine repeats.

use crate::corpus::{Sentence, TokenId, CONCAT};
use crate::error::{Error, Result};

/// Collapses runs of equal adjacent tokens to a single token.
pub fn post_dedup(y: &[TokenId]) -> Sentence {
    let mut out = y.to_vec();
    out.dedup();
    Sentence(out)
}

/// Inserts CONCAT between every pair of equal adjacent tokens.
pub fn concat_encode(y: &[TokenId]) -> Result<Sentence> {
    if let Some(i) = y.iter().position(|&t| t == CONCAT) {
        return Err(Error::InvalidToken {
            token: "<concat>".into(),
            reason: format!("input to concat_encode already contains <concat> at position {i}"),
        });
    }
    let mut out = Vec::with_capacity(y.len() * 2);
    for (i, &t) in y.iter().enumerate() {
        if i > 0 && y[i - 1] == t {
            out.push(CONCAT);
        }
        out.push(t);
    }
    Ok(Sentence(out))
}

/// Drops every CONCAT token.
pub fn concat_decode(y: &[TokenId]) -> Sentence {
    Sentence(y.iter().copied().filter(|&t| t != CONCAT).collect())
}
