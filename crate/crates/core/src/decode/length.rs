//! Multi-length NAR decoding with AR rescoring.

use serde::{Deserialize, Serialize};

use super::codec::post_dedup;
use super::crf::{argmax_decode, odd_decode_scored, path_score};
use super::search::BeamHypothesis;
use crate::corpus::{Sentence, TokenId};
use crate::error::{Error, Result};
use crate::model::{LogProbMatrix, Transformer};

/// How a NAR unary matrix becomes a sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NarDecoder {
    Argmax,
    Odd,
    /// Argmax followed by collapsing adjacent repeats; the output can be
    /// shorter than the decoded length.
    Dedup,
}

impl NarDecoder {
    /// Decoded tokens and their summed unary score.
    pub fn run(self, unary: &LogProbMatrix) -> Result<(Sentence, f64)> {
        match self {
            NarDecoder::Argmax => {
                let y = argmax_decode(unary);
                let path: Vec<usize> = y.iter().map(|&t| t as usize).collect();
                let s = path_score(unary, &path);
                Ok((y, s))
            }
            NarDecoder::Dedup => {
                let (y, s) = NarDecoder::Argmax.run(unary)?;
                Ok((post_dedup(&y), s))
            }
            NarDecoder::Odd => {
                let (path, s) = odd_decode_scored(unary)?;
                Ok((
                    Sentence(path.into_iter().map(|t| t as TokenId).collect()),
                    s,
                ))
            }
        }
    }
}

impl std::str::FromStr for NarDecoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(NarDecoder::Argmax),
            "odd" => Ok(NarDecoder::Odd),
            "dedup" => Ok(NarDecoder::Dedup),
            _ => Err(Error::Argument(format!(
                "unknown decoder {s:?}; expected argmax, odd or dedup"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Sentence,
    /// Log-probability under the model that produced the candidate.
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet(pub Vec<Candidate>);

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Candidate> {
        self.0.iter()
    }
}

impl From<Vec<BeamHypothesis>> for CandidateSet {
    fn from(hyps: Vec<BeamHypothesis>) -> Self {
        CandidateSet(
            hyps.into_iter()
                .map(|h| Candidate {
                    tokens: h.tokens,
                    score: h.score,
                })
                .collect(),
        )
    }
}

/// Lengths `[l - b, l + b]` around the predicted `l`, clipped to
/// `[1, L_max]`, in increasing order.
pub fn candidate_lengths(predicted: usize, halfwidth: usize, max_len: usize) -> Vec<usize> {
    let lo = predicted.saturating_sub(halfwidth).max(1);
    let hi = (predicted + halfwidth).min(max_len);
    (lo..=hi).collect()
}

/// Decodes `x` at every length in the window around the predicted length.
/// Candidate scores are `log p(T'|x)` plus the decoded tokens' unary sum.
pub fn parallel_length_decode(
    model: &Transformer,
    x: &[TokenId],
    halfwidth: usize,
    kind: NarDecoder,
) -> Result<CandidateSet> {
    let dist = model.predict_lengths(&[x])?.remove(0);
    let lengths = candidate_lengths(dist.argmax(), halfwidth, model.config().max_tgt_len);
    let requests: Vec<(&[TokenId], usize)> = lengths.iter().map(|&l| (x, l)).collect();
    let unaries = model.nar_log_probs(&requests)?;
    let mut out = Vec::with_capacity(lengths.len());
    for (&l, u) in lengths.iter().zip(&unaries) {
        let (tokens, s) = kind.run(u)?;
        out.push(Candidate {
            tokens,
            score: dist.log_prob(l) + s,
        });
    }
    Ok(CandidateSet(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rescored {
    pub best: Sentence,
    pub index: usize,
    /// Teacher log-likelihood of every candidate, in input order.
    pub teacher_scores: Vec<f64>,
}

/// Picks the candidate the teacher AR model likes best; ties go to the
/// shorter candidate, then the lexicographically smaller one.
pub fn rescore(cands: &CandidateSet, teacher: &Transformer, x: &[TokenId]) -> Result<Rescored> {
    if cands.is_empty() {
        return Err(Error::EmptyInput("rescore needs at least one candidate"));
    }
    let pairs: Vec<(&[TokenId], &[TokenId])> =
        cands.iter().map(|c| (x, c.tokens.tokens())).collect();
    let teacher_scores = teacher.ar_log_likelihoods(&pairs)?;
    let mut index = 0;
    for i in 1..cands.len() {
        let (a, b) = (&cands.0[i].tokens, &cands.0[index].tokens);
        let better = teacher_scores[i]
            .total_cmp(&teacher_scores[index])
            .then_with(|| b.len().cmp(&a.len()))
            .then_with(|| b.tokens().cmp(a.tokens()))
            .is_gt();
        if better {
            index = i;
        }
    }
    Ok(Rescored {
        best: cands.0[index].tokens.clone(),
        index,
        teacher_scores,
    })
}
