//! Inference: greedy and beam search for AR models, argmax and ODD (CRF)
//! decoding for NAR models, repeat handling, and multi-length decoding with
//! teacher rescoring.

pub mod codec;
pub mod crf;
pub mod length;
pub mod search;

pub use codec::{concat_decode, concat_encode, post_dedup};
pub use crf::{
    argmax_decode, constrained_viterbi, odd_decode, odd_decode_scored, path_score, top3, Top3,
    Top3Slice,
};
pub use length::{
    candidate_lengths, parallel_length_decode, rescore, Candidate, CandidateSet, NarDecoder,
    Rescored,
};
pub use search::{beam_search, best_translation, greedy, BeamHypothesis, LengthMode};

use rayon::prelude::*;

use crate::corpus::{Sentence, TokenId};
use crate::error::Result;
use crate::model::Transformer;

const BATCH: usize = 64;

/// NAR decoding of many sources. With `lengths` the given lengths are used,
/// otherwise each source's predicted length.
pub fn nar_decode_batch(
    model: &Transformer,
    sources: &[&[TokenId]],
    lengths: Option<&[usize]>,
    kind: NarDecoder,
) -> Result<Vec<Sentence>> {
    let idx: Vec<usize> = (0..sources.len()).collect();
    let chunks: Vec<Result<Vec<Sentence>>> = idx
        .par_chunks(BATCH)
        .map(|chunk| {
            let srcs: Vec<&[TokenId]> = chunk.iter().map(|&i| sources[i]).collect();
            let lens: Vec<usize> = match lengths {
                Some(l) => chunk.iter().map(|&i| l[i]).collect(),
                None => model
                    .predict_lengths(&srcs)?
                    .iter()
                    .map(|d| d.argmax())
                    .collect(),
            };
            let requests: Vec<(&[TokenId], usize)> = srcs.iter().copied().zip(lens).collect();
            model
                .nar_log_probs(&requests)?
                .iter()
                .map(|u| kind.run(u).map(|r| r.0))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(sources.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Greedy AR decoding of many sources, forced to `lengths` when given.
pub fn greedy_batch(
    model: &Transformer,
    sources: &[&[TokenId]],
    lengths: Option<&[usize]>,
) -> Result<Vec<Sentence>> {
    (0..sources.len())
        .into_par_iter()
        .map(|i| {
            let mode = match lengths {
                Some(l) => LengthMode::Forced(l[i]),
                None => LengthMode::eos_for(model),
            };
            greedy(model, sources[i], mode).map(|h| h.tokens)
        })
        .collect()
}
