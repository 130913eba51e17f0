//! Greedy and beam search over cached AR decoding.

use std::cmp::Ordering;

use crate::corpus::{Sentence, TokenId, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{DecoderCache, EncoderMemory, Transformer};

/// How an AR search decides where the output ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LengthMode {
    /// Stop at EOS; hypotheses reaching `cap` tokens without EOS are
    /// returned unfinished.
    Eos { cap: usize },
    /// Emit exactly this many tokens; EOS is never chosen.
    Forced(usize),
}

impl LengthMode {
    /// EOS-terminated with the model's `L_max` as cap.
    pub fn eos_for(model: &Transformer) -> Self {
        LengthMode::Eos {
            cap: model.config().max_tgt_len,
        }
    }

    fn cap(self) -> usize {
        match self {
            LengthMode::Eos { cap } => cap,
            LengthMode::Forced(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Sentence,
    /// Sum of the emitted tokens' log-probabilities (EOS included once
    /// finished).
    pub score: f64,
    pub finished: bool,
}

/// Descending score, then lexicographically smaller tokens first.
pub(crate) fn rank(
    a_score: f64,
    a_tokens: &[TokenId],
    b_score: f64,
    b_tokens: &[TokenId],
) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then_with(|| a_tokens.cmp(b_tokens))
}

/// EOS is never allowed as the first token: targets are non-empty.
fn allowed(token: usize, mode: LengthMode, emitted: usize) -> bool {
    let t = token as TokenId;
    t != PAD && t != BOS && (t != EOS || (emitted > 0 && matches!(mode, LengthMode::Eos { .. })))
}

fn check_mode(model: &Transformer, mode: LengthMode) -> Result<()> {
    let lmax = model.config().max_tgt_len;
    let cap = mode.cap();
    if cap == 0 && matches!(mode, LengthMode::Forced(_)) {
        return Err(Error::Argument("forced length must be at least 1".into()));
    }
    if cap > lmax {
        return Err(Error::Argument(format!(
            "length {cap} exceeds L_max = {lmax}"
        )));
    }
    Ok(())
}

/// Picks the highest-probability allowed token at every step; ties go to
/// the lower token id.
pub fn greedy(model: &Transformer, x: &[TokenId], mode: LengthMode) -> Result<BeamHypothesis> {
    check_mode(model, mode)?;
    let mem = model.encoder_memory(model.encode(x)?);
    greedy_with_memory(model, &mem, mode)
}

pub(crate) fn greedy_with_memory(
    model: &Transformer,
    mem: &EncoderMemory,
    mode: LengthMode,
) -> Result<BeamHypothesis> {
    let mut caches = [model.empty_cache()];
    let mut tokens = Vec::new();
    let mut score = 0.0;
    let mut last = BOS;
    loop {
        let lp = model.decode_step(mem, &mut caches, &[last])?;
        let row = lp.row(0);
        let mut best: Option<usize> = None;
        for (v, &s) in row.iter().enumerate() {
            if allowed(v, mode, tokens.len()) && best.is_none_or(|b| s > row[b]) {
                best = Some(v);
            }
        }
        let best = best.expect("vocabulary has a data token");
        score += row[best];
        if best as TokenId == EOS {
            return Ok(BeamHypothesis {
                tokens: Sentence(tokens),
                score,
                finished: true,
            });
        }
        tokens.push(best as TokenId);
        last = best as TokenId;
        if tokens.len() == mode.cap() {
            return Ok(BeamHypothesis {
                tokens: Sentence(tokens),
                score,
                finished: matches!(mode, LengthMode::Forced(_)),
            });
        }
    }
}

struct Live {
    tokens: Vec<TokenId>,
    score: f64,
    cache: DecoderCache,
}

/// Beam search without length normalisation.
///
/// Every step keeps the `beam` best one-token extensions of the live
/// hypotheses; extensions ending in EOS move to the finished list. Returns
/// up to `beam` hypotheses, best first. When nothing finishes before the
/// cap, the best unfinished hypotheses are returned with `finished = false`.
pub fn beam_search(
    model: &Transformer,
    x: &[TokenId],
    beam: usize,
    mode: LengthMode,
) -> Result<Vec<BeamHypothesis>> {
    if beam == 0 {
        return Err(Error::Argument("beam size must be at least 1".into()));
    }
    check_mode(model, mode)?;
    let mem = model.encoder_memory(model.encode(x)?);
    let cap = mode.cap();
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        cache: model.empty_cache(),
    }];
    let mut feed = vec![BOS];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    let mut unfinished: Vec<BeamHypothesis> = Vec::new();

    while !live.is_empty() {
        let mut caches: Vec<DecoderCache> = live.iter().map(|l| l.cache.clone()).collect();
        let lp = model.decode_step(&mem, &mut caches, &feed)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * lp.cols());
        for (b, l) in live.iter().enumerate() {
            for (v, &s) in lp.row(b).iter().enumerate() {
                if allowed(v, mode, l.tokens.len()) {
                    cands.push((l.score + s, b, v));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then_with(|| a.2.cmp(&b.2))
        });
        cands.truncate(beam);

        let mut next = Vec::with_capacity(beam);
        for (score, b, v) in cands {
            let v = v as TokenId;
            if v == EOS {
                finished.push(BeamHypothesis {
                    tokens: Sentence(live[b].tokens.clone()),
                    score,
                    finished: true,
                });
                continue;
            }
            let mut tokens = live[b].tokens.clone();
            tokens.push(v);
            next.push(Live {
                tokens,
                score,
                cache: caches[b].clone(),
            });
        }

        let (done, going): (Vec<Live>, Vec<Live>) =
            next.into_iter().partition(|l| l.tokens.len() >= cap);
        for l in done {
            let hyp = BeamHypothesis {
                tokens: Sentence(l.tokens),
                score: l.score,
                finished: matches!(mode, LengthMode::Forced(_)),
            };
            if hyp.finished {
                finished.push(hyp);
            } else {
                unfinished.push(hyp);
            }
        }
        live = going;
        feed = live
            .iter()
            .map(|l| *l.tokens.last().expect("non-empty"))
            .collect();

        if finished.len() >= beam {
            finished.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
            let kth = finished[beam - 1].score;
            if live.iter().all(|l| l.score <= kth) {
                break;
            }
        }
    }

    let mut out = if finished.is_empty() {
        unfinished
    } else {
        finished
    };
    out.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
    out.truncate(beam);
    Ok(out)
}

/// Top-1 of an EOS-terminated beam search, falling back to greedy when no
/// hypothesis finishes.
pub fn best_translation(model: &Transformer, x: &[TokenId], beam: usize) -> Result<BeamHypothesis> {
    let mode = LengthMode::eos_for(model);
    let hyps = beam_search(model, x, beam, mode)?;
    match hyps.into_iter().next() {
        Some(h) if h.finished => Ok(h),
        other => {
            log::warn!("beam search found no finished hypothesis; falling back to greedy");
            let g = greedy(model, x, mode)?;
            Ok(if g.finished { g } else { other.unwrap_or(g) })
        }
    }
}
