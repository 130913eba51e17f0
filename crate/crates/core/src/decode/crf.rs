//! CRF decoding with a `-inf · I` transition matrix: the best sequence
//! under per-position unary scores with no two equal adjacent labels.
//!
//! Only the three best labels of a position can matter. A label ranked
//! fourth or lower can always be swapped for one of the top three that
//! differs from both neighbours, without lowering the score.

use crate::corpus::{Sentence, TokenId};
use crate::error::{Error, Result};
use crate::model::LogProbMatrix;

/// The three best labels of one position, best first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Top3 {
    pub labels: [usize; 3],
    pub scores: [f64; 3],
}

/// Per-position [`Top3`] of a unary matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Top3Slice(pub Vec<Top3>);

/// `a` outranks `b`: higher score, or equal score and lower id.
fn better(a: (usize, f64), b: (usize, f64)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

/// Single pass partial selection of the three best entries of `row`.
pub fn top3(row: &[f64]) -> Top3 {
    assert!(row.len() >= 3, "top3 needs at least three labels");
    let mut best = [(usize::MAX, f64::NEG_INFINITY); 3];
    for (i, &s) in row.iter().enumerate() {
        let c = (i, s);
        if best[0].0 == usize::MAX || better(c, best[0]) {
            best = [c, best[0], best[1]];
        } else if best[1].0 == usize::MAX || better(c, best[1]) {
            best = [best[0], c, best[1]];
        } else if best[2].0 == usize::MAX || better(c, best[2]) {
            best[2] = c;
        }
    }
    Top3 {
        labels: [best[0].0, best[1].0, best[2].0],
        scores: [best[0].1, best[1].1, best[2].1],
    }
}

impl Top3Slice {
    pub fn new(unary: &LogProbMatrix) -> Self {
        Top3Slice((0..unary.len()).map(|i| top3(unary.row(i))).collect())
    }
}

/// `Σ_i unary[i, path_i]`, summed left to right.
pub fn path_score(unary: &LogProbMatrix, path: &[usize]) -> f64 {
    let mut s = 0.0;
    for (i, &y) in path.iter().enumerate() {
        s += unary.get(i, y);
    }
    s
}

/// Viterbi over per-position candidate lists (each sorted by label id).
/// Sums accumulate left to right so the score equals [`path_score`].
fn viterbi(cands: &[Vec<(usize, f64)>]) -> Result<(Vec<usize>, f64)> {
    let t = cands.len();
    let mut best: Vec<f64> = cands[0].iter().map(|c| c.1).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(t);
    back.push(vec![usize::MAX; best.len()]);
    for i in 1..t {
        let prev = &cands[i - 1];
        let mut cur = Vec::with_capacity(cands[i].len());
        let mut ptr = Vec::with_capacity(cands[i].len());
        for &(y, u) in &cands[i] {
            let mut arg = usize::MAX;
            for (j, &(p, _)) in prev.iter().enumerate() {
                if p != y
                    && best[j] > f64::NEG_INFINITY
                    && (arg == usize::MAX || best[j] > best[arg])
                {
                    arg = j;
                }
            }
            if arg == usize::MAX {
                cur.push(f64::NEG_INFINITY);
            } else {
                cur.push(best[arg] + u);
            }
            ptr.push(arg);
        }
        best = cur;
        back.push(ptr);
    }
    let mut arg = usize::MAX;
    for (j, &s) in best.iter().enumerate() {
        if s > f64::NEG_INFINITY && (arg == usize::MAX || s > best[arg]) {
            arg = j;
        }
    }
    if arg == usize::MAX {
        return Err(Error::Argument(
            "no sequence without adjacent repeats has finite score".into(),
        ));
    }
    let score = best[arg];
    let mut path = vec![0; t];
    for i in (0..t).rev() {
        path[i] = cands[i][arg].0;
        arg = back[i][arg];
    }
    Ok((path, score))
}

fn check(unary: &LogProbMatrix) -> Result<()> {
    if unary.is_empty() {
        return Err(Error::EmptyInput("unary matrix has no positions"));
    }
    if unary.vocab_size() == 0 {
        return Err(Error::EmptyInput("unary matrix has no labels"));
    }
    Ok(())
}

/// Constrained Viterbi over all `V` labels, `O(T' V²)`.
pub fn constrained_viterbi(unary: &LogProbMatrix) -> Result<(Vec<usize>, f64)> {
    check(unary)?;
    let cands: Vec<Vec<(usize, f64)>> = (0..unary.len())
        .map(|i| unary.row(i).iter().copied().enumerate().collect())
        .collect();
    viterbi(&cands)
}

/// Top-3 restricted Viterbi, `O(T' V)`. Returns the path and its score.
pub fn odd_decode_scored(unary: &LogProbMatrix) -> Result<(Vec<usize>, f64)> {
    check(unary)?;
    if unary.vocab_size() < 3 {
        return constrained_viterbi(unary);
    }
    let cands: Vec<Vec<(usize, f64)>> = Top3Slice::new(unary)
        .0
        .iter()
        .map(|t| {
            let mut c: Vec<(usize, f64)> = t
                .labels
                .iter()
                .copied()
                .zip(t.scores.iter().copied())
                .collect();
            c.sort_by_key(|x| x.0);
            c
        })
        .collect();
    let out = viterbi(&cands)?;
    debug_assert!(
        out.0.windows(2).all(|w| w[0] != w[1]),
        "adjacent duplicate in ODD output"
    );
    Ok(out)
}

/// Best sequence without adjacent duplicates; ties go to lower token ids.
pub fn odd_decode(unary: &LogProbMatrix) -> Result<Sentence> {
    let (path, _) = odd_decode_scored(unary)?;
    Ok(Sentence(path.into_iter().map(|y| y as TokenId).collect()))
}

/// Independent per-position argmax; ties go to the lower id.
pub fn argmax_decode(unary: &LogProbMatrix) -> Sentence {
    Sentence(
        (0..unary.len())
            .map(|i| {
                let row = unary.row(i);
                let mut b = 0;
                for (v, &s) in row.iter().enumerate() {
                    if s > row[b] {
                        b = v;
                    }
                }
                b as TokenId
            })
            .collect(),
    )
}
