//! Generators for the two synthetic translation tasks.
//!
//! Task one maps each source digit `k ∈ 1..=5` to `k` copies of itself.
//! Task two additionally pads the expansion with four `"0"` tokens split
//! between the front (`k` zeros, uniform over `0..=4`) and the back.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(seed)`, which is
//! portable across platforms, so corpora are byte-reproducible.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Sentence, TokenId, Vocabulary, NUM_SPECIALS};
use super::ParallelCorpus;
use crate::error::{Error, Result};

/// Number of filler zeros inserted per target in the second task.
pub const EXP2_FILLER: usize = 4;

/// Id of data digit `k` in [`Vocabulary::synthetic`].
pub const fn digit(k: u32) -> TokenId {
    NUM_SPECIALS as TokenId + k
}

pub const ZERO: TokenId = digit(0);

fn digit_value(id: TokenId) -> Option<u32> {
    let k = id.checked_sub(NUM_SPECIALS as TokenId)?;
    (1..=5).contains(&k).then_some(k)
}

/// Expands every source digit `k` into `k` copies of itself.
pub fn expand_exp1(src: &[TokenId]) -> Result<Sentence> {
    let mut out = Vec::with_capacity(src.len() * 3);
    for &t in src {
        let k = digit_value(t).ok_or_else(|| Error::InvalidToken {
            token: Vocabulary::synthetic()
                .symbol(t)
                .map_or_else(|| format!("#{t}"), str::to_owned),
            reason: "synthetic sources use only the digits 1..5".into(),
        })?;
        out.extend(std::iter::repeat_n(t, k as usize));
    }
    Ok(Sentence(out))
}

/// Surrounds an expansion with `front` zeros before and `4 - front` after.
pub fn pad_exp2(expansion: &[TokenId], front: usize) -> Sentence {
    assert!(front <= EXP2_FILLER);
    let mut out = Vec::with_capacity(expansion.len() + EXP2_FILLER);
    out.extend(std::iter::repeat_n(ZERO, front));
    out.extend_from_slice(expansion);
    out.extend(std::iter::repeat_n(ZERO, EXP2_FILLER - front));
    Sentence(out)
}

/// Recovers `(front_zeros, expansion)` from a second-task target, or `None`
/// when the target does not carry exactly four boundary zeros.
pub fn split_exp2(target: &[TokenId]) -> Option<(usize, &[TokenId])> {
    let lead = target.iter().take_while(|&&t| t == ZERO).count();
    if lead == target.len() {
        return None;
    }
    let trail = target.iter().rev().take_while(|&&t| t == ZERO).count();
    let core = &target[lead..target.len() - trail];
    (lead + trail == EXP2_FILLER && !core.contains(&ZERO)).then_some((lead, core))
}

/// True when `target` is one of the five admissible second-task
/// translations of `src`, whatever the split of the zeros.
pub fn admissible_exp2(src: &[TokenId], target: &[TokenId]) -> bool {
    match (split_exp2(target), expand_exp1(src)) {
        (Some((_, core)), Ok(e)) => core == e.tokens(),
        _ => false,
    }
}

fn check_args(n: usize, src_len: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Argument("pair count must be at least 1".into()));
    }
    if src_len == 0 {
        return Err(Error::Argument("source length must be at least 1".into()));
    }
    Ok(())
}

fn draw_source(rng: &mut ChaCha8Rng, src_len: usize) -> Sentence {
    Sentence((0..src_len).map(|_| digit(rng.gen_range(1..=5))).collect())
}

/// `5^len`, saturating.
pub fn source_capacity(src_len: usize) -> u128 {
    5u128.checked_pow(src_len as u32).unwrap_or(u128::MAX)
}

pub fn gen_exp1(n: usize, src_len: usize, seed: u64) -> Result<ParallelCorpus> {
    check_args(n, src_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = (0..n)
        .map(|_| {
            let src = draw_source(&mut rng, src_len);
            let tgt = expand_exp1(&src).expect("generated digits are valid");
            (src, tgt)
        })
        .collect();
    ParallelCorpus::new(
        pairs,
        Arc::new(Vocabulary::synthetic()),
        format!("exp1-n{n}-len{src_len}-seed{seed}"),
    )
}

/// Second task; sources are pairwise distinct (duplicates are redrawn).
pub fn gen_exp2(n: usize, src_len: usize, seed: u64) -> Result<ParallelCorpus> {
    check_args(n, src_len)?;
    let capacity = source_capacity(src_len);
    if n as u128 > capacity {
        return Err(Error::Capacity {
            requested: n,
            len: src_len,
            capacity,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let src = draw_source(&mut rng, src_len);
        if !seen.insert(src.clone()) {
            continue;
        }
        let front = rng.gen_range(0..=EXP2_FILLER);
        let tgt = pad_exp2(
            &expand_exp1(&src).expect("generated digits are valid"),
            front,
        );
        pairs.push((src, tgt));
    }
    ParallelCorpus::new(
        pairs,
        Arc::new(Vocabulary::synthetic()),
        format!("exp2-n{n}-len{src_len}-seed{seed}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(text: &str) -> Sentence {
        Vocabulary::synthetic().encode(text).unwrap()
    }

    #[test]
    fn expansion_examples() {
        assert_eq!(
            expand_exp1(&s("2 1 4 3")).unwrap(),
            s("2 2 1 4 4 4 4 3 3 3")
        );
        assert_eq!(expand_exp1(&s("2 2 3")).unwrap(), s("2 2 2 2 3 3 3"));
        assert_eq!(expand_exp1(&s("1")).unwrap(), s("1"));
        assert_eq!(expand_exp1(&s("5 5")).unwrap(), s("5 5 5 5 5 5 5 5 5 5"));
        assert!(matches!(
            expand_exp1(&s("1 0")),
            Err(Error::InvalidToken { .. })
        ));
    }

    #[test]
    fn padding_examples() {
        let core = expand_exp1(&s("2 1 4 3")).unwrap();
        assert_eq!(pad_exp2(&core, 1), s("0 2 2 1 4 4 4 4 3 3 3 0 0 0"));
        assert_eq!(
            pad_exp2(&expand_exp1(&s("2 2 3")).unwrap(), 3),
            s("0 0 0 2 2 2 2 3 3 3 0")
        );
        assert_eq!(
            pad_exp2(&expand_exp1(&s("2 1 5")).unwrap(), 0),
            s("2 2 1 5 5 5 5 5 0 0 0 0")
        );
        assert_eq!(
            split_exp2(&s("0 2 2 1 4 4 4 4 3 3 3 0 0 0")),
            Some((1, &core[..]))
        );
        assert_eq!(split_exp2(&s("0 2 2 0")), None);
        for k in 0..=4 {
            assert!(admissible_exp2(&s("2 1 4 3"), &pad_exp2(&core, k)));
        }
        assert!(!admissible_exp2(&s("2 1 4 3"), &core));
        assert!(!admissible_exp2(&s("2 1 4 4"), &pad_exp2(&core, 2)));
        assert_eq!(split_exp2(&s("0 0 0 0")), None);
    }

    #[test]
    fn expansion_is_injective_up_to_length_six() {
        for len in 1..=6u32 {
            let mut seen = HashSet::new();
            for code in 0..5u32.pow(len) {
                let src: Vec<TokenId> = (0..len)
                    .map(|i| digit(code / 5u32.pow(i) % 5 + 1))
                    .collect();
                assert!(
                    seen.insert(expand_exp1(&src).unwrap()),
                    "collision at length {len}"
                );
            }
        }
    }

    #[test]
    fn argument_validation() {
        assert!(matches!(gen_exp1(0, 4, 1), Err(Error::Argument(_))));
        assert!(matches!(gen_exp1(3, 0, 1), Err(Error::Argument(_))));
        assert!(matches!(
            gen_exp2(26, 2, 1),
            Err(Error::Capacity { capacity: 25, .. })
        ));
        // the full capacity is reachable
        let all = gen_exp2(25, 2, 1).unwrap();
        assert_eq!(all.len(), 25);
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(gen_exp1(50, 7, 3).unwrap(), gen_exp1(50, 7, 3).unwrap());
        assert_eq!(gen_exp2(50, 7, 3).unwrap(), gen_exp2(50, 7, 3).unwrap());
        assert_ne!(gen_exp1(50, 7, 3).unwrap(), gen_exp1(50, 7, 4).unwrap());
    }
}
