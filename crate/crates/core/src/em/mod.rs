//! Alternating optimisation of an AR posterior model and a NAR model.
//!
//! Each iteration `t` distils the AR model `φ^t` into targets `Ŷ^t` and
//! trains a fresh NAR model `θ^t` on them (M-step). The E-step then builds a
//! pseudo dataset from `φ^t`'s beam candidates, picking per source the
//! candidate with the best `p_AR · log(p_NAR / p_AR)` among those whose
//! teacher quality clears the bound, and trains a fresh `φ^{t+1}` on it.
//! Quality is always the log-likelihood under the first AR model `φ¹`.

mod run;

pub use run::{em_run, EmOutcome, EmState, IterationSummary, Restart};

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, Sentence, TokenId, Vocabulary};
use crate::decode::{beam_search, best_translation, LengthMode};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::train::{train_model, TrainConfig};

/// Which validation number drives early stopping and model selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    ExactMatch,
    Bleu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Beam width of the M-step distillation.
    pub m_beam: usize,
    /// Beam width (and candidate count) of the E-step.
    pub e_beam: usize,
    /// Stop when the validation metric moves less than this, as a fraction.
    pub tolerance: f64,
    /// Train the NAR model on the distillation of `φ^{t+1}` (true) or on the
    /// pseudo dataset itself (false).
    pub amortized: bool,
    /// Activate quality bounds and redo the E-step on the first validation drop.
    pub early_stopping: bool,
    pub validation: ValidationMetric,
    /// Decode validation sources at the reference length.
    pub validation_gt_length: bool,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 5,
            m_beam: 20,
            e_beam: 5,
            tolerance: 0.001,
            amortized: true,
            early_stopping: true,
            validation: ValidationMetric::ExactMatch,
            validation_gt_length: false,
            seed: 1,
        }
    }
}

/// Everything an EM run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmSetup {
    pub em: EmConfig,
    pub ar_model: ModelConfig,
    pub nar_model: ModelConfig,
    pub ar_train: TrainConfig,
    pub nar_train: TrainConfig,
}

impl EmSetup {
    pub fn validate(&self) -> Result<()> {
        if self.em.max_iters == 0 {
            return Err(Error::Config("em.max_iters must be at least 1".into()));
        }
        if self.em.m_beam == 0 || self.em.e_beam == 0 {
            return Err(Error::Config("beam sizes must be at least 1".into()));
        }
        if !self.ar_model.autoregressive || self.nar_model.autoregressive {
            return Err(Error::Config(
                "ar_model must be AR and nar_model NAR".into(),
            ));
        }
        self.ar_model.validate()?;
        self.nar_model.validate()?;
        self.ar_train.validate()?;
        self.nar_train.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Ar = 1,
    Nar = 2,
}

/// Training seed of one model in one iteration.
pub fn iteration_seed(seed: u64, t: usize, role: Role) -> u64 {
    crate::train::derive_seed(seed, ((t as u64) << 8) | role as u64)
}

/// Teacher log-likelihood of every pair, indexed like the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityVector(pub Vec<f64>);

/// Per-pair lower bound on quality; `None` means no filtering.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundVector(pub Vec<Option<f64>>);

impl BoundVector {
    pub fn inactive(n: usize) -> Self {
        BoundVector(vec![None; n])
    }

    pub fn from_quality(q: &QualityVector) -> Self {
        BoundVector(q.0.iter().map(|&v| Some(v)).collect())
    }

    pub fn is_active(&self) -> bool {
        self.0.iter().any(Option::is_some)
    }

    pub fn admits(&self, i: usize, quality: f64) -> bool {
        self.0
            .get(i)
            .copied()
            .flatten()
            .is_none_or(|b| quality >= b)
    }
}

/// `log p_AR(y | x)` under the teacher `φ¹`.
pub fn quality(teacher: &Transformer, x: &[TokenId], y: &[TokenId]) -> Result<f64> {
    teacher.ar_log_likelihood(x, y)
}

pub fn qualities(teacher: &Transformer, corpus: &ParallelCorpus) -> Result<QualityVector> {
    let pairs: Vec<(&[TokenId], &[TokenId])> = corpus
        .pairs()
        .iter()
        .map(|(x, y)| (x.tokens(), y.tokens()))
        .collect();
    Ok(QualityVector(teacher.ar_log_likelihoods(&pairs)?))
}

/// `p_AR · (log p_NAR − log p_AR)`; `-inf` when the NAR model gives the
/// candidate no mass or the value is undefined.
pub fn selection_score(log_p_ar: f64, log_p_nar: f64) -> f64 {
    if log_p_nar == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s = log_p_ar.exp() * (log_p_nar - log_p_ar);
    if s.is_nan() {
        f64::NEG_INFINITY
    } else {
        s
    }
}

/// Top-1 EOS-terminated beam output of `ar` for every source, in order.
pub fn distill(ar: &Transformer, sources: &[&[TokenId]], beam: usize) -> Result<Vec<Sentence>> {
    sources
        .par_iter()
        .map(|x| best_translation(ar, x, beam).map(|h| h.tokens))
        .collect()
}

/// Replaces the targets of `corpus` with `ar`'s distillation.
pub fn distill_corpus(
    ar: &Transformer,
    corpus: &ParallelCorpus,
    beam: usize,
    name: &str,
) -> Result<ParallelCorpus> {
    let sources: Vec<&[TokenId]> = corpus.sources().map(|s| s.tokens()).collect();
    corpus.with_targets(distill(ar, &sources, beam)?, name)
}

/// Distils `ar` over the sources of `corpus` and trains a fresh NAR model on
/// the result.
pub fn m_step(
    ar: &Transformer,
    corpus: &ParallelCorpus,
    beam: usize,
    nar_model: &ModelConfig,
    nar_train: &TrainConfig,
) -> Result<(ParallelCorpus, Transformer)> {
    let distilled = distill_corpus(ar, corpus, beam, "distilled")?;
    let nar = train_model(&distilled, nar_train, nar_model, None)?.model;
    Ok((distilled, nar))
}

/// One target per source plus the numbers that chose it.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoDataset {
    pub corpus: ParallelCorpus,
    pub quality: Vec<f64>,
    /// Selection score of the chosen candidate; `-inf` for kept fallbacks.
    pub selection: Vec<f64>,
    /// Sources for which no candidate cleared its bound.
    pub fallbacks: usize,
}

impl PseudoDataset {
    /// TSV with two extra columns: quality and selection score.
    pub fn to_tsv(&self) -> String {
        let vocab = self.corpus.vocab();
        let mut out = String::new();
        for (i, (x, y)) in self.corpus.pairs().iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{}\t{:?}\t{:?}",
                vocab.decode(x),
                vocab.decode(y),
                self.quality[i],
                self.selection[i]
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, vocab: Arc<Vocabulary>) -> Result<Self> {
        let corpus = ParallelCorpus::load(path, vocab)?;
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut quality = Vec::new();
        let mut selection = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let num = |k: usize| -> Result<f64> {
                cols.get(k)
                    .and_then(|c| c.trim().parse().ok())
                    .ok_or_else(|| Error::Parse {
                        path: path.display().to_string(),
                        line: line_no + 1,
                        message: format!("column {} must be a number", k + 1),
                    })
            };
            quality.push(num(2)?);
            selection.push(num(3)?);
        }
        let fallbacks = selection
            .iter()
            .filter(|s| **s == f64::NEG_INFINITY)
            .count();
        Ok(PseudoDataset {
            corpus,
            quality,
            selection,
            fallbacks,
        })
    }
}

/// Picks each source's pseudo target from `ar`'s beam candidates.
///
/// `fallback[i]` (with quality `fallback_quality[i]`) is kept when no
/// candidate clears the bound of source `i` with a finite selection score.
#[allow(clippy::too_many_arguments)]
pub fn construct_pseudo(
    nar: &Transformer,
    ar: &Transformer,
    teacher: &Transformer,
    corpus: &ParallelCorpus,
    bounds: &BoundVector,
    fallback: &[Sentence],
    fallback_quality: &[f64],
    beam: usize,
) -> Result<PseudoDataset> {
    if bounds.0.len() != corpus.len()
        || fallback.len() != corpus.len()
        || fallback_quality.len() != corpus.len()
    {
        return Err(Error::Argument(
            "bounds and fallbacks must match the corpus size".into(),
        ));
    }
    let chosen: Vec<Result<(Sentence, f64, f64)>> = corpus
        .pairs()
        .par_iter()
        .enumerate()
        .map(|(i, (x, _))| {
            let x = x.tokens();
            let hyps = beam_search(ar, x, beam, LengthMode::eos_for(ar))?;
            let pairs: Vec<(&[TokenId], &[TokenId])> =
                hyps.iter().map(|h| (x, h.tokens.tokens())).collect();
            let q = teacher.ar_log_likelihoods(&pairs)?;
            let lp_ar = ar.ar_log_likelihoods(&pairs)?;
            let lp_nar = nar.nar_log_likelihoods(&pairs, true)?;
            let mut best: Option<(usize, f64)> = None;
            for k in 0..hyps.len() {
                if !bounds.admits(i, q[k]) {
                    continue;
                }
                let s = selection_score(lp_ar[k], lp_nar[k]);
                if s > f64::NEG_INFINITY && best.is_none_or(|(_, b)| s > b) {
                    best = Some((k, s));
                }
            }
            Ok(match best {
                Some((k, s)) => (hyps[k].tokens.clone(), q[k], s),
                None => (fallback[i].clone(), fallback_quality[i], f64::NEG_INFINITY),
            })
        })
        .collect();
    let mut targets = Vec::with_capacity(corpus.len());
    let mut quality = Vec::with_capacity(corpus.len());
    let mut selection = Vec::with_capacity(corpus.len());
    let mut fallbacks = 0;
    for (i, c) in chosen.into_iter().enumerate() {
        let (y, q, s) = c?;
        if s == f64::NEG_INFINITY {
            fallbacks += 1;
        }
        assert!(
            bounds.admits(i, q),
            "pseudo target {i} violates its quality bound"
        );
        targets.push(y);
        quality.push(q);
        selection.push(s);
    }
    if fallbacks > 0 {
        log::warn!(
            "{fallbacks} of {} sources kept their previous target",
            corpus.len()
        );
    }
    Ok(PseudoDataset {
        corpus: corpus.with_targets(targets, "pseudo")?,
        quality,
        selection,
        fallbacks,
    })
}

/// Builds the pseudo dataset and trains a fresh AR model on it.
#[allow(clippy::too_many_arguments)]
pub fn e_step(
    nar: &Transformer,
    ar: &Transformer,
    teacher: &Transformer,
    corpus: &ParallelCorpus,
    bounds: &BoundVector,
    fallback: &[Sentence],
    fallback_quality: &[f64],
    beam: usize,
    ar_model: &ModelConfig,
    ar_train: &TrainConfig,
) -> Result<(PseudoDataset, Transformer)> {
    let pseudo = construct_pseudo(
        nar,
        ar,
        teacher,
        corpus,
        bounds,
        fallback,
        fallback_quality,
        beam,
    )?;
    let next = train_model(&pseudo.corpus, ar_train, ar_model, None)?.model;
    Ok((pseudo, next))
}

/// Sequence-level distillation without EM: teacher on ground truth, then a
/// NAR model on the teacher's beam outputs. Seeds match iteration 1 of
/// [`em_run`].
pub fn distillation_baseline(
    train: &ParallelCorpus,
    setup: &EmSetup,
) -> Result<(Transformer, ParallelCorpus, Transformer)> {
    setup.validate()?;
    let ar_train = TrainConfig {
        seed: iteration_seed(setup.em.seed, 1, Role::Ar),
        ..setup.ar_train.clone()
    };
    let nar_train = TrainConfig {
        seed: iteration_seed(setup.em.seed, 1, Role::Nar),
        ..setup.nar_train.clone()
    };
    let teacher = train_model(train, &ar_train, &setup.ar_model, None)?.model;
    let (distilled, nar) = m_step(
        &teacher,
        train,
        setup.em.m_beam,
        &setup.nar_model,
        &nar_train,
    )?;
    Ok((teacher, distilled, nar))
}

#[cfg(test)]
mod tests;
