//! Exact match, token NLL, CM/NCM and corpus BLEU.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, Sentence, TokenId};
use crate::decode::{concat_decode, greedy_batch, nar_decode_batch, NarDecoder};
use crate::error::{Error, Result};
use crate::model::Transformer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub exact_match: f64,
    pub token_nll: f64,
    pub ncm: Option<f64>,
    pub bleu: Option<f64>,
    pub count: usize,
}

impl EvalReport {
    /// Two-column text rendering.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        format!(
            "{:<12} {:>10}\n{:<12} {:>10.4}\n{:<12} {:>10.4}\n{:<12} {:>10}\n{:<12} {:>10}\n{:<12} {:>10}\n",
            "metric",
            "value",
            "exact_match",
            self.exact_match,
            "token_nll",
            self.token_nll,
            "ncm",
            opt(self.ncm),
            "bleu",
            opt(self.bleu),
            "count",
            self.count
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Decode at the reference length instead of the predicted one.
    pub use_ground_truth_length: bool,
    /// NAR decoding rule.
    pub decoder: NarDecoder,
    /// Strip `<concat>` from predictions and references before comparing.
    pub concat_aware: bool,
    /// Include `log p(T'|x)` in CM/NCM.
    pub include_length_term: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            use_ground_truth_length: true,
            decoder: NarDecoder::Argmax,
            concat_aware: false,
            include_length_term: true,
        }
    }
}

fn pairs_of(corpus: &ParallelCorpus) -> Vec<(&[TokenId], &[TokenId])> {
    corpus
        .pairs()
        .iter()
        .map(|(x, y)| (x.tokens(), y.tokens()))
        .collect()
}

/// Decodes every source of `corpus`. AR models decode greedily, NAR models
/// with `opts.decoder`.
pub fn predictions(
    model: &Transformer,
    corpus: &ParallelCorpus,
    opts: &EvalOptions,
) -> Result<Vec<Sentence>> {
    let sources: Vec<&[TokenId]> = corpus.sources().map(|s| s.tokens()).collect();
    let lengths: Vec<usize> = corpus.targets().map(|y| y.len()).collect();
    let lens = opts.use_ground_truth_length.then_some(lengths.as_slice());
    if model.is_autoregressive() {
        greedy_batch(model, &sources, lens)
    } else {
        nar_decode_batch(model, &sources, lens, opts.decoder)
    }
}

/// Fraction of predictions equal to their reference, token for token.
pub fn match_rate(predictions: &[Sentence], references: &[Sentence], concat_aware: bool) -> f64 {
    assert_eq!(
        predictions.len(),
        references.len(),
        "one prediction per reference"
    );
    if predictions.is_empty() {
        return 0.0;
    }
    let matched = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| {
            if concat_aware {
                concat_decode(p) == concat_decode(r)
            } else {
                p == r
            }
        })
        .count();
    matched as f64 / predictions.len() as f64
}

/// Full evaluation; returns the report and the predictions behind it.
pub fn evaluate(
    model: &Transformer,
    corpus: &ParallelCorpus,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<Sentence>)> {
    let preds = predictions(model, corpus, opts)?;
    let refs = corpus
        .pairs()
        .iter()
        .map(|p| p.1.clone())
        .collect::<Vec<_>>();
    let exact_match = match_rate(&preds, &refs, opts.concat_aware);
    let pairs = pairs_of(corpus);
    let (token_nll, ncm) = if model.is_autoregressive() {
        let ll = model.ar_log_likelihoods(&pairs)?;
        let tokens: usize = pairs.iter().map(|p| p.1.len() + 1).sum();
        (-ll.iter().sum::<f64>() / tokens as f64, None)
    } else {
        let ll = model.nar_log_likelihoods(&pairs, false)?;
        let tokens: usize = pairs.iter().map(|p| p.1.len()).sum();
        (
            -ll.iter().sum::<f64>() / tokens as f64,
            Some(ncm_with(model, corpus, opts.include_length_term)?),
        )
    };
    let (hyp, reference): (Vec<Sentence>, Vec<Sentence>) = if opts.concat_aware {
        (
            preds.iter().map(|p| concat_decode(p)).collect(),
            refs.iter().map(|r| concat_decode(r)).collect(),
        )
    } else {
        (preds.clone(), refs)
    };
    let bleu = bleu(&hyp, &reference).ok();
    let report = EvalReport {
        exact_match,
        token_nll,
        ncm,
        bleu,
        count: corpus.len(),
    };
    Ok((report, preds))
}

/// Whole-sentence accuracy with greedy AR or argmax NAR decoding.
pub fn exact_match(
    model: &Transformer,
    corpus: &ParallelCorpus,
    use_ground_truth_length: bool,
) -> Result<EvalReport> {
    let opts = EvalOptions {
        use_ground_truth_length,
        ..EvalOptions::default()
    };
    Ok(evaluate(model, corpus, &opts)?.0)
}

/// Mean negative NAR log-likelihood of the corpus, optionally without the
/// length term. The model should have been trained on this corpus; the
/// value is relative to that training budget.
pub fn cm_with(
    model: &Transformer,
    corpus: &ParallelCorpus,
    include_length_term: bool,
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("CM of an empty corpus"));
    }
    let ll = model.nar_log_likelihoods(&pairs_of(corpus), include_length_term)?;
    Ok(-ll.iter().sum::<f64>() / corpus.len() as f64)
}

pub fn cm(model: &Transformer, corpus: &ParallelCorpus) -> Result<f64> {
    cm_with(model, corpus, true)
}

/// CM divided by the mean target length.
pub fn ncm_with(
    model: &Transformer,
    corpus: &ParallelCorpus,
    include_length_term: bool,
) -> Result<f64> {
    Ok(cm_with(model, corpus, include_length_term)? / corpus.mean_target_len())
}

pub fn ncm(model: &Transformer, corpus: &ParallelCorpus) -> Result<f64> {
    ncm_with(model, corpus, true)
}

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 in percent: clipped n-gram precisions for n = 1..4 summed
/// over the corpus, geometric mean, brevity penalty. No smoothing, so any
/// zero precision gives 0.
pub fn bleu<T, S>(hypotheses: &[S], references: &[S]) -> Result<f64>
where
    T: Eq + Hash,
    S: AsRef<[T]>,
{
    if hypotheses.len() != references.len() {
        return Err(Error::Argument(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput("BLEU of an empty corpus"));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matches.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| (matches[i] as f64 / totals[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}
