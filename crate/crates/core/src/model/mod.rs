//! The AR and NAR Transformers.
//!
//! An AR model factorises `p(y | x) = Π_i p(y_i | x, y_<i)` and is trained
//! with EOS appended to every target. A NAR model factorises
//! `p(y | x) = p(T' | x) · Π_i p(y_i | x, T')`: its decoder reads `T'`
//! PAD embeddings plus learned positions, and a classifier over mean-pooled
//! encoder states predicts `T'`.

pub mod config;
pub mod incremental;
pub mod layers;
pub mod transformer;

pub use config::{ModelConfig, PRESETS};
pub use incremental::{DecoderCache, EncoderMemory};
pub use transformer::{ar_prefix, Transformer};

use crate::substrate::kernels;
use crate::substrate::Matrix;

/// `T' × V` per-position log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbMatrix(Matrix);

impl LogProbMatrix {
    pub fn from_logits(logits: &Matrix) -> Self {
        LogProbMatrix(kernels::log_softmax_rows(logits))
    }

    /// Wraps rows that are already log-distributions.
    pub fn from_log_probs(m: Matrix) -> Self {
        LogProbMatrix(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn get(&self, i: usize, v: usize) -> f64 {
        self.0.get(i, v)
    }

    /// Largest `|logsumexp(row)|`; zero for exactly normalised rows.
    pub fn normalization_error(&self) -> f64 {
        (0..self.len())
            .map(|i| kernels::log_sum_exp(self.row(i)).abs())
            .fold(0.0, f64::max)
    }
}

/// Log-probabilities over target lengths `1..=L_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct LengthDistribution {
    log_probs: Vec<f64>,
}

impl LengthDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        let mut log_probs = logits.to_vec();
        kernels::log_softmax_in_place(&mut log_probs);
        LengthDistribution { log_probs }
    }

    pub fn max_len(&self) -> usize {
        self.log_probs.len()
    }

    /// `log p(T' = len)`, `-inf` outside the support.
    pub fn log_prob(&self, len: usize) -> f64 {
        len.checked_sub(1)
            .and_then(|i| self.log_probs.get(i))
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Most likely length; ties go to the shorter length.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &lp) in self.log_probs.iter().enumerate() {
            if lp > self.log_probs[best] {
                best = i;
            }
        }
        best + 1
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

#[cfg(test)]
mod tests;
