//! Minimal dense numeric core: matrices, a reverse-mode tape, Adam, and
//! finite-difference gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod matrix;
pub mod optim;
pub mod params;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var};
pub use kernels::{cross_entropy_ls_forward, softmax_rows, AttnLayout, AttnSegment};
pub use matrix::Matrix;
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore, Parameter};

/// Row-wise softmax (see [`kernels::softmax_rows`]).
pub fn softmax(m: &Matrix) -> Matrix {
    kernels::softmax_rows(m)
}

/// Mean label-smoothed cross-entropy of `logits` against `targets`.
pub fn cross_entropy_ls(logits: &Matrix, targets: &[usize], epsilon: f64) -> crate::Result<f64> {
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(crate::Error::Index {
            what: "vocabulary",
            index: bad,
            size: logits.cols(),
        });
    }
    if logits.rows() != targets.len() {
        return Err(crate::Error::shape(
            "cross_entropy_ls",
            format!(
                "{} logits rows for {} targets",
                logits.rows(),
                targets.len()
            ),
        ));
    }
    Ok(kernels::cross_entropy_ls_forward(logits, targets, epsilon).0)
}
