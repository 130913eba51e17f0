//! Non-autoregressive sequence generation laboratory.
//!
//! * [`corpus`]: vocabularies, the two synthetic translation tasks, TSV I/O.
//! * [`substrate`]: dense matrices, a reverse-mode tape, Adam, checkpoints.
//! * [`model`]: AR and NAR Transformers with a NAR length classifier.
//! * [`decode`]: greedy and beam search, de-duplicated CRF decoding,
//!   the `<concat>` codec, parallel length decoding with rescoring.
//! * [`train`]: training loops and metrics (exact match, CM/NCM, BLEU).
//! * [`em`]: the alternating AR/NAR optimisation loop.

pub mod corpus;
pub mod decode;
pub mod em;
pub mod error;
pub mod model;
pub mod substrate;
pub mod train;

#[cfg(test)]
mod test_support;

pub use corpus::{ParallelCorpus, Sentence, TokenId, Vocabulary};
pub use decode::NarDecoder;
pub use em::{EmConfig, EmSetup};
pub use error::{Error, Result};
pub use model::{ModelConfig, Transformer};
pub use substrate::AdamConfig;
pub use train::{EvalOptions, EvalReport, TrainConfig};
