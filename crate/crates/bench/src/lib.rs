//! Shared fixtures for the benchmarks.

use narem::{ModelConfig, Transformer};

/// A small model of either kind over the synthetic vocabulary.
pub fn model(autoregressive: bool, d_model: usize, layers: usize) -> Transformer {
    let cfg = ModelConfig {
        enc_layers: layers,
        dec_layers: layers,
        d_model,
        d_filter: 4 * d_model,
        heads: 4,
        vocab_size: 10,
        max_src_len: 30,
        max_tgt_len: 154,
        autoregressive,
        dropout: 0.0,
    };
    Transformer::new(cfg, 7).expect("valid config")
}
