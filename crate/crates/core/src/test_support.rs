use crate::model::{ModelConfig, Transformer};

/// Small randomly initialised model with dropout off.
pub(crate) fn tiny(ar: bool, vocab: usize, d: usize, layers: usize, seed: u64) -> Transformer {
    tiny_with(ar, vocab, d, layers, 6, 8, seed)
}

pub(crate) fn tiny_with(
    ar: bool,
    vocab: usize,
    d: usize,
    layers: usize,
    max_src: usize,
    max_tgt: usize,
    seed: u64,
) -> Transformer {
    let cfg = ModelConfig {
        enc_layers: layers,
        dec_layers: layers,
        d_model: d,
        d_filter: 2 * d,
        heads: 2,
        vocab_size: vocab,
        max_src_len: max_src,
        max_tgt_len: max_tgt,
        autoregressive: ar,
        dropout: 0.0,
    };
    Transformer::new(cfg, seed).unwrap()
}
