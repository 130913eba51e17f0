use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of one AR or NAR Transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Hidden size `d`.
    pub d_model: usize,
    /// Feed-forward filter size `r`.
    pub d_filter: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_src_len: usize,
    /// `L_max`: the longest target the decoder (and the length classifier)
    /// can produce, EOS excluded.
    pub max_tgt_len: usize,
    pub autoregressive: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.1
}

/// `(enc_layers, dec_layers, d_model, d_filter, heads)` of the named
/// architecture presets.
pub const PRESETS: [(&str, [usize; 5]); 4] = [
    ("toy", [3, 3, 256, 1024, 4]),
    ("small", [5, 5, 256, 1024, 4]),
    ("base", [6, 6, 512, 2048, 8]),
    ("large", [6, 6, 1024, 4096, 16]),
];

impl ModelConfig {
    pub fn preset(
        name: &str,
        vocab_size: usize,
        max_src_len: usize,
        max_tgt_len: usize,
        autoregressive: bool,
    ) -> Result<Self> {
        let (_, [enc_layers, dec_layers, d_model, d_filter, heads]) =
            PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset `{name}` (expected toy, small, base or large)"
                ))
            })?;
        let cfg = ModelConfig {
            enc_layers: *enc_layers,
            dec_layers: *dec_layers,
            d_model: *d_model,
            d_filter: *d_filter,
            heads: *heads,
            vocab_size,
            max_src_len,
            max_tgt_len,
            autoregressive,
            dropout: default_dropout(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn head_size(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.enc_layers == 0 {
            return fail("at least one encoder layer is required".into());
        }
        if self.d_filter == 0
            || self.vocab_size == 0
            || self.max_src_len == 0
            || self.max_tgt_len == 0
        {
            return fail("sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Rows of the decoder positional table: AR decoders read BOS plus up
    /// to `L_max` tokens, NAR decoders exactly `T'` slots.
    pub fn dec_positions(&self) -> usize {
        if self.autoregressive {
            self.max_tgt_len + 1
        } else {
            self.max_tgt_len
        }
    }
}
