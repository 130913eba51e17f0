//! Cached AR decoding: each step feeds one token per hypothesis and reuses
//! the keys/values of earlier positions.

use super::layers::{ff_plain, norm_plain, AttnParams};
use super::transformer::Transformer;
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::substrate::kernels::{attention_forward, log_softmax_in_place, AttnLayout};
use crate::substrate::{Matrix, ParamStore};

/// Encoder states plus the per-layer cross-attention keys and values.
#[derive(Clone, Debug)]
pub struct EncoderMemory {
    pub states: Matrix,
    cross_k: Vec<Matrix>,
    cross_v: Vec<Matrix>,
}

/// Self-attention keys/values of one hypothesis, per decoder layer.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    len: usize,
}

impl DecoderCache {
    /// Number of tokens fed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn project(store: &ParamStore, p: &AttnParams, x: &Matrix) -> (Matrix, Matrix, Matrix) {
    (
        x.matmul(store.value(p.wq)),
        x.matmul(store.value(p.wk)),
        x.matmul(store.value(p.wv)),
    )
}

impl Transformer {
    pub fn encoder_memory(&self, states: Matrix) -> EncoderMemory {
        let store = self.params();
        let (cross_k, cross_v) = self
            .layout
            .dec
            .iter()
            .map(|l| {
                (
                    states.matmul(store.value(l.cross.wk)),
                    states.matmul(store.value(l.cross.wv)),
                )
            })
            .unzip();
        EncoderMemory {
            states,
            cross_k,
            cross_v,
        }
    }

    pub fn empty_cache(&self) -> DecoderCache {
        let d = self.config().d_model;
        let n = self.layout.dec.len();
        DecoderCache {
            k: vec![Matrix::zeros(0, d); n],
            v: vec![Matrix::zeros(0, d); n],
            len: 0,
        }
    }

    /// Feeds `tokens[b]` to hypothesis `b` and returns the `B × V`
    /// next-token log-probabilities. All caches must be at the same position.
    pub fn decode_step(
        &self,
        mem: &EncoderMemory,
        caches: &mut [DecoderCache],
        tokens: &[TokenId],
    ) -> Result<Matrix> {
        if !self.is_autoregressive() {
            return Err(Error::Config(
                "cached decoding needs an autoregressive model".into(),
            ));
        }
        assert_eq!(caches.len(), tokens.len(), "one token per hypothesis");
        let pos = caches.first().map_or(0, |c| c.len);
        if caches.iter().any(|c| c.len != pos) {
            return Err(Error::Argument(
                "hypotheses are at different positions".into(),
            ));
        }
        if pos >= self.config().dec_positions() {
            return Err(Error::Argument(format!(
                "decoder position {pos} exceeds L_max"
            )));
        }
        let store = self.params();
        let cfg = self.config();
        let embed = store.value(self.layout.embed);
        let dec_pos = store.value(self.layout.dec_pos);
        let b = tokens.len();
        let mut x = Matrix::from_fn(b, cfg.d_model, |r, c| {
            embed.get(tokens[r] as usize, c) + dec_pos.get(pos, c)
        });
        let single = AttnLayout::cross_attention(&[1], &[pos + 1], cfg.heads);
        let cross = AttnLayout::cross_attention(&[1], &[mem.states.rows()], cfg.heads);

        for (l, layer) in self.layout.dec.iter().enumerate() {
            let (q, k, v) = project(store, &layer.self_attn, &x);
            let mut heads = Matrix::zeros(b, cfg.d_model);
            for (h, cache) in caches.iter_mut().enumerate() {
                cache.k[l].push_row(k.row(h));
                cache.v[l].push_row(v.row(h));
                let (o, _) =
                    attention_forward(&q.slice_rows(h, 1), &cache.k[l], &cache.v[l], &single);
                heads.row_mut(h).copy_from_slice(o.row(0));
            }
            let mut a = heads.matmul(store.value(layer.self_attn.wo));
            a.add_assign(&x);
            x = norm_plain(store, &layer.ln1, &a);

            let q = x.matmul(store.value(layer.cross.wq));
            let mut heads = Matrix::zeros(b, cfg.d_model);
            for h in 0..b {
                let (o, _) = attention_forward(
                    &q.slice_rows(h, 1),
                    &mem.cross_k[l],
                    &mem.cross_v[l],
                    &cross,
                );
                heads.row_mut(h).copy_from_slice(o.row(0));
            }
            let mut c = heads.matmul(store.value(layer.cross.wo));
            c.add_assign(&x);
            x = norm_plain(store, &layer.ln2, &c);

            x = norm_plain(store, &layer.ln3, &ff_plain(store, &layer.ff, &x));
        }
        for cache in caches.iter_mut() {
            cache.len += 1;
        }
        let mut logits = x.matmul_t(embed);
        for r in 0..b {
            log_softmax_in_place(logits.row_mut(r));
        }
        Ok(logits)
    }
}
