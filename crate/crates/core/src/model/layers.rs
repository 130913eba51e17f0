//! Residual attention and feed-forward sublayers.
//!
//! With states stored one token per row, the attention sublayer computes
//!
//! ```text
//! attn(context, input) = input + concat_h softmax(Q_h K_hᵀ / √k) V_h · W_O
//!     Q = input · W_Q,  K = context · W_K,  V = context · W_V
//! ```
//!
//! and the feed-forward sublayer `ff(input) = input + ReLU(input W₁ + b₁) W₂ + b₂`.
//! Layer normalisation is applied by the enclosing block, not here.

use std::rc::Rc;

use rand::Rng;

use crate::substrate::kernels::{self, AttnLayout};
use crate::substrate::params::{uniform, xavier_uniform};
use crate::substrate::{Graph, Matrix, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl AttnParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        AttnParams {
            wq: store.add(format!("{prefix}.wq"), xavier_uniform(d, d, rng)),
            wk: store.add(format!("{prefix}.wk"), xavier_uniform(d, d, rng)),
            wv: store.add(format!("{prefix}.wv"), xavier_uniform(d, d, rng)),
            wo: store.add(format!("{prefix}.wo"), xavier_uniform(d, d, rng)),
        }
    }
}

impl FfParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        r: usize,
        rng: &mut impl Rng,
    ) -> Self {
        FfParams {
            w1: store.add(format!("{prefix}.w1"), xavier_uniform(d, r, rng)),
            b1: store.add(format!("{prefix}.b1"), Matrix::zeros(1, r)),
            w2: store.add(format!("{prefix}.w2"), xavier_uniform(r, d, rng)),
            b2: store.add(format!("{prefix}.b2"), Matrix::zeros(1, d)),
        }
    }
}

impl NormParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        NormParams {
            gain: store.add(format!("{prefix}.gain"), Matrix::filled(1, d, 1.0)),
            bias: store.add(format!("{prefix}.bias"), Matrix::zeros(1, d)),
        }
    }
}

/// Embedding-scale initialisation (standard deviation `1/√d`).
pub fn embedding_init(rows: usize, d: usize, rng: &mut impl Rng) -> Matrix {
    uniform(rows, d, (3.0 / d as f64).sqrt(), rng)
}

/// Residual multi-head attention of `input` (queries) over `context`.
pub fn attn(
    g: &mut Graph,
    store: &ParamStore,
    p: &AttnParams,
    context: Var,
    input: Var,
    layout: Rc<AttnLayout>,
    dropout: f64,
) -> Var {
    let wq = g.param(store, p.wq);
    let wk = g.param(store, p.wk);
    let wv = g.param(store, p.wv);
    let wo = g.param(store, p.wo);
    let q = g.matmul(input, wq);
    let k = g.matmul(context, wk);
    let v = g.matmul(context, wv);
    let heads = g.attention(q, k, v, layout);
    let o = g.matmul(heads, wo);
    let o = g.dropout(o, dropout);
    g.add(input, o)
}

/// Residual token-wise feed-forward layer.
pub fn ff(g: &mut Graph, store: &ParamStore, p: &FfParams, input: Var, dropout: f64) -> Var {
    let w1 = g.param(store, p.w1);
    let b1 = g.param(store, p.b1);
    let w2 = g.param(store, p.w2);
    let b2 = g.param(store, p.b2);
    let h = g.matmul(input, w1);
    let h = g.add_row(h, b1);
    let h = g.relu(h);
    let o = g.matmul(h, w2);
    let o = g.add_row(o, b2);
    let o = g.dropout(o, dropout);
    g.add(input, o)
}

pub fn norm(g: &mut Graph, store: &ParamStore, p: &NormParams, x: Var) -> Var {
    let gain = g.param(store, p.gain);
    let bias = g.param(store, p.bias);
    g.layer_norm(x, gain, bias)
}

// Tape-free versions used by cached decoding.

pub(crate) fn ff_plain(store: &ParamStore, p: &FfParams, input: &Matrix) -> Matrix {
    let mut h = input.matmul(store.value(p.w1));
    h.add_row_broadcast(store.value(p.b1).data());
    h.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
    let mut o = h.matmul(store.value(p.w2));
    o.add_row_broadcast(store.value(p.b2).data());
    o.add_assign(input);
    o
}

pub(crate) fn norm_plain(store: &ParamStore, p: &NormParams, x: &Matrix) -> Matrix {
    kernels::layer_norm_forward(x, store.value(p.gain).data(), store.value(p.bias).data()).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line scalar evaluation of the attention sublayer.
    fn naive_attn(context: &Matrix, input: &Matrix, w: [&Matrix; 4], heads: usize) -> Matrix {
        let [wq, wk, wv, wo] = w;
        let d = input.cols();
        let dk = d / heads;
        let proj = |x: &Matrix, wm: &Matrix, r: usize, c: usize| {
            (0..d).map(|j| x.get(r, j) * wm.get(j, c)).sum::<f64>()
        };
        let mut concat = Matrix::zeros(input.rows(), d);
        for h in 0..heads {
            for i in 0..input.rows() {
                let mut scores = Vec::new();
                for j in 0..context.rows() {
                    let mut s = 0.0;
                    for c in h * dk..(h + 1) * dk {
                        s += proj(input, wq, i, c) * proj(context, wk, j, c);
                    }
                    scores.push(s / (dk as f64).sqrt());
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for c in h * dk..(h + 1) * dk {
                    let mut acc = 0.0;
                    for (j, s) in scores.iter().enumerate() {
                        acc += (s - m).exp() / z * proj(context, wv, j, c);
                    }
                    concat.set(i, c, acc);
                }
            }
        }
        Matrix::from_fn(input.rows(), d, |r, c| {
            input.get(r, c) + (0..d).map(|j| concat.get(r, j) * wo.get(j, c)).sum::<f64>()
        })
    }

    fn setup(d: usize, seed: u64) -> (ParamStore, AttnParams, FfParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = AttnParams::register(&mut store, "a", d, &mut rng);
        let f = FfParams::register(&mut store, "f", d, 2 * d, &mut rng);
        (store, a, f, rng)
    }

    fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        uniform(r, c, 1.0, rng)
    }

    #[test]
    fn attn_zero_projections_is_identity() {
        let (mut store, a, _, mut rng) = setup(4, 1);
        for id in [a.wq, a.wk, a.wv, a.wo] {
            store.value_mut(id).fill(0.0);
        }
        let input = rand_matrix(3, 4, &mut rng);
        let ctx = rand_matrix(2, 4, &mut rng);
        let mut g = Graph::new();
        let (i, c) = (g.input(input.clone()), g.input(ctx));
        let out = attn(
            &mut g,
            &store,
            &a,
            c,
            i,
            Rc::new(AttnLayout::cross_attention(&[3], &[2], 1)),
            0.0,
        );
        assert_eq!(g.value(out), &input);
    }

    #[test]
    fn attn_single_key_broadcasts_value() {
        let (store, a, _, mut rng) = setup(4, 2);
        let input = rand_matrix(3, 4, &mut rng);
        let ctx = rand_matrix(1, 4, &mut rng);
        let mut g = Graph::new();
        let (i, c) = (g.input(input.clone()), g.input(ctx.clone()));
        let out = attn(
            &mut g,
            &store,
            &a,
            c,
            i,
            Rc::new(AttnLayout::cross_attention(&[3], &[1], 2)),
            0.0,
        );
        let delta = ctx.matmul(store.value(a.wv)).matmul(store.value(a.wo));
        for r in 0..3 {
            for col in 0..4 {
                assert!(
                    (g.value(out).get(r, col) - input.get(r, col) - delta.get(0, col)).abs()
                        < 1e-12
                );
            }
        }
    }

    #[test]
    fn attn_matches_naive_oracle() {
        let (store, a, _, mut rng) = setup(8, 3);
        let input = rand_matrix(2, 8, &mut rng);
        let ctx = rand_matrix(3, 8, &mut rng);
        for heads in [1, 2, 4] {
            let mut g = Graph::new();
            let (i, c) = (g.input(input.clone()), g.input(ctx.clone()));
            let out = attn(
                &mut g,
                &store,
                &a,
                c,
                i,
                Rc::new(AttnLayout::cross_attention(&[2], &[3], heads)),
                0.0,
            );
            let w = [
                store.value(a.wq),
                store.value(a.wk),
                store.value(a.wv),
                store.value(a.wo),
            ];
            let want = naive_attn(&ctx, &input, w, heads);
            assert!(g.value(out).max_abs_diff(&want) < 1e-10);
        }
    }

    #[test]
    fn ff_identity_cases_and_oracle() {
        let (mut store, _, f, mut rng) = setup(4, 4);
        let input = rand_matrix(3, 4, &mut rng);

        let mut g = Graph::new();
        let i = g.input(input.clone());
        let out = ff(&mut g, &store, &f, i, 0.0);
        let naive = Matrix::from_fn(3, 4, |r, c| {
            let w1 = store.value(f.w1);
            let w2 = store.value(f.w2);
            let hidden: Vec<f64> = (0..8)
                .map(|k| {
                    (0..4)
                        .map(|j| input.get(r, j) * w1.get(j, k))
                        .sum::<f64>()
                        .max(0.0)
                })
                .collect();
            input.get(r, c) + (0..8).map(|k| hidden[k] * w2.get(k, c)).sum::<f64>()
        });
        assert!(g.value(out).max_abs_diff(&naive) < 1e-10);
        assert!(ff_plain(&store, &f, &input).max_abs_diff(&naive) < 1e-12);

        // ReLU kills every unit
        store.value_mut(f.b1).fill(-1e6);
        let mut g = Graph::new();
        let i = g.input(input.clone());
        let out = ff(&mut g, &store, &f, i, 0.0);
        assert_eq!(g.value(out), &input);

        store.value_mut(f.b1).fill(0.0);
        store.value_mut(f.w1).fill(0.0);
        store.value_mut(f.w2).fill(0.0);
        let mut g = Graph::new();
        let i = g.input(input.clone());
        let out = ff(&mut g, &store, &f, i, 0.0);
        assert_eq!(g.value(out), &input);
    }
}
