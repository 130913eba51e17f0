//! Forward and backward kernels shared by the autodiff tape and the
//! cache-based inference path.

use super::matrix::Matrix;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // fully masked row; leave a zero distribution
        row.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    row.iter_mut().for_each(|x| *x -= lse);
}

pub fn log_softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        log_softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub struct LayerNormCache {
    pub normed: Matrix,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm_forward(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, LayerNormCache) {
    let d = x.cols();
    let mut normed = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    let mut out = Matrix::zeros(x.rows(), d);
    for r in 0..x.rows() {
        let row = normed.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
        for ((o, n), (g, b)) in out
            .row_mut(r)
            .iter_mut()
            .zip(normed.row(r))
            .zip(gain.iter().zip(bias))
        {
            *o = n * g + b;
        }
    }
    (out, LayerNormCache { normed, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    dy: &Matrix,
    cache: &LayerNormCache,
    gain: &[f64],
) -> (Matrix, Vec<f64>, Vec<f64>) {
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    let mut dn = vec![0.0; d];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let nr = cache.normed.row(r);
        for j in 0..d {
            dgain[j] += dyr[j] * nr[j];
            dbias[j] += dyr[j];
            dn[j] = dyr[j] * gain[j];
        }
        let mean_dn = dn.iter().sum::<f64>() / d as f64;
        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dn[j] - mean_dn - nr[j] * mean_dn_n);
        }
    }
    (dx, dgain, dbias)
}

/// One attention block: queries `q_start..q_start+q_len` attend to keys
/// `k_start..k_start+k_len` of the packed key/value matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub segments: Vec<AttnSegment>,
    pub heads: usize,
    /// Query `i` sees key `j` only when `j <= i + (k_len - q_len)`.
    pub causal: bool,
}

impl AttnLayout {
    /// Self-attention over packed sequences of the given lengths.
    pub fn self_attention(lens: &[usize], heads: usize, causal: bool) -> Self {
        let mut segments = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &l in lens {
            segments.push(AttnSegment {
                q_start: off,
                q_len: l,
                k_start: off,
                k_len: l,
            });
            off += l;
        }
        AttnLayout {
            segments,
            heads,
            causal,
        }
    }

    pub fn cross_attention(q_lens: &[usize], k_lens: &[usize], heads: usize) -> Self {
        assert_eq!(q_lens.len(), k_lens.len());
        let mut segments = Vec::with_capacity(q_lens.len());
        let (mut qo, mut ko) = (0, 0);
        for (&ql, &kl) in q_lens.iter().zip(k_lens) {
            segments.push(AttnSegment {
                q_start: qo,
                q_len: ql,
                k_start: ko,
                k_len: kl,
            });
            qo += ql;
            ko += kl;
        }
        AttnLayout {
            segments,
            heads,
            causal: false,
        }
    }
}

fn head_block(m: &Matrix, start: usize, len: usize, col0: usize, width: usize) -> Matrix {
    Matrix::from_fn(len, width, |r, c| m.get(start + r, col0 + c))
}

fn add_head_block(dst: &mut Matrix, start: usize, col0: usize, src: &Matrix) {
    for r in 0..src.rows() {
        let row = dst.row_mut(start + r);
        for (c, v) in src.row(r).iter().enumerate() {
            row[col0 + c] += v;
        }
    }
}

/// Scaled dot-product multi-head attention core (no projections).
///
/// Returns the concatenated head outputs and the attention probabilities,
/// one `q_len × k_len` matrix per (segment, head), segment-major.
pub fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    layout: &AttnLayout,
) -> (Matrix, Vec<Matrix>) {
    let d = q.cols();
    let h = layout.heads;
    assert_eq!(d % h, 0, "model width {d} not divisible by {h} heads");
    assert_eq!(k.cols(), d);
    assert_eq!(v.cols(), d);
    let dk = d / h;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(layout.segments.len() * h);
    for seg in &layout.segments {
        let offset = seg.k_len as isize - seg.q_len as isize;
        for head in 0..h {
            let c0 = head * dk;
            let qh = head_block(q, seg.q_start, seg.q_len, c0, dk);
            let kh = head_block(k, seg.k_start, seg.k_len, c0, dk);
            let vh = head_block(v, seg.k_start, seg.k_len, c0, dk);
            let mut s = qh.matmul_t(&kh);
            s.scale_in_place(scale);
            if layout.causal {
                for i in 0..seg.q_len {
                    for j in 0..seg.k_len {
                        if j as isize > i as isize + offset {
                            s.set(i, j, f64::NEG_INFINITY);
                        }
                    }
                }
            }
            for r in 0..s.rows() {
                softmax_in_place(s.row_mut(r));
            }
            let oh = s.matmul(&vh);
            add_head_block(&mut out, seg.q_start, c0, &oh);
            probs.push(s);
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub fn attention_backward(
    d_out: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &[Matrix],
    layout: &AttnLayout,
) -> (Matrix, Matrix, Matrix) {
    let d = q.cols();
    let h = layout.heads;
    let dk = d / h;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut dq = Matrix::zeros(q.rows(), d);
    let mut dkm = Matrix::zeros(k.rows(), d);
    let mut dv = Matrix::zeros(v.rows(), d);
    let mut p_iter = probs.iter();
    for seg in &layout.segments {
        for head in 0..h {
            let p = p_iter.next().expect("probability cache matches layout");
            let c0 = head * dk;
            let qh = head_block(q, seg.q_start, seg.q_len, c0, dk);
            let kh = head_block(k, seg.k_start, seg.k_len, c0, dk);
            let vh = head_block(v, seg.k_start, seg.k_len, c0, dk);
            let doh = head_block(d_out, seg.q_start, seg.q_len, c0, dk);
            add_head_block(&mut dv, seg.k_start, c0, &p.t_matmul(&doh));
            let mut ds = doh.matmul_t(&vh);
            for r in 0..ds.rows() {
                let pr = p.row(r);
                let dot: f64 = ds.row(r).iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, pv) in ds.row_mut(r).iter_mut().zip(pr) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            add_head_block(&mut dq, seg.q_start, c0, &ds.matmul(&kh));
            add_head_block(&mut dkm, seg.k_start, c0, &ds.t_matmul(&qh));
        }
    }
    (dq, dkm, dv)
}

/// Label-smoothed cross-entropy averaged over rows.
///
/// The smoothed target puts `1 - epsilon` on the reference id and spreads
/// `epsilon` uniformly over the remaining `V - 1` ids. Returns the loss and
/// the row-wise softmax (reused by the backward pass).
pub fn cross_entropy_ls_forward(logits: &Matrix, targets: &[usize], epsilon: f64) -> (f64, Matrix) {
    assert_eq!(logits.rows(), targets.len(), "one target per logits row");
    let v = logits.cols();
    let off = if v > 1 { epsilon / (v - 1) as f64 } else { 0.0 };
    let mut total = 0.0;
    let mut probs = logits.clone();
    for (r, &t) in targets.iter().enumerate() {
        let row = probs.row_mut(r);
        let lse = log_sum_exp(row);
        let mut row_loss = 0.0;
        for (id, x) in row.iter_mut().enumerate() {
            let lp = *x - lse;
            let q = if id == t { 1.0 - epsilon } else { off };
            if q > 0.0 {
                row_loss -= q * lp;
            }
            *x = lp.exp();
        }
        total += row_loss;
    }
    let n = targets.len().max(1) as f64;
    (total / n, probs)
}

pub fn cross_entropy_ls_backward(
    probs: &Matrix,
    targets: &[usize],
    epsilon: f64,
    d_loss: f64,
) -> Matrix {
    let v = probs.cols();
    let off = if v > 1 { epsilon / (v - 1) as f64 } else { 0.0 };
    let n = targets.len().max(1) as f64;
    let mut g = probs.clone();
    for (r, &t) in targets.iter().enumerate() {
        for (id, x) in g.row_mut(r).iter_mut().enumerate() {
            let q = if id == t { 1.0 - epsilon } else { off };
            *x = (*x - q) * d_loss / n;
        }
    }
    g
}
