//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] records every operation in evaluation order. Calling
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients into the [`ParamStore`] the parameters were read from.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, AttnLayout, LayerNormCache};
use super::matrix::{gemm, Matrix};
use super::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddRow {
        a: Var,
        bias: Var,
    },
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttnLayout>,
        probs: Vec<Matrix>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SegmentMean {
        x: Var,
        lens: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        epsilon: f64,
        probs: Matrix,
    },
    SumAll(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training graph: dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Graph {
            nodes: Vec::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on a non-scalar node");
        m.get(0, 0)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
        )
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(self.value(bias).rows(), 1, "bias must be a row vector");
        value.add_row_broadcast(self.value(bias).data());
        self.push(value, Op::AddRow { a, bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "mul shape");
        let data = ma
            .data()
            .iter()
            .zip(mb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Matrix::from_vec(ma.rows(), ma.cols(), data).expect("same shape");
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (value, cache) = kernels::layer_norm_forward(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
        )
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttnLayout>) -> Var {
        let (value, probs) =
            kernels::attention_forward(self.value(q), self.value(k), self.value(v), &layout);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        )
    }

    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let value = self.value(table).select_rows(&ids);
        self.push(value, Op::GatherRows { table, ids })
    }

    /// Mean of each consecutive block of rows; one output row per block.
    pub fn segment_mean(&mut self, x: Var, lens: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut value = Matrix::zeros(lens.len(), xv.cols());
        let mut off = 0;
        for (s, &l) in lens.iter().enumerate() {
            let out = value.row_mut(s);
            for r in off..off + l {
                for (o, v) in out.iter_mut().zip(xv.row(r)) {
                    *o += v / l as f64;
                }
            }
            off += l;
        }
        assert_eq!(off, xv.rows(), "segment lengths cover all rows");
        self.push(value, Op::SegmentMean { x, lens })
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Matrix::from_vec(xv.rows(), xv.cols(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask })
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let value = kernels::log_softmax_rows(self.value(x));
        self.push(value, Op::LogSoftmax(x))
    }

    /// Mean label-smoothed cross-entropy over rows; a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, epsilon: f64) -> Var {
        let (loss, probs) =
            kernels::cross_entropy_ls_forward(self.value(logits), &targets, epsilon);
        let value = Matrix::filled(1, 1, loss);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets,
                epsilon,
                probs,
            },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    /// Back-propagates from the scalar `loss` and adds parameter gradients
    /// into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward from a non-scalar"
        );
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g),
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                    if *trans_b {
                        // out = a bᵀ: da = g b, db = gᵀ a
                        gemm(1.0, &g, false, bv, false, 0.0, &mut ga);
                        gemm(1.0, &g, true, av, false, 0.0, &mut gb);
                    } else {
                        gemm(1.0, &g, false, bv, true, 0.0, &mut ga);
                        gemm(1.0, av, true, &g, false, 0.0, &mut gb);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow { a, bias } => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b));
                    let gb = elementwise(&g, self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Relu(a) => {
                    let out = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(d, o)| if *o > 0.0 { *d } else { 0.0 })
                        .collect();
                    acc(
                        &mut grads,
                        *a,
                        Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"),
                    );
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    cache,
                } => {
                    let (dx, dg, db) =
                        kernels::layer_norm_backward(&g, cache, self.value(*gain).data());
                    acc(&mut grads, *x, dx);
                    acc(
                        &mut grads,
                        *gain,
                        Matrix::from_vec(1, dg.len(), dg).expect("shape"),
                    );
                    acc(
                        &mut grads,
                        *bias,
                        Matrix::from_vec(1, db.len(), db).expect("shape"),
                    );
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (dq, dk, dv) = kernels::attention_backward(
                        &g,
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        layout,
                    );
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::GatherRows { table, ids } => {
                    let tv = self.value(*table);
                    let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::SegmentMean { x, lens } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut off = 0;
                    for (s, &l) in lens.iter().enumerate() {
                        for r in off..off + l {
                            for (o, v) in gx.row_mut(r).iter_mut().zip(g.row(s)) {
                                *o = v / l as f64;
                            }
                        }
                        off += l;
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Dropout { x, mask } => {
                    let data = g.data().iter().zip(mask).map(|(a, m)| a * m).collect();
                    acc(
                        &mut grads,
                        *x,
                        Matrix::from_vec(g.rows(), g.cols(), data).expect("shape"),
                    );
                }
                Op::LogSoftmax(x) => {
                    let out = &node.value;
                    let mut gx = g.clone();
                    for r in 0..gx.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for (o, lp) in gx.row_mut(r).iter_mut().zip(out.row(r)) {
                            *o -= lp.exp() * total;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    epsilon,
                    probs,
                } => {
                    let gl =
                        kernels::cross_entropy_ls_backward(probs, targets, *epsilon, g.get(0, 0));
                    acc(&mut grads, *logits, gl);
                }
                Op::SumAll(x) => {
                    let xv = self.value(*x);
                    acc(
                        &mut grads,
                        *x,
                        Matrix::filled(xv.rows(), xv.cols(), g.get(0, 0)),
                    );
                }
            }
        }
    }
}

fn elementwise(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape")
}
