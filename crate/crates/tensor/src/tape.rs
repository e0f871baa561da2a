//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. Node ids are assigned in evaluation order, so walking the tape
//! backwards from the loss is a valid reverse topological order.

use std::cell::RefCell;
use std::sync::Arc;

use crate::gemm::{gemm, Layout};
use crate::tensor::Tensor;

pub(crate) enum Op {
    Leaf,
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Bmm {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Add(usize, usize),
    Mul(usize, usize),
    AddBcast {
        a: usize,
        b: usize,
    },
    Scale(usize, f64),
    Reshape(usize),
    Permute {
        a: usize,
        map: Vec<usize>,
    },
    GatherRows {
        a: usize,
        cols: usize,
        index: Arc<[Option<usize>]>,
    },
    Narrow {
        a: usize,
        outer: usize,
        dim: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<usize>),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    MeanDim {
        a: usize,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    SumAll(usize),
    WeightedCe {
        logits: usize,
        labels: Arc<[usize]>,
        weights: Arc<[f64]>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input that gradients are accumulated for.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that is treated as a constant during backpropagation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Backpropagates from a single-element `root`, returning gradients for
    /// every leaf created with [`Tape::leaf`].
    pub fn backward(&self, root: Var<'_>) -> Grads {
        assert!(std::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.numel(),
            1,
            "backward root must hold a single element"
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.id].needs_grad {
            grads[root.id] = Some(vec![1.0]);
        }
        let mut leaves: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            backprop(&nodes, &mut grads, node, &g);
            if matches!(node.op, Op::Leaf) {
                leaves[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        Grads { leaves }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Grads {
    leaves: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(var.id).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::Linear { x, w, b } => {
            let xv = val(*x);
            let wv = val(*w);
            let k = xv.last_dim();
            let n = wv.shape()[0];
            let r = xv.numel() / k;
            if let Some(dx) = slot(nodes, grads, *x) {
                gemm(r, n, k, g, Layout::row_major(n, false), wv.data(), Layout::row_major(k, false), dx, k, 1.0);
            }
            if let Some(dw) = slot(nodes, grads, *w) {
                gemm(n, r, k, g, Layout::row_major(n, true), xv.data(), Layout::row_major(k, false), dw, k, 1.0);
            }
            if let Some(b) = b {
                if let Some(db) = slot(nodes, grads, *b) {
                    for row in g.chunks_exact(n) {
                        add_into(db, row);
                    }
                }
            }
        }
        Op::Bmm { a, b, ta, tb } => {
            let (ta, tb) = (*ta, *tb);
            let av = val(*a);
            let bv = val(*b);
            let out = node.value.shape();
            let (groups, m, n) = (out[0], out[1], out[2]);
            let k = if ta { av.shape()[1] } else { av.shape()[2] };
            let a_cols = av.shape()[2];
            let b_cols = bv.shape()[2];
            let (a_sz, b_sz, g_sz) = (m * k, k * n, m * n);
            if let Some(da) = slot(nodes, grads, *a) {
                for gi in 0..groups {
                    let gg = &g[gi * g_sz..(gi + 1) * g_sz];
                    let bg = &bv.data()[gi * b_sz..(gi + 1) * b_sz];
                    let dag = &mut da[gi * a_sz..(gi + 1) * a_sz];
                    if !ta {
                        // dA = G · op(B)^T
                        gemm(m, n, k, gg, Layout::row_major(n, false), bg, Layout::row_major(b_cols, !tb), dag, k, 1.0);
                    } else {
                        // stored A^T: dA^T = op(B) · G^T
                        gemm(k, n, m, bg, Layout::row_major(b_cols, tb), gg, Layout::row_major(n, true), dag, m, 1.0);
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for gi in 0..groups {
                    let gg = &g[gi * g_sz..(gi + 1) * g_sz];
                    let ag = &av.data()[gi * a_sz..(gi + 1) * a_sz];
                    let dbg = &mut db[gi * b_sz..(gi + 1) * b_sz];
                    if !tb {
                        // dB = op(A)^T · G
                        gemm(k, m, n, ag, Layout::row_major(a_cols, !ta), gg, Layout::row_major(n, false), dbg, n, 1.0);
                    } else {
                        // stored B^T: dB^T = G^T · op(A)
                        gemm(n, m, k, gg, Layout::row_major(n, true), ag, Layout::row_major(a_cols, ta), dbg, k, 1.0);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                add_into(db, g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv.data()) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av.data()) {
                    *d += gi * ai;
                }
            }
        }
        Op::AddBcast { a, b } => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
            let s = val(*b).numel();
            if let Some(db) = slot(nodes, grads, *b) {
                for chunk in g.chunks_exact(s) {
                    add_into(db, chunk);
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += s * gi;
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                add_into(da, g);
            }
        }
        Op::Permute { a, map } => {
            if let Some(da) = slot(nodes, grads, *a) {
                for (gi, &src) in g.iter().zip(map) {
                    da[src] += gi;
                }
            }
        }
        Op::GatherRows { a, cols, index } => {
            let cols = *cols;
            if let Some(da) = slot(nodes, grads, *a) {
                for (row, src) in g.chunks_exact(cols).zip(index.iter()) {
                    if let Some(src) = src {
                        add_into(&mut da[src * cols..(src + 1) * cols], row);
                    }
                }
            }
        }
        Op::Narrow {
            a,
            outer,
            dim,
            inner,
            start,
            len,
        } => {
            if let Some(da) = slot(nodes, grads, *a) {
                let block = len * inner;
                for o in 0..*outer {
                    let src = &g[o * block..(o + 1) * block];
                    let off = o * dim * inner + start * inner;
                    add_into(&mut da[off..off + block], src);
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).numel();
                if let Some(dp) = slot(nodes, grads, p) {
                    add_into(dp, &g[off..off + n]);
                }
                off += n;
            }
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let d = node.value.last_dim();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((yr, gr), dr) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(da.chunks_exact_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma).clone();
            let d = gv.numel();
            if let Some(dg) = slot(nodes, grads, *gamma) {
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for ((dgv, gi), xi) in dg.iter_mut().zip(gr).zip(xr) {
                        *dgv += gi * xi;
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *beta) {
                for gr in g.chunks_exact(d) {
                    add_into(db, gr);
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let gamma = gv.data();
                let inv_d = 1.0 / d as f64;
                let mut scaled = vec![0.0; d];
                for (((gr, xr), dr), rs) in g
                    .chunks_exact(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(dx.chunks_exact_mut(d))
                    .zip(rstd)
                {
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for i in 0..d {
                        scaled[i] = gr[i] * gamma[i];
                        mean_g += scaled[i];
                        mean_gx += scaled[i] * xr[i];
                    }
                    mean_g *= inv_d;
                    mean_gx *= inv_d;
                    for i in 0..d {
                        dr[i] += rs * (scaled[i] - mean_g - xr[i] * mean_gx);
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let xv = val(*a).clone();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), x) in da.iter_mut().zip(g).zip(xv.data()) {
                    *d += gi * (std_normal_cdf(*x) + x * std_normal_pdf(*x));
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - y * y);
                }
            }
        }
        Op::MeanDim { a, outer, mid, inner } => {
            if let Some(da) = slot(nodes, grads, *a) {
                let inv = 1.0 / *mid as f64;
                for o in 0..*outer {
                    let gr = &g[o * inner..(o + 1) * inner];
                    for m in 0..*mid {
                        let off = (o * mid + m) * inner;
                        for (d, gi) in da[off..off + inner].iter_mut().zip(gr) {
                            *d += gi * inv;
                        }
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::WeightedCe {
            logits,
            labels,
            weights,
            probs,
        } => {
            let k = val(*logits).last_dim();
            let n = labels.len();
            if let Some(dl) = slot(nodes, grads, *logits) {
                for (i, &y) in labels.iter().enumerate() {
                    let coef = g[0] * weights[y] / n as f64;
                    for c in 0..k {
                        let target = if c == y { 1.0 } else { 0.0 };
                        dl[i * k + c] += coef * (probs[i * k + c] - target);
                    }
                }
            }
        }
    }
}
