//! Forward evaluation of every differentiable operation.
//!
//! Shape misuse is a programming error and panics with a message naming the
//! operation; validation of external input happens before values reach a tape.

use std::sync::Arc;

use crate::gemm::{gemm, Layout};
use crate::tape::{std_normal_cdf, Op, Tape, Var};
use crate::tensor::Tensor;

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(std::ptr::eq(a.tape, b.tape), "operands recorded on different tapes");
}

/// Maps each output element of a permutation to its source offset.
fn permute_map(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let nd = shape.len();
    assert_eq!(perm.len(), nd, "permute: axis count mismatch");
    let mut seen = vec![false; nd];
    for &p in perm {
        assert!(p < nd && !seen[p], "permute: {perm:?} is not a permutation");
        seen[p] = true;
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            coord[d] += 1;
            off += strides[d];
            if coord[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            coord[d] = 0;
        }
    }
    (out_shape, map)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let needs = inputs.iter().any(|&i| self.tape.needs_grad(i));
        self.tape.push(value, op, needs)
    }

    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Var<'t> {
        same_tape(&self, &w);
        let x = self.value();
        let wv = w.value();
        assert_eq!(wv.shape().len(), 2, "linear: weight must be 2-D");
        let (n, k) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(x.last_dim(), k, "linear: input width {} != weight fan-in {k}", x.last_dim());
        let r = x.numel() / k;
        let mut out = vec![0.0; r * n];
        gemm(r, k, n, x.data(), Layout::row_major(k, false), wv.data(), Layout::row_major(k, true), &mut out, n, 0.0);
        let mut inputs = vec![self.id, w.id];
        if let Some(b) = b {
            same_tape(&self, &b);
            let bv = b.value();
            assert_eq!(bv.numel(), n, "linear: bias width mismatch");
            for row in out.chunks_exact_mut(n) {
                for (o, bi) in row.iter_mut().zip(bv.data()) {
                    *o += bi;
                }
            }
            inputs.push(b.id);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("linear: scalar input") = n;
        self.push(
            Tensor::from_parts(shape, out),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            &inputs,
        )
    }

    /// Batched product `op(self) · op(other)` of `[G, ., .]` tensors, where
    /// `op` transposes the two trailing axes when the matching flag is set.
    pub fn bmm(self, other: Var<'t>, trans_a: bool, trans_b: bool) -> Var<'t> {
        same_tape(&self, &other);
        let a = self.value();
        let b = other.value();
        assert!(a.shape().len() == 3 && b.shape().len() == 3, "bmm: operands must be 3-D");
        let groups = a.shape()[0];
        assert_eq!(groups, b.shape()[0], "bmm: group count mismatch");
        let (m, k) = if trans_a {
            (a.shape()[2], a.shape()[1])
        } else {
            (a.shape()[1], a.shape()[2])
        };
        let (kb, n) = if trans_b {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        assert_eq!(k, kb, "bmm: inner dimension mismatch");
        let (a_sz, b_sz, c_sz) = (m * k, k * n, m * n);
        let mut out = vec![0.0; groups * c_sz];
        for g in 0..groups {
            gemm(
                m,
                k,
                n,
                &a.data()[g * a_sz..(g + 1) * a_sz],
                Layout::row_major(a.shape()[2], trans_a),
                &b.data()[g * b_sz..(g + 1) * b_sz],
                Layout::row_major(b.shape()[2], trans_b),
                &mut out[g * c_sz..(g + 1) * c_sz],
                n,
                0.0,
            );
        }
        self.push(
            Tensor::from_parts(vec![groups, m, n], out),
            Op::Bmm {
                a: self.id,
                b: other.id,
                ta: trans_a,
                tb: trans_b,
            },
            &[self.id, other.id],
        )
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        same_tape(&self, &other);
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.push(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::Add(self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        same_tape(&self, &other);
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "mul: shape mismatch");
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.push(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::Mul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// Adds `other` to every consecutive block of `other.numel()` elements.
    pub fn add_broadcast(self, other: Var<'t>) -> Var<'t> {
        same_tape(&self, &other);
        let a = self.value();
        let b = other.value();
        let s = b.numel();
        assert!(s > 0 && a.numel().is_multiple_of(s), "add_broadcast: {} not a multiple of {s}", a.numel());
        let mut out = a.data().to_vec();
        for chunk in out.chunks_exact_mut(s) {
            for (o, bi) in chunk.iter_mut().zip(b.data()) {
                *o += bi;
            }
        }
        self.push(
            Tensor::from_parts(a.shape().to_vec(), out),
            Op::AddBcast { a: self.id, b: other.id },
            &[self.id, other.id],
        )
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let a = self.value();
        let out = a.data().iter().map(|x| x * s).collect();
        self.push(Tensor::from_parts(a.shape().to_vec(), out), Op::Scale(self.id, s), &[self.id])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let shape = shape.into();
        let v = self
            .value()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.push(v, Op::Reshape(self.id), &[self.id])
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Var<'t> {
        let a = self.value();
        let (shape, map) = permute_map(a.shape(), perm);
        let src = a.data();
        let out = map.iter().map(|&i| src[i]).collect();
        self.push(Tensor::from_parts(shape, out), Op::Permute { a: self.id, map }, &[self.id])
    }

    /// Views `self` as rows of width `cols` and picks `index[r]` for output
    /// row `r`; `None` produces a zero row.
    pub fn gather_rows(self, cols: usize, index: Arc<[Option<usize>]>) -> Var<'t> {
        let a = self.value();
        assert!(cols > 0 && a.numel().is_multiple_of(cols), "gather_rows: width {cols} does not divide input");
        let rows = a.numel() / cols;
        let mut out = vec![0.0; index.len() * cols];
        for (dst, src) in out.chunks_exact_mut(cols).zip(index.iter()) {
            if let Some(src) = *src {
                assert!(src < rows, "gather_rows: row {src} out of range {rows}");
                dst.copy_from_slice(&a.data()[src * cols..(src + 1) * cols]);
            }
        }
        self.push(
            Tensor::from_parts(vec![index.len(), cols], out),
            Op::GatherRows { a: self.id, cols, index },
            &[self.id],
        )
    }

    /// Slice `start..start + len` of axis `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let a = self.value();
        let shape = a.shape();
        assert!(axis < shape.len(), "narrow: axis out of range");
        let dim = shape[axis];
        assert!(start + len <= dim, "narrow: {start}+{len} exceeds {dim}");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let block = len * inner;
        let mut out = Vec::with_capacity(outer * block);
        for o in 0..outer {
            let off = o * dim * inner + start * inner;
            out.extend_from_slice(&a.data()[off..off + block]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::Narrow {
                a: self.id,
                outer,
                dim,
                inner,
                start,
                len,
            },
            &[self.id],
        )
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(self) -> Var<'t> {
        let a = self.value();
        let d = a.last_dim();
        let mut out = a.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(Tensor::from_parts(a.shape().to_vec(), out), Op::Softmax(self.id), &[self.id])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the elementwise affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        same_tape(&self, &gamma);
        same_tape(&self, &beta);
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let d = x.last_dim();
        assert!(gv.numel() == d && bv.numel() == d, "layer_norm: affine width mismatch");
        let rows = x.numel() / d;
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; x.numel()];
        for ((xr, hr), or) in x
            .data()
            .chunks_exact(d)
            .zip(xhat.chunks_exact_mut(d))
            .zip(out.chunks_exact_mut(d))
        {
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for i in 0..d {
                hr[i] = (xr[i] - mean) * rs;
                or[i] = hr[i] * gv.data()[i] + bv.data()[i];
            }
            rstd.push(rs);
        }
        self.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Var<'t> {
        let a = self.value();
        let out = a.data().iter().map(|&x| x * std_normal_cdf(x)).collect();
        self.push(Tensor::from_parts(a.shape().to_vec(), out), Op::Gelu(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Var<'t> {
        let a = self.value();
        let out = a
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        self.push(Tensor::from_parts(a.shape().to_vec(), out), Op::Sigmoid(self.id), &[self.id])
    }

    pub fn tanh(self) -> Var<'t> {
        let a = self.value();
        let out = a.data().iter().map(|x| x.tanh()).collect();
        self.push(Tensor::from_parts(a.shape().to_vec(), out), Op::Tanh(self.id), &[self.id])
    }

    /// Mean over axis `axis`, which is removed from the shape.
    pub fn mean_dim(self, axis: usize) -> Var<'t> {
        let a = self.value();
        let shape = a.shape();
        assert!(axis < shape.len(), "mean_dim: axis out of range");
        let mid = shape[axis];
        assert!(mid > 0, "mean_dim: empty axis");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for m in 0..mid {
                let off = (o * mid + m) * inner;
                for (d, s) in dst.iter_mut().zip(&a.data()[off..off + inner]) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d /= mid as f64;
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(
            Tensor::from_parts(out_shape, out),
            Op::MeanDim {
                a: self.id,
                outer,
                mid,
                inner,
            },
            &[self.id],
        )
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(self.id), &[self.id])
    }

    /// Mean over rows of `weights[y] * -log softmax(logits)[y]`.
    pub fn weighted_cross_entropy(self, labels: &[usize], weights: &[f64]) -> Var<'t> {
        let logits = self.value();
        let k = logits.last_dim();
        let n = logits.numel() / k;
        assert_eq!(labels.len(), n, "weighted_cross_entropy: {} labels for {n} rows", labels.len());
        assert_eq!(weights.len(), k, "weighted_cross_entropy: one weight per class");
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for (i, (row, &y)) in logits.data().chunks_exact(k).zip(labels).enumerate() {
            assert!(y < k, "weighted_cross_entropy: label {y} out of range");
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for c in 0..k {
                probs[i * k + c] = (row[c] - lse).exp();
            }
            total += weights[y] * (lse - row[y]);
        }
        let loss = total / n as f64;
        self.push(
            Tensor::scalar(loss),
            Op::WeightedCe {
                logits: self.id,
                labels: labels.into(),
                weights: weights.into(),
                probs,
            },
            &[self.id],
        )
    }
}

/// Concatenates along the first axis; trailing axes must agree.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_rows: nothing to concatenate");
    let first = parts[0].value();
    let tail = first.shape()[1..].to_vec();
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        same_tape(&parts[0], p);
        let v = p.value();
        assert_eq!(&v.shape()[1..], &tail[..], "concat_rows: trailing shape mismatch");
        rows += v.shape()[0];
        out.extend_from_slice(v.data());
    }
    let mut shape = vec![rows];
    shape.extend(tail);
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    parts[0].push(Tensor::from_parts(shape, out), Op::ConcatRows(ids.clone()), &ids)
}
