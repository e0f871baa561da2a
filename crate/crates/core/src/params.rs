//! Named parameter storage and binding onto a tape.

use std::collections::HashMap;

use movad_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Dense weight `[out, in]`, uniform in `±1/sqrt(in)`.
    Linear,
    /// LSTM input or recurrent matrix `[4 * hidden, in]`, semi-orthogonal.
    Recurrent,
    /// Additive bias, zero.
    Bias,
    /// Normalization scale, one.
    NormScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    kinds: Vec<ParamKind>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter holding its deterministic default value
    /// (zeros, or ones for normalization scales).
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let init = if kind == ParamKind::NormScale { 1.0 } else { 0.0 };
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.kinds.push(kind);
        self.tensors.push(Tensor::full(shape.to_vec(), init));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), String> {
        let current = &self.tensors[id.0];
        if current.shape() != value.shape() {
            return Err(format!(
                "{}: shape {:?} does not match {:?}",
                self.names[id.0],
                value.shape(),
                current.shape()
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Places every parameter on `tape`, as gradient leaves if `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Draws fresh values: uniform fan-in bounded dense weights,
    /// semi-orthogonal recurrent matrices, zero biases, unit norm scales.
    pub fn initialize(&mut self, rng: &mut impl Rng) {
        for i in 0..self.tensors.len() {
            let shape = self.tensors[i].shape().to_vec();
            self.tensors[i] = match self.kinds[i] {
                ParamKind::Linear => {
                    let bound = 1.0 / (shape[1] as f64).sqrt();
                    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
                }
                ParamKind::Recurrent => semi_orthogonal(shape[0], shape[1], rng),
                ParamKind::Bias => Tensor::zeros(shape),
                ParamKind::NormScale => Tensor::full(shape, 1.0),
            };
        }
    }
}

/// `[rows, cols]` matrix whose smaller side is orthonormal
/// (`MᵀM = I` when `rows >= cols`, `MMᵀ = I` otherwise).
pub fn semi_orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let gaussian = nalgebra::DMatrix::<f64>::from_fn(tall, short, |_, _| StandardNormal.sample(rng));
    let qr = gaussian.qr();
    let mut q = qr.q();
    // Sign-correct so the factorization is unique (diag(R) > 0).
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows >= cols { q } else { q.transpose() };
    Tensor::from_fn([rows, cols], |i| m[(i / cols, i % cols)])
}

/// Parameters of one [`ParamStore`] placed on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}
