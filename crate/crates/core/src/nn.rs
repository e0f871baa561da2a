//! Layers shared by the backbone and the head.

use movad_tensor::{Tensor, Var};
use rand::Rng;

use crate::params::{Bound, ParamId, ParamKind, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let weight = store.add(format!("{name}.weight"), &[out_dim, in_dim], ParamKind::Linear);
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_dim], ParamKind::Bias));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Var<'t> {
        x.linear(p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), &[dim], ParamKind::NormScale),
            bias: store.add(format!("{name}.bias"), &[dim], ParamKind::Bias),
        }
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Var<'t> {
        x.layer_norm(p.var(self.weight), p.var(self.bias), LAYER_NORM_EPS)
    }
}

/// Inverted dropout: keeps each element with probability `1 - rate` and
/// rescales survivors. Identity when `rng` is `None` or `rate` is zero.
pub fn dropout<'t>(x: Var<'t>, rate: f64, rng: Option<&mut dyn rand::RngCore>) -> Var<'t> {
    let Some(rng) = rng else {
        return x;
    };
    if rate == 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let mask = Tensor::from_fn(x.shape(), |_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
    x.mul(x.tape().constant(mask))
}

/// Single LSTM cell with separate input and recurrent projections, gate
/// order `(i, f, g, o)`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_ih: store.add(format!("{name}.weight_ih"), &[4 * hidden, input], ParamKind::Recurrent),
            w_hh: store.add(format!("{name}.weight_hh"), &[4 * hidden, hidden], ParamKind::Recurrent),
            b_ih: store.add(format!("{name}.bias_ih"), &[4 * hidden], ParamKind::Bias),
            b_hh: store.add(format!("{name}.bias_hh"), &[4 * hidden], ParamKind::Bias),
            input,
            hidden,
        }
    }

    /// One time step; returns `(h', c')`.
    pub fn step<'t>(&self, x: Var<'t>, h: Var<'t>, c: Var<'t>, p: &Bound<'t>) -> (Var<'t>, Var<'t>) {
        let gates = x
            .linear(p.var(self.w_ih), Some(p.var(self.b_ih)))
            .add(h.linear(p.var(self.w_hh), Some(p.var(self.b_hh))));
        let n = self.hidden;
        let i = gates.narrow(1, 0, n).sigmoid();
        let f = gates.narrow(1, n, n).sigmoid();
        let g = gates.narrow(1, 2 * n, n).tanh();
        let o = gates.narrow(1, 3 * n, n).sigmoid();
        let c_next = f.mul(c).add(i.mul(g));
        let h_next = o.mul(c_next.tanh());
        (h_next, c_next)
    }
}
