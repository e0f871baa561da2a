//! Long-term memory head: normalization, projection and dropout around a
//! stacked LSTM whose state is carried from frame to frame.

use movad_tensor::{Tape, Tensor, Var};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::HeadConfig;
use crate::error::{Error, Result};
use crate::nn::{dropout, LayerNorm, Linear, LstmCell};
use crate::params::{Bound, ParamStore};

pub const STATE_FORMAT_VERSION: u32 = 1;

/// `(h, c)` of every LSTM cell, each `[B, D_lstm]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub layers: Vec<(Tensor, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct StateRecord {
    version: u32,
    cells: usize,
    batch: usize,
    width: usize,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    h: Vec<f64>,
    c: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(batch: usize, cfg: &HeadConfig) -> Self {
        let pair = || (Tensor::zeros([batch, cfg.lstm_width]), Tensor::zeros([batch, cfg.lstm_width]));
        Self {
            layers: (0..cfg.lstm_cells).map(|_| pair()).collect(),
        }
    }

    pub fn cells(&self) -> usize {
        self.layers.len()
    }

    pub fn batch(&self) -> Option<usize> {
        self.layers.first().map(|(h, _)| h.shape()[0])
    }

    /// Checks the state against `cfg` and, when given, a batch size.
    pub fn validate(&self, cfg: &HeadConfig, batch: Option<usize>) -> Result<()> {
        if self.layers.len() != cfg.lstm_cells {
            return Err(Error::Dimension(format!(
                "state has {} cells, head has {}",
                self.layers.len(),
                cfg.lstm_cells
            )));
        }
        let b = batch.or(self.batch()).unwrap_or(0);
        for (i, (h, c)) in self.layers.iter().enumerate() {
            for (name, t) in [("h", h), ("c", c)] {
                if t.shape() != [b, cfg.lstm_width] {
                    return Err(Error::Dimension(format!(
                        "state cell {i} {name} has shape {:?}, expected [{b}, {}]",
                        t.shape(),
                        cfg.lstm_width
                    )));
                }
                if !t.is_finite() {
                    return Err(Error::NonFinite(format!("state cell {i} {name}")));
                }
            }
        }
        Ok(())
    }

    pub fn max_abs_hidden(&self) -> f64 {
        self.layers.iter().map(|(h, _)| h.max_abs()).fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        let (batch, width) = self
            .layers
            .first()
            .map(|(h, _)| (h.shape()[0], h.shape()[1]))
            .unwrap_or((0, 0));
        let record = StateRecord {
            version: STATE_FORMAT_VERSION,
            cells: self.layers.len(),
            batch,
            width,
            layers: self
                .layers
                .iter()
                .map(|(h, c)| LayerRecord {
                    h: h.data().to_vec(),
                    c: c.data().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&record)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: StateRecord = serde_json::from_str(text)?;
        if record.version != STATE_FORMAT_VERSION {
            return Err(Error::Version {
                found: record.version,
                expected: STATE_FORMAT_VERSION,
            });
        }
        if record.layers.len() != record.cells {
            return Err(Error::Serde(format!(
                "state lists {} cells but holds {}",
                record.cells,
                record.layers.len()
            )));
        }
        let shape = [record.batch, record.width];
        let tensor = |v: Vec<f64>| Tensor::new(shape, v).map_err(|e| Error::Serde(e.to_string()));
        let layers = record
            .layers
            .into_iter()
            .map(|l| Ok((tensor(l.h)?, tensor(l.c)?)))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

/// Anomaly probability of one frame, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Score(pub f64);

impl Score {
    pub fn value(self) -> f64 {
        self.0
    }

    pub fn normal(self) -> f64 {
        1.0 - self.0
    }
}

/// Two-class softmax of each `[normal, anomaly]` logit row.
pub fn score(logits: &Tensor) -> Vec<Score> {
    assert_eq!(logits.last_dim(), 2, "score expects [B, 2] logits");
    logits
        .data()
        .chunks_exact(2)
        .map(|row| {
            let (n, a) = (row[0], row[1]);
            let m = n.max(a);
            let (en, ea) = ((n - m).exp(), (a - m).exp());
            Score(ea / (en + ea))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Head {
    cfg: HeadConfig,
    pub norm_in: LayerNorm,
    pub fc_in: Linear,
    pub norm_mid: LayerNorm,
    pub cells: Vec<LstmCell>,
    pub fc_out: Linear,
}

impl Head {
    pub fn new(cfg: &HeadConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let (d, w) = (cfg.input_dim, cfg.lstm_width);
        Ok(Self {
            cfg: cfg.clone(),
            norm_in: LayerNorm::new(store, "head.norm_in", d),
            fc_in: Linear::new(store, "head.fc_in", d, w, true),
            norm_mid: LayerNorm::new(store, "head.norm_mid", w),
            cells: (0..cfg.lstm_cells)
                .map(|i| LstmCell::new(store, &format!("head.lstm.{i}"), w, w))
                .collect(),
            fc_out: Linear::new(store, "head.fc_out", w, cfg.num_classes, true),
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    /// One frame step on the tape. `rng` enables dropout.
    pub fn forward<'t>(
        &self,
        x: Var<'t>,
        state: &[(Var<'t>, Var<'t>)],
        p: &Bound<'t>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> (Var<'t>, Vec<(Var<'t>, Var<'t>)>) {
        assert_eq!(state.len(), self.cells.len(), "state cell count differs from head");
        let rate = self.cfg.dropout;
        let mut apply_dropout = |y| match rng.as_mut() {
            Some(r) => dropout(y, rate, Some(&mut **r)),
            None => y,
        };
        let mut y = self.fc_in.forward(self.norm_in.forward(x, p), p);
        y = apply_dropout(y);
        y = self.norm_mid.forward(y, p);
        let mut next = Vec::with_capacity(state.len());
        for (cell, &(h, c)) in self.cells.iter().zip(state) {
            let (h, c) = cell.step(y, h, c, p);
            next.push((h, c));
            y = h;
        }
        y = apply_dropout(y);
        (self.fc_out.forward(y, p), next)
    }

    /// One inference step on plain tensors: `[B, D]` features to `[B, 2]`
    /// logits and the advanced state.
    pub fn head_forward(
        &self,
        x: &Tensor,
        state: &RecurrentState,
        store: &ParamStore,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<(Tensor, RecurrentState)> {
        if x.shape().len() != 2 || x.shape()[1] != self.cfg.input_dim {
            return Err(Error::Dimension(format!(
                "head input {:?} does not have width {}",
                x.shape(),
                self.cfg.input_dim
            )));
        }
        state.validate(&self.cfg, Some(x.shape()[0]))?;
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let vars: Vec<_> = state
            .layers
            .iter()
            .map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone())))
            .collect();
        let (logits, next) = self.forward(tape.constant(x.clone()), &vars, &p, rng);
        let state = RecurrentState {
            layers: next.into_iter().map(|(h, c)| (h.value(), c.value())).collect(),
        };
        Ok((logits.value(), state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(cells: usize) -> HeadConfig {
        HeadConfig {
            input_dim: 6,
            lstm_cells: cells,
            lstm_width: 4,
            dropout: 0.3,
            num_classes: 2,
        }
    }

    fn build(cells: usize, seed: u64) -> (Head, ParamStore) {
        let mut store = ParamStore::new();
        let head = Head::new(&cfg(cells), &mut store).unwrap();
        store.initialize(&mut ChaCha8Rng::seed_from_u64(seed));
        (head, store)
    }

    #[test]
    fn zero_state_shapes() {
        let big = HeadConfig {
            input_dim: 1024,
            lstm_cells: 3,
            lstm_width: 1024,
            ..HeadConfig::full()
        };
        let s = RecurrentState::zeros(8, &big);
        assert_eq!(s.cells(), 3);
        assert!(s.layers.iter().all(|(h, c)| h.shape() == [8, 1024] && c.shape() == [8, 1024]));
        assert!(s.layers.iter().all(|(h, c)| h.max_abs() == 0.0 && c.max_abs() == 0.0));
        assert!(RecurrentState::zeros(1, &cfg(0)).layers.is_empty());
        let one = RecurrentState::zeros(1, &cfg(1));
        assert_eq!(one.layers[0].0.shape(), &[1, 4]);
    }

    #[test]
    fn stateless_head_ignores_history() {
        let (head, store) = build(0, 1);
        let x = Tensor::from_fn([1, 6], |i| i as f64 * 0.1);
        let s = RecurrentState::zeros(1, &cfg(0));
        let (a, _) = head.head_forward(&x, &s, &store, None).unwrap();
        let (b, _) = head.head_forward(&x, &s, &store, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_input_gives_output_bias() {
        let (head, mut store) = build(1, 2);
        for id in [head.norm_in.bias, head.norm_mid.bias] {
            assert!(store.get(id).data().iter().all(|&v| v == 0.0));
        }
        store.set(head.fc_out.bias.unwrap(), Tensor::new([2], vec![0.25, -0.5]).unwrap()).unwrap();
        let (logits, state) = head
            .head_forward(&Tensor::zeros([1, 6]), &RecurrentState::zeros(1, &cfg(1)), &store, None)
            .unwrap();
        assert_eq!(state.layers[0].0.max_abs(), 0.0);
        assert_eq!(logits.data(), &[0.25, -0.5]);
    }

    #[test]
    fn hidden_stays_bounded() {
        let (head, store) = build(2, 3);
        let x = Tensor::from_fn([2, 6], |i| (i as f64 - 5.0) * 3.0);
        let mut s = RecurrentState::zeros(2, &cfg(2));
        for _ in 0..50 {
            s = head.head_forward(&x, &s, &store, None).unwrap().1;
            assert!(s.max_abs_hidden() <= 1.0);
        }
    }

    #[test]
    fn state_mismatch_is_rejected() {
        let (head, store) = build(2, 3);
        let x = Tensor::zeros([1, 6]);
        assert!(head.head_forward(&x, &RecurrentState::zeros(1, &cfg(1)), &store, None).is_err());
        assert!(head.head_forward(&x, &RecurrentState::zeros(2, &cfg(2)), &store, None).is_err());
        assert!(head.head_forward(&Tensor::zeros([1, 5]), &RecurrentState::zeros(1, &cfg(2)), &store, None).is_err());
    }

    #[test]
    fn dropout_only_in_training() {
        let (head, store) = build(1, 4);
        let x = Tensor::from_fn([1, 6], |i| i as f64);
        let s = RecurrentState::zeros(1, &cfg(1));
        let (eval, _) = head.head_forward(&x, &s, &store, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let differs = (0..20).any(|_| head.head_forward(&x, &s, &store, Some(&mut rng)).unwrap().0 != eval);
        assert!(differs);
    }

    #[test]
    fn state_json_round_trip() {
        let (head, store) = build(2, 5);
        let x = Tensor::from_fn([3, 6], |i| i as f64 * 0.3);
        let (_, s) = head.head_forward(&x, &RecurrentState::zeros(3, &cfg(2)), &store, None).unwrap();
        let back = RecurrentState::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        let bumped = s.to_json().unwrap().replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(RecurrentState::from_json(&bumped), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn score_closed_form() {
        assert_eq!(score(&Tensor::new([1, 2], vec![0.0, 0.0]).unwrap())[0].value(), 0.5);
        assert!(score(&Tensor::new([1, 2], vec![-20.0, 20.0]).unwrap())[0].value() >= 0.9999);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::from_fn([200, 2], |_| rng.gen_range(-15.0..15.0));
        for (s, row) in score(&logits).iter().zip(logits.data().chunks(2)) {
            let oracle = 1.0 / (1.0 + (row[0] - row[1]).exp());
            assert!((s.value() - oracle).abs() < 1e-9);
            assert!(s.value() > 0.0 && s.value() < 1.0);
            assert!((s.value() + s.normal() - 1.0).abs() < 1e-15);
        }
    }
}
