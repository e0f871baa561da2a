//! Backbone and head assembled into one detector over a shared parameter store.

use movad_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::head::{Head, RecurrentState};
use crate::params::{Bound, ParamStore};
use crate::stmm::Stmm;

/// Source positions of the `nf` frames that form the clip ending at `t`,
/// oldest first. Positions before the first frame repeat frame 0.
pub fn clip_indices(t: usize, nf: usize) -> impl Iterator<Item = usize> {
    (0..nf).map(move |j| (t + j + 1).saturating_sub(nf))
}

#[derive(Debug, Clone)]
pub struct Movad {
    config: ModelConfig,
    pub params: ParamStore,
    pub stmm: Stmm,
    pub head: Head,
}

impl Movad {
    /// Builds the network with deterministic placeholder values; call
    /// [`Movad::init_params`] before training.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let stmm = Stmm::new(&config.stmm, &mut params)?;
        let head = Head::new(&config.head, &mut params)?;
        Ok(Self {
            config: config.clone(),
            params,
            stmm,
            head,
        })
    }

    pub fn init_params(&mut self, rng: &mut impl Rng) {
        self.params.initialize(rng);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn nf(&self) -> usize {
        self.config.stmm.nf
    }

    pub fn frame_shape(&self) -> [usize; 3] {
        [self.config.stmm.input_h, self.config.stmm.input_w, 3]
    }

    /// Standardizes raw `[0, 1]` pixels in place with the configured constants.
    pub fn standardize(&self, pixels: &mut [f64]) {
        let (mean, std) = (self.config.stmm.pixel_mean, self.config.stmm.pixel_std);
        for px in pixels.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = (px[c] - mean[c]) / std[c];
            }
        }
    }

    /// `[N, NF, H, W, 3]` standardized clips to `[N, D]` features.
    pub fn features<'t>(&self, clips: Var<'t>, p: &Bound<'t>) -> Var<'t> {
        self.stmm.forward_pooled(clips, p)
    }

    /// Features of standardized clips without building gradients.
    pub fn features_eval(&self, clips: &Tensor) -> Result<Tensor> {
        let s = clips.shape();
        let want = [self.nf(), self.config.stmm.input_h, self.config.stmm.input_w, 3];
        if s.len() != 5 || s[1..] != want {
            return Err(Error::Dimension(format!("clips {s:?} do not match [N, {want:?}]")));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(self.features(tape.constant(clips.clone()), &p).value())
    }

    /// One head step without gradients or dropout.
    pub fn head_step(&self, features: &Tensor, state: &RecurrentState) -> Result<(Tensor, RecurrentState)> {
        self.head.head_forward(features, state, &self.params, None)
    }

    pub fn zero_state(&self, batch: usize) -> RecurrentState {
        RecurrentState::zeros(batch, &self.config.head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_indices_replicate_the_first_frame() {
        assert_eq!(clip_indices(0, 4).collect::<Vec<_>>(), [0, 0, 0, 0]);
        assert_eq!(clip_indices(2, 4).collect::<Vec<_>>(), [0, 0, 1, 2]);
        assert_eq!(clip_indices(7, 3).collect::<Vec<_>>(), [5, 6, 7]);
        assert_eq!(clip_indices(5, 1).collect::<Vec<_>>(), [5]);
    }

    #[test]
    fn toy_model_builds() {
        let m = Movad::new(&ModelConfig::toy()).unwrap();
        assert!(m.params.total_elements() > 0);
        assert_eq!(m.stmm.feature_dim(), m.config().head.input_dim);
    }
}
