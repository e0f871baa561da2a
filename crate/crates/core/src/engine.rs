//! Per-video streaming sessions: one score per pushed frame.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use movad_tensor::Tensor;

use crate::config::ModelConfig;
use crate::data::Frame;
use crate::error::{Error, Result};
use crate::head::{score, RecurrentState, Score};
use crate::model::Movad;

static NEXT_SESSION: AtomicU64 = AtomicU64::new(0);

/// Streaming state of one video. Sessions share the model read-only and own
/// their frame ring and recurrent state.
#[derive(Debug, Clone)]
pub struct Session {
    id: u64,
    model: Arc<Movad>,
    config: ModelConfig,
    ring: VecDeque<Vec<f64>>,
    state: RecurrentState,
    frames_seen: u64,
}

impl Session {
    /// Opens a session for `model`, checking that it was built from `config`.
    pub fn open(model: Arc<Movad>, config: &ModelConfig) -> Result<Self> {
        if model.config() != config {
            return Err(Error::Config(
                "session configuration does not match the loaded model".into(),
            ));
        }
        let state = model.zero_state(1);
        Ok(Self {
            id: NEXT_SESSION.fetch_add(1, Ordering::Relaxed),
            config: config.clone(),
            ring: VecDeque::with_capacity(config.stmm.nf),
            state,
            frames_seen: 0,
            model,
        })
    }

    /// Opens a session with the model's own configuration.
    pub fn for_model(model: Arc<Movad>) -> Self {
        let config = model.config().clone();
        Self::open(model, &config).expect("model configuration")
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    pub fn ring_len(&self) -> usize {
        self.ring.len()
    }

    pub fn state(&self) -> &RecurrentState {
        &self.state
    }

    /// Replaces the recurrent state, e.g. to resume from a snapshot.
    pub fn set_state(&mut self, state: RecurrentState) -> Result<()> {
        state.validate(&self.config.head, Some(1))?;
        self.state = state;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.ring.clear();
        self.state = self.model.zero_state(1);
        self.frames_seen = 0;
    }

    /// Resizes and standardizes a raw frame into the ring format.
    fn prepare(&self, frame: &Frame) -> Vec<f64> {
        let (h, w) = (self.config.stmm.input_h, self.config.stmm.input_w);
        let mut pixels = frame.resized(h, w).pixels().to_vec();
        self.model.standardize(&mut pixels);
        pixels
    }

    /// The current clip, front padded with the oldest frame in the ring.
    fn clip(&self) -> Tensor {
        let nf = self.config.stmm.nf;
        let missing = nf - self.ring.len();
        let frame_len = self.ring[0].len();
        let mut data = Vec::with_capacity(nf * frame_len);
        for _ in 0..missing {
            data.extend_from_slice(&self.ring[0]);
        }
        for f in &self.ring {
            data.extend_from_slice(f);
        }
        let [h, w, _] = self.model.frame_shape();
        Tensor::new([1, nf, h, w, 3], data).expect("clip size")
    }

    /// Scores the newest frame and advances the state by one step.
    pub fn push_frame(&mut self, frame: &Frame) -> Result<Score> {
        let pixels = self.prepare(frame);
        if self.ring.len() == self.config.stmm.nf {
            self.ring.pop_front();
        }
        self.ring.push_back(pixels);
        let features = self.model.features_eval(&self.clip())?;
        let (logits, state) = self.model.head_step(&features, &self.state)?;
        self.state = state;
        self.frames_seen += 1;
        Ok(score(&logits)[0])
    }

    /// Validates and pushes a raw `[H, W, 3]` tensor.
    pub fn push_tensor(&mut self, pixels: Tensor) -> Result<Score> {
        self.push_frame(&Frame::new(pixels)?)
    }
}

/// Scores every frame of a video through a fresh session.
pub fn score_video(model: &Arc<Movad>, frames: &[Frame]) -> Result<Vec<f64>> {
    let mut session = Session::for_model(model.clone());
    frames.iter().map(|f| session.push_frame(f).map(Score::value)).collect()
}
