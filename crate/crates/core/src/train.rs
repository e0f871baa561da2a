//! Weighted cross-entropy training over sampled clip windows with SGD and
//! momentum.

use movad_tensor::{concat_rows, Grads, Tape, Tensor, Var};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::head::RecurrentState;
use crate::model::{clip_indices, Movad};
use crate::params::{Bound, ParamStore};

/// Inverse-frequency class weights `w_i ∝ e / e_i`, normalized to sum to one.
pub fn class_weights(counts: [usize; 2]) -> Result<[f64; 2]> {
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    // For two classes the normalized weights reduce to e_other / e.
    let total = (counts[0] + counts[1]) as f64;
    Ok([counts[1] as f64 / total, counts[0] as f64 / total])
}

/// Mean over rows of `w_y * -log softmax(logits)[y]`.
pub fn weighted_ce(logits: &Tensor, labels: &[u8], weights: [f64; 2]) -> f64 {
    let tape = Tape::new();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    tape.constant(logits.clone())
        .weighted_cross_entropy(&labels, &weights)
        .value()
        .data()[0]
}

/// `B` windows of `VCL` consecutive frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch {
    /// Raw `[0, 1]` pixels, `[B, VCL, H, W, 3]`.
    pub clips: Tensor,
    /// Row-major `[B, VCL]` frame labels.
    pub labels: Vec<u8>,
    pub video_ids: Vec<usize>,
    /// First source frame of each row.
    pub starts: Vec<usize>,
    /// Window position of each row's anchor frame.
    pub anchors: Vec<usize>,
}

impl ClipBatch {
    pub fn batch_size(&self) -> usize {
        self.clips.shape()[0]
    }

    pub fn vcl(&self) -> usize {
        self.clips.shape()[1]
    }
}

/// Draws `batch_size` windows of `vcl` consecutive frames. Each window is
/// anchored on a frame drawn uniformly from the whole dataset, so anchor
/// labels follow the dataset's class proportions; the window start is then
/// uniform among the full windows containing the anchor. Videos shorter than
/// `vcl` are front padded by repeating their first frame.
pub fn sample_batch(dataset: &Dataset, batch_size: usize, vcl: usize, rng: &mut impl Rng) -> Result<ClipBatch> {
    if dataset.is_empty() || dataset.videos.iter().any(|v| v.frames.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let first = &dataset.videos[0].frames[0];
    let (h, w) = (first.height(), first.width());
    let frame_len = h * w * 3;
    let total = dataset.total_frames();
    let mut data = Vec::with_capacity(batch_size * vcl * frame_len);
    let mut labels = Vec::with_capacity(batch_size * vcl);
    let mut video_ids = Vec::with_capacity(batch_size);
    let (mut starts, mut anchors) = (Vec::with_capacity(batch_size), Vec::with_capacity(batch_size));
    for _ in 0..batch_size {
        let mut k = rng.gen_range(0..total);
        let mut vid = 0;
        while k >= dataset.videos[vid].frames.len() {
            k -= dataset.videos[vid].frames.len();
            vid += 1;
        }
        let video = &dataset.videos[vid];
        let n = video.frames.len();
        let pad = vcl.saturating_sub(n);
        let start = if pad > 0 {
            0
        } else {
            rng.gen_range(k.saturating_sub(vcl - 1)..=k.min(n - vcl))
        };
        let video_labels = video.labels();
        for j in 0..vcl {
            let src = (start + j).saturating_sub(pad);
            let frame = &video.frames[src];
            if (frame.height(), frame.width()) != (h, w) {
                return Err(Error::Dimension(format!(
                    "video {} has {}x{} frames, expected {h}x{w}",
                    video.annotation.video_id,
                    frame.height(),
                    frame.width()
                )));
            }
            data.extend_from_slice(frame.pixels());
            labels.push(video_labels[src]);
        }
        video_ids.push(vid);
        starts.push(start);
        anchors.push(k - start + pad);
    }
    Ok(ClipBatch {
        clips: Tensor::new([batch_size, vcl, h, w, 3], data).expect("batch size"),
        labels,
        video_ids,
        starts,
        anchors,
    })
}

/// Stacks the `[B * VCL, NF, H, W, 3]` standardized backbone input; clip
/// `(b, t)` ends at frame `t` of row `b` and repeats the window's first frame
/// while fewer than `NF` frames are available.
pub fn unroll_clips(model: &Movad, batch: &ClipBatch) -> Tensor {
    let s = batch.clips.shape();
    let (b, vcl, h, w) = (s[0], s[1], s[2], s[3]);
    let nf = model.nf();
    let frame_len = h * w * 3;
    let src = batch.clips.data();
    let mut data = Vec::with_capacity(b * vcl * nf * frame_len);
    for row in 0..b {
        for t in 0..vcl {
            for f in clip_indices(t, nf) {
                let start = (row * vcl + f) * frame_len;
                data.extend_from_slice(&src[start..start + frame_len]);
            }
        }
    }
    model.standardize(&mut data);
    Tensor::new([b * vcl, nf, h, w, 3], data).expect("clip size")
}

/// Weighted loss over every frame of `batch`, unrolling the head over the
/// window from `initial` (zeros when `None`). Returns the loss, the
/// `[VCL * B, 2]` logits in time-major order and the final state.
pub fn batch_loss<'t>(
    model: &Movad,
    p: &Bound<'t>,
    batch: &ClipBatch,
    weights: [f64; 2],
    initial: Option<&RecurrentState>,
    rng: Option<&mut dyn RngCore>,
) -> (Var<'t>, Var<'t>, Vec<(Var<'t>, Var<'t>)>) {
    let tape = p.vars()[0].tape();
    let (b, vcl) = (batch.batch_size(), batch.vcl());
    let features = model.features(tape.constant(unroll_clips(model, batch)), p);
    let d = model.stmm.feature_dim();
    let zeros;
    let init = match initial {
        Some(s) => s,
        None => {
            zeros = model.zero_state(b);
            &zeros
        }
    };
    let mut state: Vec<_> = init
        .layers
        .iter()
        .map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone())))
        .collect();
    let mut rng = rng;
    let mut logits = Vec::with_capacity(vcl);
    let mut labels = Vec::with_capacity(b * vcl);
    for t in 0..vcl {
        let rows: Vec<Option<usize>> = (0..b).map(|r| Some(r * vcl + t)).collect();
        let x = features.gather_rows(d, rows.into());
        let (out, next) = model.head.forward(x, &state, p, rng.as_mut().map(|r| &mut **r as &mut dyn RngCore));
        logits.push(out);
        state = next;
        labels.extend((0..b).map(|r| batch.labels[r * vcl + t] as usize));
    }
    let logits = concat_rows(&logits);
    let loss = logits.weighted_cross_entropy(&labels, &weights);
    (loss, logits, state)
}

/// SGD with heavy-ball momentum: `v = μ v + g`, `p -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.velocity.len(), "one gradient per parameter");
        let ids: Vec<_> = params.ids().collect();
        for ((id, v), g) in ids.into_iter().zip(&mut self.velocity).zip(grads) {
            let (mu, lr) = (self.momentum, self.learning_rate);
            let vd = v.data_mut();
            for (vi, gi) in vd.iter_mut().zip(g.data()) {
                *vi = mu * *vi + gi;
            }
            if lr != 0.0 {
                for (pi, vi) in params.get_mut(id).data_mut().iter_mut().zip(v.data()) {
                    *pi -= lr * vi;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub learning_rate: f64,
    /// Frame accuracy per class, `None` when the batch holds no frame of it.
    pub accuracy: [Option<f64>; 2],
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> [Option<f64>; 2] {
    let mut hit = [0usize; 2];
    let mut total = [0usize; 2];
    for (row, &y) in logits.data().chunks_exact(2).zip(labels) {
        let pred = usize::from(row[1] > row[0]);
        total[y] += 1;
        hit[y] += usize::from(pred == y);
    }
    std::array::from_fn(|c| (total[c] > 0).then(|| hit[c] as f64 / total[c] as f64))
}

/// Generator for everything random in optimizer step `step`, so a resumed run
/// draws exactly what an uninterrupted one would.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Generator for parameter initialization, on a stream no step uses.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    step_rng(seed, u64::MAX)
}

/// Training loop state: model, optimizer, step counter, carried state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Movad,
    pub optimizer: Sgd,
    pub config: TrainConfig,
    pub weights: [f64; 2],
    pub step: u64,
    pub carried: Option<RecurrentState>,
}

impl Trainer {
    /// Wraps an initialized model. Class weights come from the config or,
    /// when absent, from the label counts of `dataset`.
    pub fn new(model: Movad, config: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        let weights = match config.normalized_weights() {
            Some(w) => w,
            None => class_weights(dataset.class_counts())?,
        };
        Ok(Self {
            optimizer: Sgd::new(&model.params, config.learning_rate, config.momentum),
            model,
            config: config.clone(),
            weights,
            step: 0,
            carried: None,
        })
    }

    pub fn steps_per_epoch(&self, dataset: &Dataset) -> usize {
        self.config.steps_per_epoch.unwrap_or_else(|| {
            let per_step = self.config.batch_size * self.config.vcl;
            dataset.total_frames().div_ceil(per_step).max(1)
        })
    }

    /// Loss and gradients for one batch without updating anything.
    pub fn gradients(&self, batch: &ClipBatch, rng: Option<&mut dyn RngCore>) -> (f64, Tensor, Vec<Tensor>, Option<RecurrentState>) {
        let tape = Tape::new();
        let p = self.model.params.bind(&tape, true);
        let initial = if self.config.carry_state { self.carried.as_ref() } else { None };
        let (loss, logits, state) = batch_loss(&self.model, &p, batch, self.weights, initial, rng);
        let grads: Grads = tape.backward(loss);
        let g = p.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
        let carried = self.config.carry_state.then(|| RecurrentState {
            layers: state.iter().map(|(h, c)| (h.value(), c.value())).collect(),
        });
        (loss.value().data()[0], logits.value(), g, carried)
    }

    /// One optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &ClipBatch, rng: &mut dyn RngCore) -> Result<StepMetrics> {
        let (loss, logits, grads, carried) = self.gradients(batch, Some(rng));
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, loss });
        }
        self.optimizer.step(&mut self.model.params, &grads);
        self.carried = carried;
        let (b, vcl) = (batch.batch_size(), batch.vcl());
        let labels: Vec<usize> = (0..vcl)
            .flat_map(|t| (0..b).map(move |r| (r, t)))
            .map(|(r, t)| batch.labels[r * vcl + t] as usize)
            .collect();
        let metrics = StepMetrics {
            step: self.step,
            loss,
            learning_rate: self.optimizer.learning_rate,
            accuracy: accuracy(&logits, &labels),
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Samples a batch from the step's own generator and trains on it.
    pub fn sampled_step(&mut self, dataset: &Dataset) -> Result<StepMetrics> {
        let mut rng = step_rng(self.config.seed, self.step);
        let batch = sample_batch(dataset, self.config.batch_size, self.config.vcl, &mut rng)?;
        self.train_step(&batch, &mut rng)
    }

    /// Runs `epochs` epochs, calling `on_step` after every step and
    /// `on_epoch(epoch, trainer)` after every epoch.
    pub fn fit(
        &mut self,
        dataset: &Dataset,
        epochs: usize,
        mut on_step: impl FnMut(&StepMetrics),
        mut on_epoch: impl FnMut(usize, &Trainer) -> Result<()>,
    ) -> Result<()> {
        let steps = self.steps_per_epoch(dataset);
        for epoch in 0..epochs {
            for _ in 0..steps {
                let m = self.sampled_step(dataset)?;
                on_step(&m);
            }
            on_epoch(epoch, self)?;
        }
        Ok(())
    }
}
