//! Procedural anomaly videos: a square moving over a drifting texture.

use movad_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotation::{Category, VideoAnnotation};
use super::dataset::{Dataset, Video};
use super::frames::Frame;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// The object turns red during the anomaly window.
    AppearanceSwitch,
    /// The object jumps to a random position on every anomalous frame.
    MotionDiscontinuity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub signal: SignalKind,
    /// Each video shows its object in one of two colours, and the anomaly is
    /// the other colour. A single frame is ambiguous; only the colour seen
    /// before the window tells the two apart.
    pub long_range: bool,
    pub window_min: usize,
    pub window_max: usize,
    /// Earliest frame at which a window may start.
    pub lead_in: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn toy(seed: u64) -> Self {
        Self {
            num_videos: 8,
            frames: 16,
            height: 16,
            width: 16,
            signal: SignalKind::AppearanceSwitch,
            long_range: false,
            window_min: 4,
            window_max: 8,
            lead_in: 2,
            seed,
        }
    }

    pub fn long_range(seed: u64) -> Self {
        Self {
            num_videos: 8,
            frames: 20,
            long_range: true,
            window_min: 5,
            window_max: 8,
            lead_in: 6,
            ..Self::toy(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_videos == 0 || self.frames == 0 {
            return bad("synthetic dataset needs at least one video and one frame".into());
        }
        if self.height < 4 || self.width < 4 {
            return bad(format!("frame size {}x{} is too small", self.height, self.width));
        }
        if self.window_min == 0 || self.window_min > self.window_max {
            return bad(format!("window length range {}..={} is empty", self.window_min, self.window_max));
        }
        if self.lead_in + self.window_max > self.frames {
            return bad(format!(
                "window of up to {} frames after a lead-in of {} does not fit in {} frames",
                self.window_max, self.lead_in, self.frames
            ));
        }
        if self.long_range && self.signal != SignalKind::AppearanceSwitch {
            return bad("the long-range variant is defined for the appearance signal".into());
        }
        Ok(())
    }
}

const NORMAL_COLOUR: [f64; 3] = [0.9, 0.9, 0.85];
const ANOMALY_COLOUR: [f64; 3] = [0.95, 0.1, 0.1];
const PAIR_COLOURS: [[f64; 3]; 2] = [[0.9, 0.25, 0.2], [0.2, 0.35, 0.9]];

struct Scene {
    base: [f64; 3],
    freq: [f64; 2],
    phase: [f64; 2],
    drift: f64,
    size: usize,
    pos: [f64; 2],
    vel: [f64; 2],
}

impl Scene {
    fn new(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let g = rng.gen_range(0.25..0.45);
        let size = (spec.height.min(spec.width) / 4).max(2);
        let speed = |rng: &mut ChaCha8Rng| rng.gen_range(0.6..1.4) * if rng.gen() { 1.0 } else { -1.0 };
        Self {
            base: [g + rng.gen_range(-0.05..0.05), g, g + rng.gen_range(-0.05..0.05)],
            freq: [rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9)],
            phase: [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
            drift: rng.gen_range(-0.5..0.5),
            size,
            pos: [
                rng.gen_range(0.0..(spec.height - size) as f64),
                rng.gen_range(0.0..(spec.width - size) as f64),
            ],
            vel: [speed(rng), speed(rng)],
        }
    }

    fn advance(&mut self, h: usize, w: usize) {
        let limits = [(h - self.size) as f64, (w - self.size) as f64];
        for d in 0..2 {
            self.pos[d] += self.vel[d];
            if self.pos[d] < 0.0 {
                self.pos[d] = -self.pos[d];
                self.vel[d] = -self.vel[d];
            }
            if self.pos[d] > limits[d] {
                self.pos[d] = 2.0 * limits[d] - self.pos[d];
                self.vel[d] = -self.vel[d];
            }
            self.pos[d] = self.pos[d].clamp(0.0, limits[d]);
        }
    }

    fn render(&self, t: usize, pos: [f64; 2], colour: [f64; 3], h: usize, w: usize, rng: &mut ChaCha8Rng) -> Frame {
        let (oy, ox) = (pos[0].round() as usize, pos[1].round() as usize);
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let inside = (oy..oy + self.size).contains(&y) && (ox..ox + self.size).contains(&x);
                let texture = 0.08
                    * (self.freq[1] * (x as f64 + self.drift * t as f64) + self.phase[1]).sin()
                    * (self.freq[0] * y as f64 + self.phase[0]).cos();
                for c in 0..3 {
                    let v = if inside { colour[c] } else { self.base[c] + texture };
                    let noisy = (v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
                    data.push((noisy * 255.0).round() / 255.0);
                }
            }
        }
        Frame::new(Tensor::new([h, w, 3], data).expect("frame size")).expect("finite pixels")
    }
}

/// Renders the dataset described by `spec`; identical specs give
/// bit-identical frames and annotations.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut videos = Vec::with_capacity(spec.num_videos);
    for i in 0..spec.num_videos {
        let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
        let len = rng.gen_range(spec.window_min..=spec.window_max);
        let start = rng.gen_range(spec.lead_in..=spec.frames - len);
        let end = start + len - 1;
        let (normal, anomalous) = if spec.long_range {
            (PAIR_COLOURS[i % 2], PAIR_COLOURS[1 - i % 2])
        } else {
            (NORMAL_COLOUR, ANOMALY_COLOUR)
        };
        let mut scene = Scene::new(spec, &mut rng);
        let mut frames = Vec::with_capacity(spec.frames);
        for t in 0..spec.frames {
            let in_window = (start..=end).contains(&t);
            let mut pos = scene.pos;
            let mut colour = normal;
            if in_window {
                match spec.signal {
                    SignalKind::AppearanceSwitch => colour = anomalous,
                    SignalKind::MotionDiscontinuity => {
                        pos = [
                            rng.gen_range(0.0..(h - scene.size) as f64),
                            rng.gen_range(0.0..(w - scene.size) as f64),
                        ]
                    }
                }
            }
            frames.push(scene.render(t, pos, colour, h, w, &mut rng));
            scene.advance(h, w);
        }
        let annotation = VideoAnnotation {
            video_id: format!("synth_{i:04}"),
            num_frames: spec.frames,
            anomaly_start: start,
            anomaly_end: end,
            category: Category::ALL[i % Category::ALL.len()],
            ego_involved: i % 2 == 0,
        };
        videos.push(Video { annotation, frames });
    }
    Ok(Dataset { videos })
}
