//! RGB frames, frame sources and resizing.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{Rgb32FImage, RgbImage};
use movad_tensor::Tensor;

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// One `[H, W, 3]` RGB frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    data: Tensor,
}

impl Frame {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s[2] != 3 || s[0] == 0 || s[1] == 0 {
            return Err(Error::Dimension(format!("frame must be non-empty [H, W, 3], got {s:?}")));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("frame pixels".into()));
        }
        Ok(Self { data })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Self {
            data: Tensor::new([h as usize, w as usize, 3], data).expect("rgb buffer size"),
        }
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self
            .data
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width() as u32, self.height() as u32, bytes).expect("rgb buffer size")
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn pixels(&self) -> &[f64] {
        self.data.data()
    }

    /// Bilinear (triangle filter) resize; frames already at the target size
    /// are returned unchanged.
    pub fn resized(&self, height: usize, width: usize) -> Frame {
        if (self.height(), self.width()) == (height, width) {
            return self.clone();
        }
        let src: Vec<f32> = self.data.data().iter().map(|&v| v as f32).collect();
        let img = Rgb32FImage::from_raw(self.width() as u32, self.height() as u32, src).expect("rgb buffer size");
        let out = image::imageops::resize(&img, width as u32, height as u32, FilterType::Triangle);
        let data = out.into_raw().into_iter().map(f64::from).collect();
        Frame {
            data: Tensor::new([height, width, 3], data).expect("resized size"),
        }
    }
}

/// Random access to the decoded frames of one video.
pub trait FrameSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn frame(&self, index: usize) -> Result<Frame>;

    /// Human readable origin used in error messages.
    fn name(&self) -> String;
}

/// Frames held in memory.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    pub frames: Vec<Frame>,
}

impl FrameSource for MemorySource {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        self.frames.get(index).cloned().ok_or_else(|| Error::Decode {
            source_name: self.name(),
            index,
            reason: "index out of range".into(),
        })
    }

    fn name(&self) -> String {
        "memory".into()
    }
}

/// A directory of numbered image files, read in numeric order of the
/// digits in each file stem (`9.png` precedes `10.png`).
#[derive(Debug, Clone)]
pub struct ImageDirSource {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().filter(char::is_ascii_digit).collect();
    digits.parse().ok()
}

impl ImageDirSource {
    pub fn open(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
            if is_image {
                files.push(path);
            }
        }
        files.sort_by(|a, b| frame_number(a).cmp(&frame_number(b)).then_with(|| a.cmp(b)));
        Ok(Self {
            dir: dir.to_path_buf(),
            files,
        })
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }
}

impl FrameSource for ImageDirSource {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn frame(&self, index: usize) -> Result<Frame> {
        let decode_err = |reason: String| Error::Decode {
            source_name: self.name(),
            index,
            reason,
        };
        let path = self.files.get(index).ok_or_else(|| decode_err("index out of range".into()))?;
        let img = image::open(path).map_err(|e| decode_err(format!("{}: {e}", path.display())))?;
        Ok(Frame::from_rgb8(&img.to_rgb8()))
    }

    fn name(&self) -> String {
        self.dir.display().to_string()
    }
}

/// Decodes every frame of `source` in order, resized to `height x width`.
pub fn load_frames(source: &dyn FrameSource, height: usize, width: usize) -> Result<Vec<Frame>> {
    (0..source.len())
        .map(|i| source.frame(i).map(|f| f.resized(height, width)))
        .collect()
}
