//! Annotation parsing, frame sources and the synthetic video generator.

pub mod annotation;
pub mod dataset;
pub mod frames;
pub mod synthetic;

pub use annotation::{frame_labels, parse_annotations, Category, VideoAnnotation};
pub use dataset::{Dataset, Video};
pub use frames::{load_frames, Frame, FrameSource, ImageDirSource, MemorySource};
pub use synthetic::{generate_synthetic, SignalKind, SyntheticSpec};
