//! Annotated videos held in memory, stored on disk in the DoTA layout:
//! `annotations/<id>.json` and `frames/<id>/images/<index>.png`.

use std::path::{Path, PathBuf};

use super::annotation::{parse_annotations, VideoAnnotation};
use super::frames::{load_frames, Frame, ImageDirSource};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub annotation: VideoAnnotation,
    pub frames: Vec<Frame>,
}

impl Video {
    pub fn labels(&self) -> Vec<u8> {
        self.annotation.frame_labels()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub videos: Vec<Video>,
}

/// Frame directory of `video_id` under `root`, trying the DoTA layout first.
pub fn frame_dir(root: &Path, video_id: &str) -> Option<PathBuf> {
    [
        root.join("frames").join(video_id).join("images"),
        root.join("frames").join(video_id),
        root.join(video_id).join("images"),
        root.join(video_id),
    ]
    .into_iter()
    .find(|p| p.is_dir())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(|v| v.frames.len()).sum()
    }

    /// Frame counts of the normal and anomalous classes.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0; 2];
        for v in &self.videos {
            for l in v.labels() {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// Loads annotations and frames, resizing every frame to `height x width`.
    pub fn load(root: &Path, height: usize, width: usize) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        let parsed = parse_annotations(root)?;
        let mut videos = Vec::with_capacity(parsed.videos.len());
        for annotation in parsed.videos {
            let dir = frame_dir(root, &annotation.video_id).ok_or_else(|| Error::Annotation {
                path: root.to_path_buf(),
                reason: format!("no frame directory for video {}", annotation.video_id),
            })?;
            let frames = load_frames(&ImageDirSource::open(&dir)?, height, width)?;
            if frames.len() != annotation.num_frames {
                return Err(Error::Annotation {
                    path: dir,
                    reason: format!(
                        "{} frames on disk, annotation declares {}",
                        frames.len(),
                        annotation.num_frames
                    ),
                });
            }
            videos.push(Video { annotation, frames });
        }
        if videos.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { videos })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let ann_dir = root.join("annotations");
        std::fs::create_dir_all(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;
        for v in &self.videos {
            let id = &v.annotation.video_id;
            let path = ann_dir.join(format!("{id}.json"));
            std::fs::write(&path, v.annotation.to_json()?).map_err(|e| Error::io(&path, e))?;
            let dir = root.join("frames").join(id).join("images");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, f) in v.frames.iter().enumerate() {
                let path = dir.join(format!("{i:06}.png"));
                f.to_rgb8()
                    .save(&path)
                    .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
            }
        }
        Ok(())
    }
}
