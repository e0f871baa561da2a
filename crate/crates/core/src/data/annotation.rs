//! DoTA-style per-video anomaly annotations.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Accident category codes used by the DoTA benchmark tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    ST,
    AH,
    LA,
    OC,
    TC,
    VP,
    VO,
    OO,
    UK,
}

impl Category {
    pub const ALL: [Category; 9] = [
        Category::ST,
        Category::AH,
        Category::LA,
        Category::OC,
        Category::TC,
        Category::VP,
        Category::VO,
        Category::OO,
        Category::UK,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Category::ST => "ST",
            Category::AH => "AH",
            Category::LA => "LA",
            Category::OC => "OC",
            Category::TC => "TC",
            Category::VP => "VP",
            Category::VO => "VO",
            Category::OO => "OO",
            Category::UK => "UK",
        }
    }

    /// Name written into annotation records.
    pub fn dota_name(self) -> &'static str {
        match self {
            Category::ST => "start_stop_or_stationary",
            Category::AH => "moving_ahead_or_waiting",
            Category::LA => "lateral",
            Category::OC => "oncoming",
            Category::TC => "turning",
            Category::VP => "pedestrian",
            Category::VO => "obstacle",
            Category::OO => "leave_to_right",
            Category::UK => "unknown",
        }
    }

    /// Numeric accident id written into annotation records.
    pub fn dota_id(self) -> u32 {
        match self {
            Category::ST => 1,
            Category::AH => 2,
            Category::LA => 3,
            Category::OC => 4,
            Category::TC => 5,
            Category::VP => 6,
            Category::VO => 7,
            Category::OO => 8,
            Category::UK => 10,
        }
    }

    pub fn from_dota_id(id: u32) -> Option<Self> {
        Some(match id {
            1 => Category::ST,
            2 => Category::AH,
            3 => Category::LA,
            4 => Category::OC,
            5 => Category::TC,
            6 => Category::VP,
            7 => Category::VO,
            8 | 9 => Category::OO,
            10 => Category::UK,
            _ => return None,
        })
    }

    /// Accepts a code (`"LA"`), a DoTA name (`"lateral"`) or a prefixed
    /// metadata label (`"other: lateral"`).
    pub fn from_label(label: &str) -> Option<Self> {
        let label = label.rsplit(':').next().unwrap_or(label).trim();
        if let Some(c) = Self::ALL.iter().find(|c| c.code().eq_ignore_ascii_case(label)) {
            return Some(*c);
        }
        Some(match label.to_ascii_lowercase().as_str() {
            "start_stop_or_stationary" => Category::ST,
            "moving_ahead_or_waiting" => Category::AH,
            "lateral" => Category::LA,
            "oncoming" => Category::OC,
            "turning" => Category::TC,
            "pedestrian" => Category::VP,
            "obstacle" => Category::VO,
            "leave_to_right" | "leave_to_left" => Category::OO,
            "unknown" => Category::UK,
            _ => return None,
        })
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::from_label(s).ok_or_else(|| format!("unknown accident category {s:?}"))
    }
}

/// Temporal anomaly boundaries of one video; `anomaly_end` is inclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoAnnotation {
    pub video_id: String,
    pub num_frames: usize,
    pub anomaly_start: usize,
    pub anomaly_end: usize,
    pub category: Category,
    pub ego_involved: bool,
}

impl VideoAnnotation {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.anomaly_start > self.anomaly_end {
            return Err(format!("anomaly_start {} > anomaly_end {}", self.anomaly_start, self.anomaly_end));
        }
        if self.anomaly_end >= self.num_frames {
            return Err(format!("anomaly_end {} outside {} frames", self.anomaly_end, self.num_frames));
        }
        Ok(())
    }

    /// Per-frame binary labels: 1 on `[anomaly_start, anomaly_end]`.
    pub fn frame_labels(&self) -> Vec<u8> {
        (0..self.num_frames)
            .map(|i| u8::from((self.anomaly_start..=self.anomaly_end).contains(&i)))
            .collect()
    }

    pub fn to_record(&self) -> DotaRecord {
        DotaRecord {
            video_name: Some(self.video_id.clone()),
            num_frames: Some(self.num_frames as i64),
            anomaly_start: Some(self.anomaly_start as i64),
            anomaly_end: Some(self.anomaly_end as i64),
            accident_id: Some(self.category.dota_id()),
            accident_name: Some(self.category.dota_name().to_string()),
            anomaly_class: None,
            ego_involve: Some(self.ego_involved),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_record())?)
    }
}

/// On-disk record. Unknown fields (per-frame object labels and the like)
/// are ignored.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DotaRecord {
    pub video_name: Option<String>,
    pub num_frames: Option<i64>,
    pub anomaly_start: Option<i64>,
    pub anomaly_end: Option<i64>,
    pub accident_id: Option<u32>,
    pub accident_name: Option<String>,
    /// `"ego: turning"` style label; supplies the category and ego flag
    /// when the dedicated fields are absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anomaly_class: Option<String>,
    pub ego_involve: Option<bool>,
}

/// Outcome of converting one record.
enum Converted {
    Valid(VideoAnnotation),
    Malformed(String),
}

fn convert(record: DotaRecord, path: &Path) -> Result<Converted> {
    let missing = |field: &str| Error::Annotation {
        path: path.to_path_buf(),
        reason: format!("missing field `{field}`"),
    };
    let video_id = record.video_name.ok_or_else(|| missing("video_name"))?;
    let num_frames = record.num_frames.ok_or_else(|| missing("num_frames"))?;
    let start = record.anomaly_start.ok_or_else(|| missing("anomaly_start"))?;
    let end = record.anomaly_end.ok_or_else(|| missing("anomaly_end"))?;
    let class_ego = record.anomaly_class.as_deref().and_then(|c| match c.split_once(':') {
        Some((prefix, _)) if prefix.trim().eq_ignore_ascii_case("ego") => Some(true),
        Some((prefix, _)) if prefix.trim().eq_ignore_ascii_case("other") => Some(false),
        _ => None,
    });
    let ego_involved = record.ego_involve.or(class_ego).ok_or_else(|| missing("ego_involve"))?;
    let by_name = record.accident_name.as_deref().and_then(Category::from_label);
    let by_class = record.anomaly_class.as_deref().and_then(Category::from_label);
    let by_id = record.accident_id.and_then(Category::from_dota_id);
    let category = match by_name.or(by_class).or(by_id) {
        Some(c) => c,
        None if record.accident_name.is_none() && record.anomaly_class.is_none() && record.accident_id.is_none() => {
            return Err(missing("accident_name"))
        }
        None => {
            let (name, id) = (record.accident_name.as_ref().or(record.anomaly_class.as_ref()), record.accident_id);
            return Err(Error::Annotation {
                path: path.to_path_buf(),
                reason: format!("unrecognized accident category (name {name:?}, id {id:?})"),
            })
        }
    };
    if num_frames < 0 || start < 0 || end < 0 {
        return Ok(Converted::Malformed(format!(
            "negative frame index (num_frames {num_frames}, start {start}, end {end})"
        )));
    }
    let ann = VideoAnnotation {
        video_id,
        num_frames: num_frames as usize,
        anomaly_start: start as usize,
        anomaly_end: end as usize,
        category,
        ego_involved,
    };
    Ok(match ann.validate() {
        Ok(()) => Converted::Valid(ann),
        Err(reason) => Converted::Malformed(reason),
    })
}

/// Parses a single record file; the inner `Err` carries the reason a record
/// with invalid bounds is rejected.
pub fn parse_record(path: &Path) -> Result<std::result::Result<VideoAnnotation, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let record: DotaRecord = serde_json::from_str(&text).map_err(|e| Error::Annotation {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(match convert(record, path)? {
        Converted::Valid(a) => Ok(a),
        Converted::Malformed(r) => Err(r),
    })
}

#[derive(Debug, Clone, Default)]
pub struct ParsedAnnotations {
    pub videos: Vec<VideoAnnotation>,
    /// Records skipped because of invalid bounds.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Directory holding the record files: `root/annotations` when present,
/// otherwise `root` itself.
pub fn annotation_dir(root: &Path) -> PathBuf {
    let nested = root.join("annotations");
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

/// Reads every `*.json` record under [`annotation_dir`], ordered by file name.
pub fn parse_annotations(root: &Path) -> Result<ParsedAnnotations> {
    let dir = annotation_dir(root);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    let mut out = ParsedAnnotations::default();
    for path in files {
        match parse_record(&path)? {
            Ok(a) => out.videos.push(a),
            Err(reason) => {
                log::warn!("skipping {}: {reason}", path.display());
                out.skipped.push((path, reason));
            }
        }
    }
    Ok(out)
}

pub fn frame_labels(ann: &VideoAnnotation) -> Vec<u8> {
    ann.frame_labels()
}
