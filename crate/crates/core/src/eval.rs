//! Frame-level ROC AUC and dataset evaluation through streaming sessions.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Category, Dataset};
use crate::engine::score_video;
use crate::error::{Error, Result};
use crate::model::Movad;

/// ROC AUC of `scores` against binary `labels`, with tied scores counted as
/// half (mid-rank formulation).
pub fn frame_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedAuc("both classes must be present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] != 0).count();
        rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Drop the first `NF - 1` frames of every video, whose clips are padded.
    pub exclude_warmup: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    pub category: Category,
    pub ego_involved: bool,
    /// One score per frame, including warm-up frames.
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Index of the first frame entering the AUC.
    pub first_scored: usize,
}

impl VideoScores {
    pub fn evaluated(&self) -> (&[f64], &[u8]) {
        let k = self.first_scored.min(self.scores.len());
        (&self.scores[k..], &self.labels[k..])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAuc {
    pub ego: Option<f64>,
    pub non_ego: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub category: Category,
    pub ego_involved: bool,
    pub videos: Vec<String>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// AUC over the frames of all videos pooled together.
    pub overall_auc: f64,
    /// Mean of the per-video AUCs that are defined.
    pub per_video_mean_auc: Option<f64>,
    pub per_class: BTreeMap<Category, ClassAuc>,
    pub buckets: Vec<Bucket>,
    pub num_frames: usize,
    pub exclude_warmup: bool,
    /// Videos that could not be scored, with the reason.
    pub failures: Vec<(String, String)>,
    pub videos: Vec<VideoScores>,
}

fn pooled_auc<'a>(videos: impl Iterator<Item = &'a VideoScores>) -> Result<f64> {
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for v in videos {
        let (vs, vl) = v.evaluated();
        s.extend_from_slice(vs);
        l.extend_from_slice(vl);
    }
    frame_auc(&s, &l)
}

/// Groups scored videos into `(category, ego)` buckets and computes the
/// pooled AUC of each, in a fixed order.
pub fn bucket_videos(videos: &[VideoScores]) -> Vec<Bucket> {
    let mut groups: BTreeMap<(Category, bool), Vec<&VideoScores>> = BTreeMap::new();
    for v in videos {
        groups.entry((v.category, v.ego_involved)).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|((category, ego_involved), vs)| Bucket {
            category,
            ego_involved,
            videos: vs.iter().map(|v| v.video_id.clone()).collect(),
            auc: pooled_auc(vs.into_iter()).ok(),
        })
        .collect()
}

/// Aggregates already computed per-video scores.
pub fn summarize(videos: Vec<VideoScores>, failures: Vec<(String, String)>, options: EvalOptions) -> Result<EvalResult> {
    let overall_auc = pooled_auc(videos.iter())?;
    let per_video: Vec<f64> = videos
        .iter()
        .filter_map(|v| {
            let (s, l) = v.evaluated();
            frame_auc(s, l).ok()
        })
        .collect();
    let per_video_mean_auc = (!per_video.is_empty()).then(|| per_video.iter().sum::<f64>() / per_video.len() as f64);
    let buckets = bucket_videos(&videos);
    let mut per_class: BTreeMap<Category, ClassAuc> = BTreeMap::new();
    for b in &buckets {
        let entry = per_class.entry(b.category).or_default();
        if b.ego_involved {
            entry.ego = b.auc;
        } else {
            entry.non_ego = b.auc;
        }
    }
    Ok(EvalResult {
        overall_auc,
        per_video_mean_auc,
        per_class,
        buckets,
        num_frames: videos.iter().map(|v| v.evaluated().0.len()).sum(),
        exclude_warmup: options.exclude_warmup,
        failures,
        videos,
    })
}

/// Streams every video through a fresh session and scores the result.
pub fn evaluate(model: &Arc<Movad>, dataset: &Dataset, options: EvalOptions) -> Result<EvalResult> {
    let warmup = if options.exclude_warmup { model.nf() - 1 } else { 0 };
    let mut videos = Vec::with_capacity(dataset.len());
    let mut failures = Vec::new();
    for v in &dataset.videos {
        let ann = &v.annotation;
        match score_video(model, &v.frames) {
            Ok(scores) => videos.push(VideoScores {
                video_id: ann.video_id.clone(),
                category: ann.category,
                ego_involved: ann.ego_involved,
                scores,
                labels: v.labels(),
                first_scored: warmup,
            }),
            Err(e) => {
                log::warn!("video {}: {e}", ann.video_id);
                failures.push((ann.video_id.clone(), e.to_string()));
            }
        }
    }
    summarize(videos, failures, options)
}
