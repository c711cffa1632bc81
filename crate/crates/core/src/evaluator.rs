//! Inference and track-level VIS metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::PIXEL_STRIDE;
use crate::data_synth::{BinaryMask, InstanceTrack, RleRecord, VideoSample};
use crate::error::{Error, Result};
use crate::heads::{foreground_score, softmax};
use crate::model::SyncVisModel;
use crate::params::ParamStore;
use crate::tensor::sigmoid;

/// Queries below this foreground probability are discarded.
pub const SCORE_THRESHOLD: f64 = 0.05;
/// At most this many tracks are kept per video.
pub const MAX_TRACKS_PER_VIDEO: usize = 10;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// One predicted instance track. `None` frames are empty.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackPrediction {
    pub video_id: String,
    pub category_id: usize,
    pub confidence: f64,
    pub masks: Vec<Option<BinaryMask>>,
}

/// Metrics in percent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
    /// AP per category id, over categories with at least one ground truth.
    pub per_category: BTreeMap<usize, f64>,
}

/// Bilinear resize (half-pixel centres) of an `h×w` map to `oh×ow`.
fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

/// Tracks predicted for `sample` from the final layer's video-level outputs.
pub fn infer(model: &SyncVisModel, store: &ParamStore, sample: &VideoSample) -> Result<Vec<TrackPrediction>> {
    let cfg = model.config();
    let g = Graph::new();
    let p = store.bind_frozen(&g);
    let out = model.forward(&g, &p, &sample.frames_tensor(0..sample.len()))?;
    let last = out.decoder.predictions.last().expect("at least one prediction set");
    let (t, h, w) = (sample.len(), sample.height / PIXEL_STRIDE, sample.width / PIXEL_STRIDE);
    let k = cfg.num_classes;
    let classes = g.value_of(last.video_class).clone();
    let masks = g.value_of(last.video_mask).clone();
    let mut kept: Vec<(f64, usize, usize)> = (0..cfg.num_queries)
        .filter_map(|q| {
            let probs = softmax(classes.row(q));
            let score = foreground_score(&probs, k);
            let class = (0..k).max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))?;
            (score >= SCORE_THRESHOLD).then_some((score, class, q))
        })
        .collect();
    kept.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
    kept.truncate(MAX_TRACKS_PER_VIDEO);
    Ok(kept
        .into_iter()
        .map(|(score, class, q)| {
            let row = masks.row(q);
            let frames = (0..t)
                .map(|f| {
                    let probs: Vec<f64> = row[f * h * w..(f + 1) * h * w].iter().map(|&x| sigmoid(x)).collect();
                    let up = resize_bilinear(&probs, h, w, sample.height, sample.width);
                    let m = BinaryMask::from_bits(sample.height, sample.width, up.iter().map(|&v| v > 0.5).collect());
                    (!m.is_empty()).then_some(m)
                })
                .collect();
            TrackPrediction {
                video_id: sample.video_id.clone(),
                category_id: class + 1,
                confidence: score,
                masks: frames,
            }
        })
        .collect())
}

fn track_iou(pred: &[Option<BinaryMask>], gt: &[Option<BinaryMask>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("track of {} frames vs {}", pred.len(), gt.len())));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (a, b) in pred.iter().zip(gt) {
        match (a, b) {
            (Some(a), Some(b)) => {
                inter += a.intersection(b);
                union += a.union(b);
            }
            (Some(m), None) | (None, Some(m)) => union += m.count(),
            (None, None) => {}
        }
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `Σ_t |P_t ∩ G_t| / Σ_t |P_t ∪ G_t|`; 1 when both tracks are empty.
pub fn spatiotemporal_iou(pred: &TrackPrediction, gt: &InstanceTrack) -> Result<f64> {
    track_iou(&pred.masks, &gt.masks)
}

/// 101-point interpolated average precision of a ranked list of hits.
fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

struct Indexed<'a> {
    gts: Vec<(&'a str, &'a InstanceTrack)>,
    /// IoU of every prediction against every ground truth of its video.
    ious: Vec<Vec<(usize, f64)>>,
}

fn index<'a>(preds: &[TrackPrediction], gts: &'a [VideoSample]) -> Result<Indexed<'a>> {
    let by_video: BTreeMap<&str, &VideoSample> = gts.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut flat = Vec::new();
    let mut offsets = BTreeMap::new();
    for v in gts {
        offsets.insert(v.video_id.as_str(), flat.len());
        flat.extend(v.tracks.iter().map(|t| (v.video_id.as_str(), t)));
    }
    let mut ious = Vec::with_capacity(preds.len());
    for p in preds {
        let Some(video) = by_video.get(p.video_id.as_str()) else {
            return Err(Error::UnknownVideoId(p.video_id.clone()));
        };
        let base = offsets[p.video_id.as_str()];
        let row = video
            .tracks
            .iter()
            .enumerate()
            .map(|(i, t)| Ok((base + i, spatiotemporal_iou(p, t)?)))
            .collect::<Result<Vec<_>>>()?;
        ious.push(row);
    }
    Ok(Indexed { gts: flat, ious })
}

/// Greedy matching in descending confidence. Returns per-prediction hit
/// flags (in the given order) and the number of matched ground truths.
fn greedy(order: &[usize], ix: &Indexed, category: usize, threshold: f64) -> (Vec<bool>, usize) {
    let mut taken = vec![false; ix.gts.len()];
    let mut hits = Vec::with_capacity(order.len());
    for &pi in order {
        let mut best: Option<(usize, f64)> = None;
        for &(gi, iou) in &ix.ious[pi] {
            if taken[gi] || ix.gts[gi].1.category_id != category || iou < threshold {
                continue;
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
        }
        hits.push(best.is_some());
    }
    let matched = hits.iter().filter(|&&h| h).count();
    (hits, matched)
}

fn ranked(preds: &[TrackPrediction], subset: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut v: Vec<usize> = subset.collect();
    v.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    v
}

/// Average recall with at most `k` predictions per video.
fn average_recall(preds: &[TrackPrediction], ix: &Indexed, categories: &BTreeMap<usize, usize>, k: usize) -> f64 {
    let mut per_video: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        per_video.entry(p.video_id.as_str()).or_default().push(i);
    }
    let mut allowed = BTreeSet::new();
    for idx in per_video.values() {
        allowed.extend(ranked(preds, idx.iter().copied()).into_iter().take(k));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (&cat, &num_gt) in categories {
        let order = ranked(preds, allowed.iter().copied().filter(|&i| preds[i].category_id == cat));
        for thr in iou_thresholds() {
            let (_, matched) = greedy(&order, ix, cat, thr);
            sum += matched as f64 / num_gt as f64;
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        100.0 * sum / count as f64
    }
}

/// Track AP over the IoU thresholds, AP50, AP75, AR@1 and AR@10.
pub fn compute_ap(preds: &[TrackPrediction], gts: &[VideoSample]) -> Result<EvalResult> {
    let ix = index(preds, gts)?;
    let mut categories: BTreeMap<usize, usize> = BTreeMap::new();
    for (_, t) in &ix.gts {
        *categories.entry(t.category_id).or_default() += 1;
    }
    let thresholds = iou_thresholds();
    let mut per_threshold = [0.0; 10];
    let mut per_category = BTreeMap::new();
    for (&cat, &num_gt) in &categories {
        let order = ranked(preds, (0..preds.len()).filter(|&i| preds[i].category_id == cat));
        let mut cat_sum = 0.0;
        for (ti, &thr) in thresholds.iter().enumerate() {
            let (hits, _) = greedy(&order, &ix, cat, thr);
            let ap = 100.0 * interpolated_ap(&hits, num_gt);
            per_threshold[ti] += ap;
            cat_sum += ap;
        }
        per_category.insert(cat, cat_sum / thresholds.len() as f64);
    }
    if categories.is_empty() {
        return Ok(EvalResult::default());
    }
    let nc = categories.len() as f64;
    Ok(EvalResult {
        ap: per_threshold.iter().sum::<f64>() / (nc * thresholds.len() as f64),
        ap50: per_threshold[0] / nc,
        ap75: per_threshold[5] / nc,
        ar1: average_recall(preds, &ix, &categories, 1),
        ar10: average_recall(preds, &ix, &categories, 10),
        per_category,
    })
}

/// Per-instance quality: for every ground-truth track, the best-IoU
/// prediction in its video.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceQuality {
    pub mean_iou: f64,
    pub category_accuracy: f64,
    pub instances: usize,
}

pub fn instance_quality(preds: &[TrackPrediction], gts: &[VideoSample]) -> Result<InstanceQuality> {
    let ix = index(preds, gts)?;
    let mut best: Vec<Option<(f64, usize)>> = vec![None; ix.gts.len()];
    for (pi, row) in ix.ious.iter().enumerate() {
        for &(gi, iou) in row {
            if best[gi].is_none_or(|(b, _)| iou > b) {
                best[gi] = Some((iou, pi));
            }
        }
    }
    let n = ix.gts.len();
    if n == 0 {
        return Ok(InstanceQuality::default());
    }
    let mut iou_sum = 0.0;
    let mut correct = 0;
    for (gi, b) in best.iter().enumerate() {
        if let Some((iou, pi)) = b {
            iou_sum += iou;
            correct += usize::from(preds[*pi].category_id == ix.gts[gi].1.category_id);
        }
    }
    Ok(InstanceQuality {
        mean_iou: iou_sum / n as f64,
        category_accuracy: correct as f64 / n as f64,
        instances: n,
    })
}

#[derive(Serialize, Deserialize)]
struct DumpRecord {
    video_id: String,
    category_id: usize,
    score: f64,
    segmentations: Vec<Option<RleRecord>>,
}

pub fn predictions_to_json(preds: &[TrackPrediction]) -> String {
    let records: Vec<DumpRecord> = preds
        .iter()
        .map(|p| DumpRecord {
            video_id: p.video_id.clone(),
            category_id: p.category_id,
            score: p.confidence,
            segmentations: p.masks.iter().map(|m| m.as_ref().map(RleRecord::encode)).collect(),
        })
        .collect();
    serde_json::to_string(&records).expect("prediction records serialise")
}

pub fn predictions_from_json(text: &str, origin: &Path) -> Result<Vec<TrackPrediction>> {
    let records: Vec<DumpRecord> = serde_json::from_str(text).map_err(|source| Error::Json {
        path: origin.to_path_buf(),
        source,
    })?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let masks = r
                .segmentations
                .iter()
                .map(|s| {
                    s.as_ref()
                        .map(|s| {
                            s.decode().map_err(|message| Error::Annotation {
                                annotation: format!("prediction #{i}"),
                                message,
                            })
                        })
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrackPrediction {
                video_id: r.video_id,
                category_id: r.category_id,
                confidence: r.score,
                masks: masks.into_iter().map(|m| m.filter(|m| !m.is_empty())).collect(),
            })
        })
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<TrackPrediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    predictions_from_json(&text, path)
}
