//! Bipartite matching and the set-prediction objective.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{Mode, ModelConfig};
use crate::data_synth::VideoSample;
use crate::error::{Error, Result};
use crate::heads::{softmax, PredictionSet};
use crate::tensor::{sigmoid, softplus, Tensor};

pub const DICE_EPS: f64 = 1e-6;

/// Injective ground-truth → query assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchAssignment {
    /// `(gt_index, query_index)`, ordered by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl MatchAssignment {
    /// Query index for each ground truth, in ground-truth order.
    pub fn queries(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, q)| q).collect()
    }
}

/// Minimum-cost assignment of each row to a distinct column (`rows ≤ cols`)
/// by shortest augmenting paths with potentials. Returns the column of each
/// row.
fn assign(cost: &[Vec<f64>], cols: &[usize]) -> Vec<usize> {
    let n = cost.len();
    let m = cols.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][cols[j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = cols[j - 1];
        }
    }
    out
}

fn optimum(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
    if cost.is_empty() {
        return 0.0;
    }
    assign(cost, cols).iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Globally optimal matching of `cost` (`G × N`, one row per ground truth).
/// Among optimal assignments the lexicographically smallest vector of query
/// indices is returned.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchAssignment> {
    let g = cost.len();
    let n = cost.first().map_or(0, Vec::len);
    if g > n {
        return Err(Error::TooManyTargets { targets: g, queries: n });
    }
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("matching cost".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let best = optimum(cost, &all);
    let tol = 1e-9 * best.abs().max(1.0);
    let mut free = all;
    let mut acc = 0.0;
    let mut pairs = Vec::with_capacity(g);
    for i in 0..g {
        let mut chosen = None;
        for (pos, &j) in free.iter().enumerate() {
            let rest: Vec<usize> = free.iter().copied().filter(|&c| c != j).collect();
            let tail = optimum(&cost[i + 1..], &rest);
            if acc + cost[i][j] + tail <= best + tol {
                chosen = Some(pos);
                break;
            }
        }
        let pos = chosen.expect("an optimal completion always exists");
        let j = free.remove(pos);
        acc += cost[i][j];
        pairs.push((i, j));
    }
    let total_cost = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
    Ok(MatchAssignment { pairs, total_cost })
}

/// Contiguous windows of `t_s` frames covering `0..t`. A short remainder is
/// extended backwards to full length.
pub fn subclip_partition(t: usize, t_s: usize) -> Result<Vec<Range<usize>>> {
    if t_s == 0 || t_s > t {
        return Err(Error::Subclip {
            frames: t,
            subclip: t_s,
        });
    }
    let mut out = Vec::new();
    let mut s = 0;
    while s + t_s <= t {
        out.push(s..s + t_s);
        s += t_s;
    }
    if s < t {
        out.push(t - t_s..t);
    }
    Ok(out)
}

/// Mean binary cross-entropy of `logits` against `gt`, on plain values.
pub fn bce_value(logits: &[f64], gt: &[f64]) -> f64 {
    let s: f64 = logits.iter().zip(gt).map(|(&x, &y)| softplus(x) - x * y).sum();
    s / logits.len().max(1) as f64
}

/// `1 − 2⟨σ(x), y⟩ / (‖σ(x)‖₁ + ‖y‖₁ + ε)` on plain values.
pub fn dice_value(logits: &[f64], gt: &[f64]) -> f64 {
    let mut inter = 0.0;
    let mut ps = 0.0;
    let mut gs = 0.0;
    for (&x, &y) in logits.iter().zip(gt) {
        let p = sigmoid(x);
        inter += p * y;
        ps += p;
        gs += y;
    }
    1.0 - 2.0 * inter / (ps + gs + DICE_EPS)
}

fn check_mask_shapes(g: &Graph, logits: Var, gt: &Tensor) -> Result<(usize, usize)> {
    let s = g.shape(logits);
    if s != gt.shape() || s.len() != 2 {
        return Err(Error::Shape(format!("mask logits {s:?} vs targets {:?}", gt.shape())));
    }
    Ok((s[0], s[1]))
}

/// Dice loss averaged over the rows (instances) of `[G, P]` logits.
pub fn dice_loss(g: &Graph, logits: Var, gt: &Tensor) -> Result<Var> {
    let (rows, _) = check_mask_shapes(g, logits, gt)?;
    let prob = g.sigmoid(logits);
    let inter = g.sum_rows(g.mul_const(prob, gt));
    let gt_sums: Vec<f64> = gt
        .data()
        .chunks(gt.shape()[1])
        .map(|r| r.iter().sum::<f64>() + DICE_EPS)
        .collect();
    let den = g.add_const(g.sum_rows(prob), &Tensor::new(&[rows], gt_sums));
    let ratio = g.div(g.scale(inter, 2.0), den);
    let per_row = g.add_scalar(g.scale(ratio, -1.0), 1.0);
    Ok(g.mean(per_row))
}

/// Binary cross-entropy averaged over every entry of `[G, P]` logits.
pub fn bce_loss(g: &Graph, logits: Var, gt: &Tensor) -> Result<Var> {
    check_mask_shapes(g, logits, gt)?;
    let sp = g.softplus(logits);
    let xy = g.mul_const(logits, gt);
    Ok(g.mean(g.sub(sp, xy)))
}

/// Weighted cross-entropy over `[N, K+1]` logits. Rows whose target is the
/// no-object class `K` carry weight `no_object_weight`; the result is the
/// weighted mean.
pub fn ce_loss(g: &Graph, logits: Var, targets: &[usize], no_object_weight: f64) -> Result<Var> {
    let s = g.shape(logits);
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::Shape(format!(
            "class logits {s:?} for {} targets",
            targets.len()
        )));
    }
    let k1 = s[1];
    if let Some(&bad) = targets.iter().find(|&&y| y >= k1) {
        return Err(Error::ClassOutOfRange {
            class: bad,
            max: k1 - 1,
        });
    }
    let weights: Vec<f64> = targets
        .iter()
        .map(|&y| if y == k1 - 1 { no_object_weight } else { 1.0 })
        .collect();
    let norm: f64 = weights.iter().sum();
    let lp = g.log_softmax_rows(logits);
    let index: Vec<usize> = targets.iter().enumerate().map(|(i, &y)| i * k1 + y).collect();
    let picked = g.gather_flat(lp, &index, &[targets.len()]);
    let weighted = g.sum(g.mul_const(picked, &Tensor::new(&[targets.len()], weights)));
    Ok(g.scale(weighted, -1.0 / norm.max(f64::MIN_POSITIVE)))
}

/// Matching cost between one query and one ground truth:
/// `−w_ce·p(class) + w_bce·bce + w_dice·dice` over the shared frame range.
pub fn pair_cost(
    class_probs: &[f64],
    mask_logits: &[f64],
    gt_class: usize,
    gt_mask: &[f64],
    cfg: &ModelConfig,
) -> Result<f64> {
    if mask_logits.is_empty() {
        return Err(Error::EmptyRange);
    }
    if mask_logits.len() != gt_mask.len() {
        return Err(Error::Shape(format!(
            "mask of {} vs target of {}",
            mask_logits.len(),
            gt_mask.len()
        )));
    }
    if gt_class >= class_probs.len() {
        return Err(Error::ClassOutOfRange {
            class: gt_class,
            max: class_probs.len() - 1,
        });
    }
    Ok(-cfg.w_ce * class_probs[gt_class]
        + cfg.w_bce * bce_value(mask_logits, gt_mask)
        + cfg.w_dice * dice_value(mask_logits, gt_mask))
}

/// One ground-truth instance of a video, with masks at loss resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetTrack {
    pub track_id: usize,
    /// Zero-based class index.
    pub class: usize,
    /// Per frame: `h·w` values in {0, 1}, or `None` when absent.
    pub masks: Vec<Option<Vec<f64>>>,
}

impl TargetTrack {
    pub fn present_in(&self, range: Range<usize>) -> bool {
        self.masks[range].iter().any(Option::is_some)
    }

    /// Concatenated masks over `range`; absent frames contribute zeros.
    pub fn mask_over(&self, range: Range<usize>, hw: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(range.len() * hw);
        for m in &self.masks[range] {
            match m {
                Some(m) => out.extend_from_slice(m),
                None => out.extend(std::iter::repeat_n(0.0, hw)),
            }
        }
        out
    }
}

/// Ground truth of a clip at loss resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTargets {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tracks: Vec<TargetTrack>,
}

impl ClipTargets {
    /// Targets for `range` of `sample`, downsampled by `factor` (block
    /// majority). Tracks absent from the whole range are dropped, as are
    /// frames whose mask vanishes under downsampling.
    pub fn from_sample(sample: &VideoSample, range: Range<usize>, factor: usize, num_classes: usize) -> Result<Self> {
        let (h, w) = (sample.height / factor, sample.width / factor);
        let mut tracks = Vec::new();
        for tr in &sample.tracks {
            if tr.category_id == 0 || tr.category_id > num_classes {
                return Err(Error::ClassOutOfRange {
                    class: tr.category_id,
                    max: num_classes,
                });
            }
            let masks: Vec<Option<Vec<f64>>> = tr.masks[range.clone()]
                .iter()
                .map(|m| {
                    m.as_ref()
                        .map(|m| m.downsample(factor))
                        .filter(|m| !m.is_empty())
                        .map(|m| m.to_f64())
                })
                .collect();
            if masks.iter().any(Option::is_some) {
                tracks.push(TargetTrack {
                    track_id: tr.track_id,
                    class: tr.category_id - 1,
                    masks,
                });
            }
        }
        Ok(Self {
            frames: range.len(),
            height: h,
            width: w,
            tracks,
        })
    }

    pub fn hw(&self) -> usize {
        self.height * self.width
    }
}

/// Loss terms of one matched prediction group.
#[derive(Clone, Debug)]
pub struct MatchedLoss {
    pub ce: Var,
    pub bce: Var,
    pub dice: Var,
    pub assignment: MatchAssignment,
    /// Track ids of the matched ground truths, in assignment order.
    pub track_ids: Vec<usize>,
}

/// Matches the queries of `class_logits` (`[N, K+1]`) and `mask_logits`
/// (`[N, P]`) against the tracks of `targets` present in `range`, then
/// evaluates the matched losses. Unmatched queries are pushed to no-object.
pub fn matched_loss(
    g: &Graph,
    class_logits: Var,
    mask_logits: Var,
    targets: &ClipTargets,
    range: Range<usize>,
    cfg: &ModelConfig,
) -> Result<MatchedLoss> {
    if range.is_empty() {
        return Err(Error::EmptyRange);
    }
    let hw = targets.hw();
    let cs = g.shape(class_logits);
    let ms = g.shape(mask_logits);
    if cs.len() != 2 || ms.len() != 2 || cs[0] != ms[0] || ms[1] != range.len() * hw {
        return Err(Error::Shape(format!(
            "class {cs:?} / mask {ms:?} for {} frames of {hw}",
            range.len()
        )));
    }
    let (n, k1) = (cs[0], cs[1]);
    let gts: Vec<&TargetTrack> = targets.tracks.iter().filter(|t| t.present_in(range.clone())).collect();
    if gts.len() > n {
        return Err(Error::TooManyTargets {
            targets: gts.len(),
            queries: n,
        });
    }
    let gt_masks: Vec<Vec<f64>> = gts.iter().map(|t| t.mask_over(range.clone(), hw)).collect();
    let cost = {
        let cv = g.value_of(class_logits);
        let mv = g.value_of(mask_logits);
        let probs: Vec<Vec<f64>> = (0..n).map(|q| softmax(cv.row(q))).collect();
        gts.iter()
            .zip(&gt_masks)
            .map(|(t, gm)| {
                (0..n)
                    .map(|q| pair_cost(&probs[q], mv.row(q), t.class, gm, cfg))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<Vec<f64>>>>()?
    };
    let assignment = hungarian_match(&cost)?;
    let mut targets_ce = vec![k1 - 1; n];
    for &(gi, q) in &assignment.pairs {
        targets_ce[q] = gts[gi].class;
    }
    let ce = ce_loss(g, class_logits, &targets_ce, cfg.no_object_weight)?;
    let (bce, dice) = if gts.is_empty() {
        let z = g.constant(Tensor::scalar(0.0));
        (z, z)
    } else {
        let rows = g.gather0(mask_logits, &assignment.queries());
        let gt = Tensor::new(&[gts.len(), range.len() * hw], gt_masks.concat());
        (bce_loss(g, rows, &gt)?, dice_loss(g, rows, &gt)?)
    };
    let track_ids = gts.iter().map(|t| t.track_id).collect();
    Ok(MatchedLoss {
        ce,
        bce,
        dice,
        assignment,
        track_ids,
    })
}

/// Video-level loss of one sub-clip: video predictions (`[N, K+1]` classes,
/// `[N, T·h·w]` masks) restricted to `range` and matched on their own.
pub fn video_clip_loss(
    g: &Graph,
    video_class: Var,
    video_mask: Var,
    targets: &ClipTargets,
    range: Range<usize>,
    cfg: &ModelConfig,
) -> Result<MatchedLoss> {
    let hw = targets.hw();
    if range.is_empty() || range.end > targets.frames {
        return Err(Error::EmptyRange);
    }
    let cols = g.slice_cols(video_mask, range.start * hw, range.len() * hw);
    matched_loss(g, video_class, cols, targets, range, cfg)
}

/// `w_ce·ce + w_bce·bce + w_dice·dice` of a matched group.
pub fn weighted(g: &Graph, m: &MatchedLoss, cfg: &ModelConfig) -> Var {
    let a = g.scale(m.ce, cfg.w_ce);
    let b = g.scale(m.bce, cfg.w_bce);
    let c = g.scale(m.dice, cfg.w_dice);
    g.add(g.add(a, b), c)
}

/// InfoNCE between matched queries of a reference and a key frame.
///
/// Each reference row whose track also appears among the key rows is an
/// anchor; its positive is the key row of the same track and every other key
/// row is a negative. Rows are L2-normalised; the result is the mean over
/// anchors, or 0 when there are none or in offline mode.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_loss(
    g: &Graph,
    reference: Var,
    ref_tracks: &[usize],
    key: Var,
    key_tracks: &[usize],
    temperature: f64,
    mode: Mode,
) -> Result<Var> {
    let zero = || g.constant(Tensor::scalar(0.0));
    if mode == Mode::Offline {
        return Ok(zero());
    }
    let (rs, ks) = (g.shape(reference), g.shape(key));
    if rs.len() != 2 || ks.len() != 2 || rs[0] != ref_tracks.len() || ks[0] != key_tracks.len() || rs[1] != ks[1] {
        return Err(Error::Shape(format!("contrastive inputs {rs:?} / {ks:?}")));
    }
    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    for (i, tr) in ref_tracks.iter().enumerate() {
        if let Some(j) = key_tracks.iter().position(|k| k == tr) {
            anchors.push(i);
            positives.push(j);
        }
    }
    if anchors.is_empty() {
        return Ok(zero());
    }
    let b = key_tracks.len();
    let r = g.l2_normalize_rows(g.gather0(reference, &anchors));
    let k = g.l2_normalize_rows(key);
    let sim = g.scale(g.matmul_t(r, false, k, true), 1.0 / temperature);
    let lp = g.log_softmax_rows(sim);
    let index: Vec<usize> = positives.iter().enumerate().map(|(a, &j)| a * b + j).collect();
    let picked = g.gather_flat(lp, &index, &[anchors.len()]);
    Ok(g.scale(g.mean(picked), -1.0))
}

/// Video-level loss of one sub-clip at one decoder layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipLoss {
    pub layer: usize,
    pub start: usize,
    pub end: usize,
    pub loss: f64,
}

/// Every term of the objective, as plain values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_f: f64,
    pub ce_v: f64,
    pub bce_f: f64,
    pub bce_v: f64,
    pub dice_f: f64,
    pub dice_v: f64,
    pub contras: f64,
    pub per_clip: Vec<ClipLoss>,
    pub total: f64,
}

impl LossBreakdown {
    /// Named scalar components, for diagnostics.
    pub fn components(&self) -> [(&'static str, f64); 8] {
        [
            ("ce_f", self.ce_f),
            ("ce_v", self.ce_v),
            ("bce_f", self.bce_f),
            ("bce_v", self.bce_v),
            ("dice_f", self.dice_f),
            ("dice_v", self.dice_v),
            ("contras", self.contras),
            ("total", self.total),
        ]
    }
}

pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn sum_all(g: &Graph, vars: &[Var]) -> Var {
    match vars.split_first() {
        None => g.constant(Tensor::scalar(0.0)),
        Some((first, rest)) => rest.iter().fold(*first, |a, b| g.add(a, *b)),
    }
}

/// The full objective over every prediction set (deep supervision).
///
/// Frame-level terms are matched frame by frame; video-level terms are
/// matched independently on each sub-clip. The contrastive term pairs
/// consecutive frames of the last layer and is averaged over those pairs.
pub fn total_loss(
    g: &Graph,
    predictions: &[PredictionSet],
    final_frame_embeddings: Var,
    targets: &ClipTargets,
    cfg: &ModelConfig,
) -> Result<LossOutput> {
    let t = targets.frames;
    let hw = targets.hw();
    let n = cfg.num_queries;
    let k1 = cfg.num_classes + 1;
    let clips = subclip_partition(t, cfg.subclip_frames.min(t))?;
    let (mut ce_f, mut bce_f, mut dice_f) = (Vec::new(), Vec::new(), Vec::new());
    let (mut ce_v, mut bce_v, mut dice_v) = (Vec::new(), Vec::new(), Vec::new());
    let mut per_clip = Vec::new();
    let mut last_frame_matches: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for (li, pred) in predictions.iter().enumerate() {
        let last = li + 1 == predictions.len();
        for f in 0..t {
            let cls = g.reshape(g.narrow0(pred.frame_class, f, 1), &[n, k1]);
            let msk = g.reshape(g.narrow0(pred.frame_mask, f, 1), &[n, hw]);
            let single = ClipTargets {
                frames: 1,
                height: targets.height,
                width: targets.width,
                tracks: targets
                    .tracks
                    .iter()
                    .map(|tr| TargetTrack {
                        track_id: tr.track_id,
                        class: tr.class,
                        masks: vec![tr.masks[f].clone()],
                    })
                    .collect(),
            };
            let m = matched_loss(g, cls, msk, &single, 0..1, cfg)?;
            ce_f.push(m.ce);
            bce_f.push(m.bce);
            dice_f.push(m.dice);
            if last {
                last_frame_matches.push((m.assignment.queries(), m.track_ids.clone()));
            }
        }
        for r in &clips {
            let m = video_clip_loss(g, pred.video_class, pred.video_mask, targets, r.clone(), cfg)?;
            let w = weighted(g, &m, cfg);
            per_clip.push(ClipLoss {
                layer: pred.layer,
                start: r.start,
                end: r.end,
                loss: g.scalar(w),
            });
            ce_v.push(m.ce);
            bce_v.push(m.bce);
            dice_v.push(m.dice);
        }
    }

    let contras = if cfg.mode == Mode::Online && t > 1 {
        let c = g.shape(final_frame_embeddings)[2];
        let mut terms = Vec::new();
        for f in 0..t - 1 {
            let (rq, rt) = &last_frame_matches[f];
            let (kq, kt) = &last_frame_matches[f + 1];
            if rq.is_empty() || kq.is_empty() {
                continue;
            }
            let rows = |frame: usize, q: &[usize]| {
                let e = g.reshape(g.narrow0(final_frame_embeddings, frame, 1), &[n, c]);
                g.gather0(e, q)
            };
            let term = contrastive_loss(
                g,
                rows(f, rq),
                rt,
                rows(f + 1, kq),
                kt,
                cfg.contrastive_temperature,
                cfg.mode,
            )?;
            terms.push(term);
        }
        if terms.is_empty() {
            g.constant(Tensor::scalar(0.0))
        } else {
            let k = terms.len() as f64;
            g.scale(sum_all(g, &terms), 1.0 / k)
        }
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    let parts = [
        sum_all(g, &ce_f),
        sum_all(g, &ce_v),
        sum_all(g, &bce_f),
        sum_all(g, &bce_v),
        sum_all(g, &dice_f),
        sum_all(g, &dice_v),
    ];
    let [cf, cv, bf, bv, df, dv] = parts;
    let total = sum_all(
        g,
        &[
            g.scale(g.add(cf, cv), cfg.w_ce),
            g.scale(g.add(bf, bv), cfg.w_bce),
            g.scale(g.add(df, dv), cfg.w_dice),
            g.scale(contras, cfg.w_contras),
        ],
    );
    let breakdown = LossBreakdown {
        ce_f: g.scalar(cf),
        ce_v: g.scalar(cv),
        bce_f: g.scalar(bf),
        bce_v: g.scalar(bv),
        dice_f: g.scalar(df),
        dice_v: g.scalar(dv),
        contras: g.scalar(contras),
        per_clip,
        total: g.scalar(total),
    };
    Ok(LossOutput { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::params::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injections, summing in row order.
    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.len() {
                *best = best.min(acc);
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    go(cost, row + 1, used, acc + cost[row][j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        let n = cost.first().map_or(0, Vec::len);
        go(cost, 0, &mut vec![false; n], 0.0, &mut best);
        if cost.is_empty() {
            0.0
        } else {
            best
        }
    }

    #[test]
    fn small_matching_goldens() {
        let a = hungarian_match(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
        let z = hungarian_match(&vec![vec![0.0; 5]; 3]).unwrap();
        assert_eq!(z.queries(), vec![0, 1, 2]);
        assert!(matches!(
            hungarian_match(&vec![vec![0.0; 2]; 3]),
            Err(Error::TooManyTargets { targets: 3, queries: 2 })
        ));
        let empty = hungarian_match(&[]).unwrap();
        assert!(empty.pairs.is_empty() && empty.total_cost == 0.0);
    }

    #[test]
    fn ties_resolve_to_the_smallest_assignment() {
        // Two optimal assignments: [1, 0] and [0, 1] are both 2; [0, 1] wins.
        let a = hungarian_match(&[vec![1.0, 1.0, 5.0], vec![1.0, 1.0, 5.0]]).unwrap();
        assert_eq!(a.queries(), vec![0, 1]);
        let b = hungarian_match(&[vec![3.0, 0.0, 0.0], vec![0.0, 3.0, 3.0]]).unwrap();
        assert_eq!(b.queries(), vec![1, 0]);
    }

    #[test]
    fn random_matrices_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let cost: Vec<Vec<f64>> = (0..6).map(|_| (0..10).map(|_| rng.random::<f64>()).collect()).collect();
            assert_eq!(hungarian_match(&cost).unwrap().total_cost, brute_force(&cost));
        }
    }

    proptest! {
        #[test]
        fn matching_is_optimal_and_injective(
            g in 0usize..=6,
            extra in 0usize..=2,
            seed in any::<u64>(),
            integer in any::<bool>(),
        ) {
            let n = (g + extra).clamp(1, 8);
            let g = g.min(n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<Vec<f64>> = (0..g)
                .map(|_| (0..n).map(|_| if integer { rng.random_range(0..4) as f64 } else { rng.random::<f64>() * 10.0 - 5.0 }).collect())
                .collect();
            let a = hungarian_match(&cost).unwrap();
            prop_assert_eq!(a.pairs.len(), g);
            let mut qs = a.queries();
            qs.sort_unstable();
            qs.dedup();
            prop_assert_eq!(qs.len(), g);
            let bf = brute_force(&cost);
            prop_assert!((a.total_cost - bf).abs() <= 1e-9 * bf.abs().max(1.0));
        }
    }

    #[test]
    fn subclip_windows() {
        assert_eq!(subclip_partition(6, 3).unwrap(), vec![0..3, 3..6]);
        assert_eq!(subclip_partition(5, 3).unwrap(), vec![0..3, 2..5]);
        assert_eq!(subclip_partition(4, 1).unwrap(), vec![0..1, 1..2, 2..3, 3..4]);
        assert_eq!(subclip_partition(4, 4).unwrap(), vec![0..4]);
        assert!(subclip_partition(2, 3).is_err());
        assert!(subclip_partition(2, 0).is_err());
    }

    fn eval_scalar(f: impl Fn(&Graph) -> Result<Var>) -> f64 {
        let g = Graph::new();
        let v = f(&g).unwrap();
        g.scalar(v)
    }

    #[test]
    fn dice_goldens() {
        let big = 60.0;
        let gt = Tensor::new(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]);
        let on = Tensor::new(&[1, 4], vec![big, big, -big, -big]);
        let off = Tensor::new(&[1, 4], vec![-big, -big, big, big]);
        assert!(eval_scalar(|g| dice_loss(g, g.constant(on.clone()), &gt)) < 1e-6);
        assert!((eval_scalar(|g| dice_loss(g, g.constant(off.clone()), &gt)) - 1.0).abs() < 1e-6);
        // σ(pred) is the indicator of 4 pixels, 2 of them shared with 4 gt pixels.
        let gt = Tensor::new(&[1, 6], vec![1., 1., 1., 1., 0., 0.]);
        let pred = Tensor::new(&[1, 6], vec![-big, -big, big, big, big, big]);
        let d = eval_scalar(|g| dice_loss(g, g.constant(pred.clone()), &gt));
        assert!((d - 0.5).abs() < 1e-6, "{d}");
        assert!((dice_value(pred.data(), gt.data()) - d).abs() < 1e-12);
    }

    #[test]
    fn bce_and_ce_goldens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = Tensor::new(&[2, 3], (0..6).map(|_| f64::from(rng.random_range(0..2u8))).collect());
        let b = eval_scalar(|g| bce_loss(g, g.constant(Tensor::zeros(&[2, 3])), &gt));
        assert!((b - 2f64.ln()).abs() < 1e-15);
        let uniform = eval_scalar(|g| ce_loss(g, g.constant(Tensor::zeros(&[3, 4])), &[0, 2, 1], 0.1));
        assert!((uniform - 4f64.ln()).abs() < 1e-12);
        let mut sharp = vec![-50.0; 8];
        sharp[1] = 50.0;
        sharp[4 + 3] = 50.0;
        let sharp = Tensor::new(&[2, 4], sharp);
        assert!(eval_scalar(|g| ce_loss(g, g.constant(sharp.clone()), &[1, 3], 0.1)) < 1e-12);
        let g = Graph::new();
        let bad = ce_loss(&g, g.constant(Tensor::zeros(&[1, 4])), &[4], 0.1);
        assert!(matches!(bad, Err(Error::ClassOutOfRange { class: 4, max: 3 })));
    }

    #[test]
    fn no_object_rows_are_down_weighted() {
        // Row 0 targets class 0 (weight 1), row 1 targets no-object (weight 0.1).
        let logits = Tensor::new(&[2, 2], vec![0.3, -0.2, 1.0, 0.5]);
        let v = eval_scalar(|g| ce_loss(g, g.constant(logits.clone()), &[0, 1], 0.1));
        let lp = |row: &[f64], y: usize| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            row[y] - m - z.ln()
        };
        let expect = -(lp(&[0.3, -0.2], 0) + 0.1 * lp(&[1.0, 0.5], 1)) / 1.1;
        assert!((v - expect).abs() < 1e-14);
    }

    #[test]
    fn pair_cost_limits_and_symmetry() {
        let cfg = ModelConfig::desk_scale();
        let big = 60.0;
        let probs = [0.0, 1.0, 0.0, 0.0];
        let c = pair_cost(&probs, &[big, -big, -big], 1, &[1.0, 0.0, 0.0], &cfg).unwrap();
        assert!((c + cfg.w_ce).abs() < 1e-5, "{c}");
        assert!(matches!(pair_cost(&probs, &[], 1, &[], &cfg), Err(Error::EmptyRange)));
        let q = [0.3, -1.0, 2.0];
        let a = pair_cost(&[0.2, 0.3, 0.4, 0.1], &q, 2, &[1.0, 1.0, 0.0], &cfg).unwrap();
        let b = pair_cost(&[0.2, 0.3, 0.4, 0.1], &q, 2, &[1.0, 1.0, 0.0], &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cost_terms_match_an_independent_evaluation() {
        let cfg = ModelConfig::desk_scale();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let logits: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
                .collect();
            let masks: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..10).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect())
                .collect();
            for gc in 0..2 {
                let gt: Vec<f64> = (0..10).map(|_| f64::from(rng.random_range(0..2u8))).collect();
                for q in 0..3 {
                    let z: f64 = logits[q].iter().map(|v| v.exp()).sum();
                    let p = logits[q][gc].exp() / z;
                    let mut bce = 0.0;
                    let mut inter = 0.0;
                    let mut sp = 0.0;
                    for (x, y) in masks[q].iter().zip(&gt) {
                        let s = 1.0 / (1.0 + (-x).exp());
                        bce -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
                        inter += s * y;
                        sp += s;
                    }
                    let gs: f64 = gt.iter().sum();
                    let dice = 1.0 - 2.0 * inter / (sp + gs + DICE_EPS);
                    let expect = -2.0 * p + 5.0 * bce / 10.0 + 5.0 * dice;
                    let got = pair_cost(&softmax(&logits[q]), &masks[q], gc, &gt, &cfg).unwrap();
                    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn contrastive_goldens() {
        let g = Graph::new();
        let off = contrastive_loss(
            &g,
            g.constant(Tensor::zeros(&[1, 2])),
            &[0],
            g.constant(Tensor::zeros(&[1, 2])),
            &[0],
            1.0,
            Mode::Offline,
        )
        .unwrap();
        assert_eq!(g.scalar(off), 0.0);
        let e = Tensor::new(&[1, 3], vec![0.3, -0.4, 1.2]);
        let single = contrastive_loss(&g, g.constant(e.clone()), &[7], g.constant(e), &[7], 1.0, Mode::Online).unwrap();
        assert_eq!(g.scalar(single), 0.0);
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let two = contrastive_loss(
            &g,
            g.constant(eye.clone()),
            &[1, 2],
            g.constant(eye),
            &[1, 2],
            1.0,
            Mode::Online,
        )
        .unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((g.scalar(two) - expect).abs() < 1e-12);
        let none = contrastive_loss(
            &g,
            g.constant(Tensor::zeros(&[1, 2])),
            &[0],
            g.constant(Tensor::full(&[1, 2], 1.0)),
            &[5],
            1.0,
            Mode::Online,
        )
        .unwrap();
        assert_eq!(g.scalar(none), 0.0);
    }

    fn random_targets(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, tracks: usize) -> ClipTargets {
        ClipTargets {
            frames: t,
            height: h,
            width: w,
            tracks: (0..tracks)
                .map(|i| TargetTrack {
                    track_id: 10 + i,
                    class: rng.random_range(0..3),
                    masks: (0..t)
                        .map(|_| {
                            if rng.random::<f64>() < 0.2 {
                                None
                            } else {
                                let mut m: Vec<f64> =
                                    (0..h * w).map(|_| f64::from(rng.random::<f64>() < 0.3)).collect();
                                m[rng.random_range(0..h * w)] = 1.0;
                                Some(m)
                            }
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn pred_store(rng: &mut ChaCha8Rng, layers: usize, t: usize, n: usize, hw: usize, c: usize) -> ParamStore {
        let mut s = ParamStore::new();
        for l in 0..layers {
            s.insert(format!("fc{l}"), Tensor::randn(&[t, n, 4], 1.0, rng));
            s.insert(format!("fm{l}"), Tensor::randn(&[t, n, hw], 2.0, rng));
            s.insert(format!("vc{l}"), Tensor::randn(&[n, 4], 1.0, rng));
            s.insert(format!("vm{l}"), Tensor::randn(&[n, t * hw], 2.0, rng));
        }
        s.insert("emb", Tensor::randn(&[t, n, c], 1.0, rng));
        s
    }

    fn preds(p: &crate::params::Bound, layers: usize) -> Vec<PredictionSet> {
        (0..layers)
            .map(|l| PredictionSet {
                frame_class: p.get(&format!("fc{l}")),
                frame_mask: p.get(&format!("fm{l}")),
                video_class: p.get(&format!("vc{l}")),
                video_mask: p.get(&format!("vm{l}")),
                layer: l,
            })
            .collect()
    }

    fn tiny_cfg(t: usize, t_s: usize, n: usize) -> ModelConfig {
        ModelConfig {
            num_queries: n,
            hidden_dim: 8,
            top_k: 1,
            clip_frames: t,
            subclip_frames: t_s,
            ..ModelConfig::desk_scale()
        }
    }

    fn breakdown(store: &ParamStore, targets: &ClipTargets, cfg: &ModelConfig, layers: usize) -> LossBreakdown {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        total_loss(&g, &preds(&p, layers), p.get("emb"), targets, cfg)
            .unwrap()
            .breakdown
    }

    #[test]
    fn single_window_equals_undecomposed_video_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let targets = random_targets(&mut rng, 4, 4, 4, 2);
        let store = pred_store(&mut rng, 1, 4, 5, 16, 8);
        let cfg = tiny_cfg(4, 4, 5);
        let b = breakdown(&store, &targets, &cfg, 1);
        assert_eq!(b.per_clip.len(), 1);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let m = matched_loss(&g, p.get("vc0"), p.get("vm0"), &targets, 0..4, &cfg).unwrap();
        let whole = g.scalar(weighted(&g, &m, &cfg));
        assert!((b.per_clip[0].loss - whole).abs() <= 1e-6 * whole.abs());
        let agg = cfg.w_ce * b.ce_v + cfg.w_bce * b.bce_v + cfg.w_dice * b.dice_v;
        assert!((agg - whole).abs() <= 1e-12 * whole.abs());
    }

    #[test]
    fn singleton_windows_equal_per_frame_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let targets = random_targets(&mut rng, 3, 4, 4, 2);
        let store = pred_store(&mut rng, 1, 3, 4, 16, 8);
        let cfg = tiny_cfg(3, 1, 4);
        let b = breakdown(&store, &targets, &cfg, 1);
        assert_eq!(b.per_clip.len(), 3);
        let vm = store.get("vm0").unwrap();
        for (f, clip) in b.per_clip.iter().enumerate() {
            let g = Graph::new();
            let cls = g.constant(store.get("vc0").unwrap().clone());
            let rows: Vec<f64> = (0..4).flat_map(|q| vm.row(q)[f * 16..(f + 1) * 16].to_vec()).collect();
            let msk = g.constant(Tensor::new(&[4, 16], rows));
            let single = ClipTargets {
                frames: 1,
                tracks: targets
                    .tracks
                    .iter()
                    .map(|t| TargetTrack {
                        masks: vec![t.masks[f].clone()],
                        ..t.clone()
                    })
                    .collect(),
                ..targets.clone()
            };
            let m = matched_loss(&g, cls, msk, &single, 0..1, &cfg).unwrap();
            assert!((clip.loss - g.scalar(weighted(&g, &m, &cfg))).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_sum_equals_global_loss_when_assignments_agree() {
        // The same query predicts each instance in every frame, so each clip's
        // optimum coincides with the global one.
        let cfg = tiny_cfg(4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let targets = random_targets(&mut rng, 4, 3, 3, 2);
        let targets = ClipTargets {
            tracks: targets
                .tracks
                .into_iter()
                .map(|mut t| {
                    t.masks.iter_mut().for_each(|m| {
                        if m.is_none() {
                            *m = Some(vec![1.0; 9])
                        }
                    });
                    t
                })
                .collect(),
            ..targets
        };
        let mut vc = vec![0.0; 12];
        let mut vm = vec![-3.0; 3 * 36];
        for (q, tr) in targets.tracks.iter().enumerate() {
            vc[q * 4 + tr.class] = 4.0;
            for f in 0..4 {
                for (i, &y) in tr.masks[f].as_ref().unwrap().iter().enumerate() {
                    vm[q * 36 + f * 9 + i] = if y > 0.5 { 3.0 } else { -3.0 };
                }
            }
        }
        vc[2 * 4 + 3] = 4.0;
        let g = Graph::new();
        let cls = g.constant(Tensor::new(&[3, 4], vc));
        let msk = g.constant(Tensor::new(&[3, 36], vm));
        let whole = matched_loss(&g, cls, msk, &targets, 0..4, &cfg).unwrap();
        let mut clip_bce = 0.0;
        let mut clip_dice = 0.0;
        for r in subclip_partition(4, 2).unwrap() {
            let m = video_clip_loss(&g, cls, msk, &targets, r, &cfg).unwrap();
            assert_eq!(m.assignment.queries(), whole.assignment.queries());
            clip_bce += g.scalar(m.bce);
            clip_dice += g.scalar(m.dice);
        }
        // bce is a pixel mean, so halves average to the whole.
        assert!((clip_bce / 2.0 - g.scalar(whole.bce)).abs() < 1e-12);
        assert!(clip_dice >= 0.0 && g.scalar(whole.dice) >= 0.0);
    }

    #[test]
    fn instance_free_targets_leave_only_class_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let store = pred_store(&mut rng, 2, 3, 4, 16, 8);
        let targets = ClipTargets {
            frames: 3,
            height: 4,
            width: 4,
            tracks: vec![],
        };
        let cfg = ModelConfig {
            mode: Mode::Online,
            ..tiny_cfg(3, 3, 4)
        };
        let b = breakdown(&store, &targets, &cfg, 2);
        assert_eq!(
            (b.bce_f, b.bce_v, b.dice_f, b.dice_v, b.contras),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );
        assert!(b.ce_f > 0.0 && b.ce_v > 0.0);
        assert!((b.total - cfg.w_ce * (b.ce_f + b.ce_v)).abs() < 1e-12);
    }

    #[test]
    fn zero_mask_weights_cut_mask_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let store = pred_store(&mut rng, 1, 3, 4, 16, 8);
        let targets = random_targets(&mut rng, 3, 4, 4, 2);
        let cfg = ModelConfig {
            w_bce: 0.0,
            w_dice: 0.0,
            ..tiny_cfg(3, 3, 4)
        };
        let g = Graph::new();
        let p = store.bind(&g);
        let out = total_loss(&g, &preds(&p, 1), p.get("emb"), &targets, &cfg).unwrap();
        let grads = p.gradients(&g.backward(out.total));
        assert!(grads["fm0"].data().iter().all(|&v| v == 0.0));
        assert!(grads["vm0"].data().iter().all(|&v| v == 0.0));
        assert!(grads["fc0"].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn loss_is_invariant_to_target_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let store = pred_store(&mut rng, 2, 4, 5, 16, 8);
        let targets = random_targets(&mut rng, 4, 4, 4, 3);
        let cfg = ModelConfig {
            mode: Mode::Online,
            ..tiny_cfg(4, 3, 5)
        };
        let a = breakdown(&store, &targets, &cfg, 2);
        let mut rev = targets.clone();
        rev.tracks.reverse();
        let b = breakdown(&store, &rev, &cfg, 2);
        assert!((a.total - b.total).abs() <= 1e-6 * a.total.abs());
        assert!(a.contras > 0.0);
    }

    #[test]
    fn breakdown_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let store = pred_store(&mut rng, 2, 5, 4, 9, 8);
        let targets = random_targets(&mut rng, 5, 3, 3, 2);
        let cfg = ModelConfig {
            mode: Mode::Online,
            ..tiny_cfg(5, 3, 4)
        };
        let b = breakdown(&store, &targets, &cfg, 2);
        assert_eq!(b.per_clip.len(), 4);
        let clip_sum: f64 = b.per_clip.iter().map(|c| c.loss).sum();
        let video = cfg.w_ce * b.ce_v + cfg.w_bce * b.bce_v + cfg.w_dice * b.dice_v;
        assert!((clip_sum - video).abs() < 1e-9);
        let total = cfg.w_ce * (b.ce_f + b.ce_v)
            + cfg.w_bce * (b.bce_f + b.bce_v)
            + cfg.w_dice * (b.dice_f + b.dice_v)
            + cfg.w_contras * b.contras;
        assert!((total - b.total).abs() < 1e-9);
        for (_, v) in b.components() {
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let store = pred_store(&mut rng, 2, 3, 4, 256, 8);
        let targets = random_targets(&mut rng, 3, 16, 16, 2);
        let cfg = ModelConfig {
            mode: Mode::Online,
            ..tiny_cfg(3, 2, 4)
        };
        let report = check_gradients(
            &store,
            |g, p| total_loss(g, &preds(p, 2), p.get("emb"), &targets, &cfg).unwrap().total,
            60,
            1e-5,
            3,
        );
        assert!(report.nonzero_probes() >= 50);
        assert!(report.max_rel_err() <= 1e-4, "{:?}", report.worst());
    }
}
