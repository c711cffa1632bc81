//! Class and mask prediction heads shared by every decoder layer.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Frame,
    Video,
}

/// Predictions made from one decoder state.
///
/// `frame_mask` is `[T, N, h·w]` and `video_mask` is `[N, T·h·w]`; both are
/// logits at the pixel-embedding resolution.
#[derive(Clone, Copy, Debug)]
pub struct PredictionSet {
    pub frame_class: Var,
    pub frame_mask: Var,
    pub video_class: Var,
    pub video_mask: Var,
    pub layer: usize,
}

#[derive(Clone, Debug)]
pub struct Heads {
    frame_class: Linear,
    video_class: Linear,
    mask_embed: FeedForward,
    hidden_dim: usize,
    num_classes: usize,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        hidden_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let c = hidden_dim;
        Self {
            frame_class: Linear::new(store, &format!("{prefix}.frame_class"), c, num_classes + 1, rng),
            video_class: Linear::new(store, &format!("{prefix}.video_class"), c, num_classes + 1, rng),
            mask_embed: FeedForward::new(store, &format!("{prefix}.mask_embed"), c, c, c, rng),
            hidden_dim,
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn class_head(&self, level: Level) -> &Linear {
        match level {
            Level::Frame => &self.frame_class,
            Level::Video => &self.video_class,
        }
    }

    /// `[M, N, C] -> [M, N, K+1]` logits.
    pub fn classify(&self, g: &Graph, p: &Bound, embeddings: Var, level: Level) -> Var {
        self.class_head(level).forward(g, p, embeddings)
    }

    /// Maximum foreground softmax probability of every query in `embeddings`
    /// (`[.., C]`), read off plain values. No gradient flows through it.
    pub fn foreground_scores(&self, g: &Graph, p: &Bound, embeddings: Var, level: Level) -> Vec<f64> {
        let k1 = self.num_classes + 1;
        let logits = self.classify(g, p, embeddings, level);
        let values = g.value_of(logits);
        values
            .data()
            .chunks(k1)
            .map(|row| foreground_score(&softmax(row), self.num_classes))
            .collect()
    }

    /// Mask logits `⟨MLP(e_n), pixel_embed[t, y, x]⟩`.
    ///
    /// Frame level: `embeddings` is `[T, N, C]` and slice `t` meets frame `t`,
    /// giving `[T, N, h·w]`. Video level: `embeddings` is `[1, N, C]` (or
    /// `[N, C]`) and meets every frame, giving `[N, T·h·w]`.
    pub fn predict_masks(&self, g: &Graph, p: &Bound, embeddings: Var, pixel_embed: Var, level: Level) -> Result<Var> {
        let es = g.shape(embeddings);
        let ps = g.shape(pixel_embed);
        if ps.len() != 4 {
            return Err(Error::Shape(format!("pixel_embed must be [T, h, w, C], got {ps:?}")));
        }
        let c = *es.last().unwrap_or(&0);
        if c != ps[3] || c != self.hidden_dim {
            return Err(Error::Shape(format!(
                "embedding width {c} vs pixel width {} (model {})",
                ps[3], self.hidden_dim
            )));
        }
        let (t, hw) = (ps[0], ps[1] * ps[2]);
        let pe = g.reshape(pixel_embed, &[t * hw, c]);
        let mapped = self.mask_embed.forward(g, p, embeddings);
        match level {
            Level::Video => {
                let n = g.value_of(mapped).numel() / c;
                if es.len() == 3 && es[0] != 1 {
                    return Err(Error::Shape(format!("video embeddings must be [1, N, C], got {es:?}")));
                }
                let e = g.reshape(mapped, &[n, c]);
                Ok(g.matmul_t(e, false, pe, true))
            }
            Level::Frame => {
                if es.len() != 3 || es[0] != t {
                    return Err(Error::Shape(format!(
                        "frame embeddings must be [{t}, N, C], got {es:?}"
                    )));
                }
                let n = es[1];
                let per_frame: Vec<Var> = (0..t)
                    .map(|i| {
                        let e = g.reshape(g.narrow0(mapped, i, 1), &[n, c]);
                        let px = g.narrow0(pe, i * hw, hw);
                        let m = g.matmul_t(e, false, px, true);
                        g.reshape(m, &[1, n, hw])
                    })
                    .collect();
                Ok(if t == 1 { per_frame[0] } else { g.concat0(&per_frame) })
            }
        }
    }
}

/// Largest probability among the first `num_classes` entries.
pub fn foreground_score(probs: &[f64], num_classes: usize) -> f64 {
    probs[..num_classes].iter().copied().fold(0.0, f64::max)
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
