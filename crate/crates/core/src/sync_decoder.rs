//! Transformer decoder that refines frame-level and video-level query
//! embeddings side by side and exchanges information between the two after
//! every layer.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{PyramidFeatures, LEVEL_STRIDES, PIXEL_STRIDE};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::heads::{Heads, Level, PredictionSet};
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Frame-level (`x_f`, `[T, N, C]`) and video-level (`x_v`, `[1, N, C]`)
/// embeddings after `layer` decoder layers.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingState {
    pub x_f: Var,
    pub x_v: Var,
    pub layer: usize,
}

/// Replicates the learned frame queries over `t` frames and takes the video
/// queries as they are.
pub fn init_state(
    g: &Graph,
    cfg: &ModelConfig,
    frame_query: Var,
    video_query: Var,
    t: usize,
) -> Result<EmbeddingState> {
    let want = vec![cfg.num_queries, cfg.hidden_dim];
    for (what, q) in [("frame", frame_query), ("video", video_query)] {
        let s = g.shape(q);
        if s != want {
            return Err(Error::Shape(format!("{what} queries are {s:?}, expected {want:?}")));
        }
    }
    if t == 0 {
        return Err(Error::Shape("clip has no frames".into()));
    }
    let (n, c) = (cfg.num_queries, cfg.hidden_dim);
    let fq = g.reshape(frame_query, &[1, n, c]);
    let x_f = if t == 1 { fq } else { g.gather0(fq, &vec![0; t]) };
    let x_v = g.reshape(video_query, &[1, n, c]);
    Ok(EmbeddingState { x_f, x_v, layer: 0 })
}

/// One pre-norm decoder block: masked cross-attention, self-attention and a
/// feed-forward network, each with a residual connection.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    ca_norm: LayerNorm,
    ca: MultiHeadAttention,
    sa_norm: LayerNorm,
    sa: MultiHeadAttention,
    ffn_norm: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (c, h) = (cfg.hidden_dim, cfg.num_heads);
        Self {
            ca_norm: LayerNorm::new(store, &format!("{prefix}.ca_norm"), c),
            ca: MultiHeadAttention::new(store, &format!("{prefix}.ca"), c, h, rng),
            sa_norm: LayerNorm::new(store, &format!("{prefix}.sa_norm"), c),
            sa: MultiHeadAttention::new(store, &format!("{prefix}.sa"), c, h, rng),
            ffn_norm: LayerNorm::new(store, &format!("{prefix}.ffn_norm"), c),
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), c, cfg.ffn_dim, c, rng),
        }
    }

    /// Parameter names of the three residual-branch output projections.
    pub fn output_projections(&self) -> Vec<String> {
        [
            self.ca.output_projection(),
            self.sa.output_projection(),
            self.ffn.output_projection(),
        ]
        .iter()
        .flat_map(|l| [l.weight_name().to_string(), l.bias_name().to_string()])
        .collect()
    }
}

/// Drops the mask of every query that would otherwise attend to nothing.
fn drop_empty_rows(mask: &[bool], tokens: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    for row in out.chunks_mut(tokens) {
        if !row.iter().any(|&b| b) {
            row.iter_mut().for_each(|b| *b = true);
        }
    }
    out
}

fn ensure_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value_of(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Applies one decoder block to `x`.
///
/// Frame level: `x` is `[T, N, C]` and slice `t` attends to the tokens of
/// frame `t` only. Video level: `x` is `[1, N, C]` and attends to the tokens
/// of every frame. `features` is `[T, h, w, C]`, `pos` is `[T·h·w, C]`, and
/// `attn_mask`, when present, holds one row of allowed tokens per query
/// (`T·N` rows of `h·w` for frames, `N` rows of `T·h·w` for the video).
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer_update(
    g: &Graph,
    p: &Bound,
    layer: &DecoderLayer,
    x: Var,
    features: Var,
    pos: &Tensor,
    attn_mask: Option<&[bool]>,
    level: Level,
) -> Result<Var> {
    let xs = g.shape(x);
    let fs = g.shape(features);
    if xs.len() != 3 || fs.len() != 4 || xs[2] != fs[3] {
        return Err(Error::Shape(format!("embeddings {xs:?} vs features {fs:?}")));
    }
    let (m, n, c) = (xs[0], xs[1], xs[2]);
    let (t, hw) = (fs[0], fs[1] * fs[2]);
    let expect_m = if level == Level::Frame { t } else { 1 };
    if m != expect_m {
        return Err(Error::Shape(format!(
            "{level:?}-level embeddings have {m} slices, expected {expect_m}"
        )));
    }
    if pos.shape() != [t * hw, c] {
        return Err(Error::Shape(format!("position table {:?}", pos.shape())));
    }
    let tokens = if level == Level::Frame { hw } else { t * hw };
    let mask = match attn_mask {
        Some(a) if a.len() != m * n * tokens => {
            return Err(Error::Shape(format!(
                "attention mask has {} entries, expected {}",
                a.len(),
                m * n * tokens
            )));
        }
        Some(a) => Some(drop_empty_rows(a, tokens)),
        None => None,
    };
    let feats = g.reshape(features, &[t * hw, c]);

    // Cross-attention.
    let slices: Vec<Var> = (0..m)
        .map(|i| {
            let xi = g.reshape(g.narrow0(x, i, 1), &[n, c]);
            let (mem, pos_i) = if level == Level::Frame {
                let rows = pos.data()[i * hw * c..(i + 1) * hw * c].to_vec();
                (g.narrow0(feats, i * hw, hw), Tensor::new(&[hw, c], rows))
            } else {
                (feats, pos.clone())
            };
            let allowed = mask.as_ref().map(|mk| &mk[i * n * tokens..(i + 1) * n * tokens]);
            let q = layer.ca_norm.forward(g, p, xi);
            let a = layer.ca.forward(g, p, q, mem, Some(&pos_i), allowed);
            let xi = g.add(xi, a);
            // Self-attention among the queries of this slice.
            let q = layer.sa_norm.forward(g, p, xi);
            let s = layer.sa.forward(g, p, q, q, None, None);
            g.add(xi, s)
        })
        .collect();
    let y = if m == 1 { slices[0] } else { g.concat0(&slices) };
    let y = g.reshape(y, &[m * n, c]);
    let h = layer.ffn_norm.forward(g, p, y);
    let y = g.add(y, layer.ffn.forward(g, p, h));
    let y = g.reshape(y, &[m, n, c]);
    ensure_finite(g, y, "decoder layer output")?;
    Ok(y)
}

/// Indices of the `k` highest scores, best first; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::TopK { k, n: scores.len() });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k);
    Ok(idx)
}

/// Per slice of `embeddings` (`[M, N, C]`), gathers the `k` rows with the
/// highest `scores` (`M×N`). Returns `[M, k, C]` and the chosen indices.
pub fn select_top_k(g: &Graph, embeddings: Var, scores: &[f64], k: usize) -> Result<(Var, Vec<Vec<usize>>)> {
    let s = g.shape(embeddings);
    if s.len() != 3 || scores.len() != s[0] * s[1] {
        return Err(Error::Shape(format!("scores for {s:?}: {} entries", scores.len())));
    }
    let (m, n, c) = (s[0], s[1], s[2]);
    let mut chosen = Vec::with_capacity(m);
    let mut flat = Vec::with_capacity(m * k);
    for i in 0..m {
        let idx = top_k_indices(&scores[i * n..(i + 1) * n], k)?;
        flat.extend(idx.iter().map(|&j| i * n + j));
        chosen.push(idx);
    }
    let rows = g.reshape(embeddings, &[m * n, c]);
    let picked = g.gather0(rows, &flat);
    Ok((g.reshape(picked, &[m, k, c]), chosen))
}

/// Parameters of the bidirectional frame/video exchange of one layer.
#[derive(Clone, Debug)]
pub struct ExchangeLayer {
    frame_norm: LayerNorm,
    frame_ca: MultiHeadAttention,
    video_norm: LayerNorm,
    video_ca: MultiHeadAttention,
    /// Maps selected video embeddings into keys for the frame update.
    ffn_vf: FeedForward,
    /// Maps selected frame embeddings into keys for the video update.
    ffn_fv: FeedForward,
}

impl ExchangeLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (c, h) = (cfg.hidden_dim, cfg.num_heads);
        Self {
            frame_norm: LayerNorm::new(store, &format!("{prefix}.frame_norm"), c),
            frame_ca: MultiHeadAttention::new(store, &format!("{prefix}.frame_ca"), c, h, rng),
            video_norm: LayerNorm::new(store, &format!("{prefix}.video_norm"), c),
            video_ca: MultiHeadAttention::new(store, &format!("{prefix}.video_ca"), c, h, rng),
            ffn_vf: FeedForward::new(store, &format!("{prefix}.ffn_vf"), c, 2 * c, c, rng),
            ffn_fv: FeedForward::new(store, &format!("{prefix}.ffn_fv"), c, 2 * c, c, rng),
        }
    }

    /// `x + MHA(LN(x), memory)` over the rows of `x` (`[R, C]`).
    fn attend(&self, g: &Graph, p: &Bound, level: Level, x: Var, memory: Var) -> Var {
        let (norm, ca) = match level {
            Level::Frame => (&self.frame_norm, &self.frame_ca),
            Level::Video => (&self.video_norm, &self.video_ca),
        };
        let q = norm.forward(g, p, x);
        g.add(x, ca.forward(g, p, q, memory, None, None))
    }
}

/// `λ·a + (1−λ)·x`.
fn momentum(g: &Graph, a: Var, x: Var, lambda: f64) -> Var {
    g.add(g.scale(a, lambda), g.scale(x, 1.0 - lambda))
}

fn exchange_frames(
    g: &Graph,
    p: &Bound,
    ex: &ExchangeLayer,
    state: &EmbeddingState,
    video_scores: &[f64],
    cfg: &ModelConfig,
) -> Result<Var> {
    let s = g.shape(state.x_f);
    let (t, n, c) = (s[0], s[1], s[2]);
    let (sel, _) = select_top_k(g, state.x_v, video_scores, cfg.top_k)?;
    let keys = ex.ffn_vf.forward(g, p, g.reshape(sel, &[cfg.top_k, c]));
    let xf = g.reshape(state.x_f, &[t * n, c]);
    let a = ex.attend(g, p, Level::Frame, xf, keys);
    Ok(g.reshape(momentum(g, a, xf, cfg.lambda), &[t, n, c]))
}

fn exchange_video(
    g: &Graph,
    p: &Bound,
    ex: &ExchangeLayer,
    state: &EmbeddingState,
    frame_scores: &[f64],
    cfg: &ModelConfig,
) -> Result<Var> {
    let s = g.shape(state.x_f);
    let (t, n, c) = (s[0], s[1], s[2]);
    let (sel, _) = select_top_k(g, state.x_f, frame_scores, cfg.top_k)?;
    let keys = ex.ffn_fv.forward(g, p, g.reshape(sel, &[t * cfg.top_k, c]));
    let xv = g.reshape(state.x_v, &[n, c]);
    let a = ex.attend(g, p, Level::Video, xv, keys);
    Ok(g.reshape(momentum(g, a, xv, cfg.lambda), &[1, n, c]))
}

/// Synchronous two-way exchange. Both directions read the pre-exchange
/// embeddings; `video_first` only changes the order in which they are built.
#[allow(clippy::too_many_arguments)]
fn exchange_ordered(
    g: &Graph,
    p: &Bound,
    ex: &ExchangeLayer,
    state: &EmbeddingState,
    frame_scores: &[f64],
    video_scores: &[f64],
    cfg: &ModelConfig,
    video_first: bool,
) -> Result<EmbeddingState> {
    if !cfg.sync_active() {
        return Ok(*state);
    }
    let s = g.shape(state.x_f);
    if frame_scores.len() != s[0] * s[1] || video_scores.len() != s[1] {
        return Err(Error::Shape("exchange scores do not match the state".into()));
    }
    let mode = cfg.sync_mode;
    let (x_f, x_v) = if video_first {
        let v = if mode.updates_video() {
            exchange_video(g, p, ex, state, frame_scores, cfg)?
        } else {
            state.x_v
        };
        let f = if mode.updates_frames() {
            exchange_frames(g, p, ex, state, video_scores, cfg)?
        } else {
            state.x_f
        };
        (f, v)
    } else {
        let f = if mode.updates_frames() {
            exchange_frames(g, p, ex, state, video_scores, cfg)?
        } else {
            state.x_f
        };
        let v = if mode.updates_video() {
            exchange_video(g, p, ex, state, frame_scores, cfg)?
        } else {
            state.x_v
        };
        (f, v)
    };
    ensure_finite(g, x_f, "frame embeddings after exchange")?;
    ensure_finite(g, x_v, "video embeddings after exchange")?;
    Ok(EmbeddingState {
        x_f,
        x_v,
        layer: state.layer,
    })
}

/// `x_f' = λ·CA_f(x_f, FFN_vf(top-k x_v)) + (1−λ)·x_f` and
/// `x_v' = λ·CA_v(x_v, FFN_fv(top-k x_f per frame)) + (1−λ)·x_v`, restricted
/// to the directions enabled by `cfg.sync_mode`. With `λ = 0` or no
/// direction enabled the state is returned untouched.
pub fn sync_exchange(
    g: &Graph,
    p: &Bound,
    ex: &ExchangeLayer,
    state: &EmbeddingState,
    frame_scores: &[f64],
    video_scores: &[f64],
    cfg: &ModelConfig,
) -> Result<EmbeddingState> {
    exchange_ordered(g, p, ex, state, frame_scores, video_scores, cfg, false)
}

fn sine_code(v: f64, dims: usize, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate().take(dims) {
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dims as f64);
        *o += if i % 2 == 0 { (v * freq).sin() } else { (v * freq).cos() };
    }
}

/// Fixed sinusoidal key positions `[T·h·w, C]`: rows in the first half of
/// the channels encode y, the second half x, and every channel additionally
/// carries the frame index.
pub fn position_table(t: usize, h: usize, w: usize, c: usize) -> Tensor {
    let half = c / 2;
    let scale = 2.0 * std::f64::consts::PI;
    let mut data = vec![0.0; t * h * w * c];
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let row = &mut data[((ti * h + y) * w + x) * c..][..c];
                sine_code((y as f64 + 0.5) / h as f64 * scale, half, &mut row[..half]);
                sine_code((x as f64 + 0.5) / w as f64 * scale, c - half, &mut row[half..]);
                sine_code(ti as f64, c, row);
            }
        }
    }
    Tensor::new(&[t * h * w, c], data)
}

/// Mask logits average-pooled by `factor` per frame and thresholded at 0.
/// `logits` holds `rows` rows of `frames` frames of `h×w`.
fn pooled_mask(logits: &[f64], rows: usize, frames: usize, h: usize, w: usize, factor: usize) -> Vec<bool> {
    let (ph, pw) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(rows * frames * ph * pw);
    let area = (factor * factor) as f64;
    for r in 0..rows {
        for f in 0..frames {
            let base = (r * frames + f) * h * w;
            for by in 0..ph {
                for bx in 0..pw {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        let row = base + (by * factor + dy) * w + bx * factor;
                        s += logits[row..row + factor].iter().sum::<f64>();
                    }
                    out.push(s / area > 0.0);
                }
            }
        }
    }
    out
}

/// The decoder: learned queries, per-layer blocks for each level, and the
/// per-layer exchange.
#[derive(Clone, Debug)]
pub struct SyncDecoder {
    cfg: ModelConfig,
    frame_query: String,
    video_query: String,
    frame_layers: Vec<DecoderLayer>,
    video_layers: Vec<DecoderLayer>,
    exchanges: Vec<ExchangeLayer>,
}

/// Every intermediate state and the predictions made from it, layer 0 first.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub states: Vec<EmbeddingState>,
    pub predictions: Vec<PredictionSet>,
}

impl SyncDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (n, c) = (cfg.num_queries, cfg.hidden_dim);
        let frame_query = format!("{prefix}.frame_query");
        let video_query = format!("{prefix}.video_query");
        store.insert(&frame_query, Tensor::randn(&[n, c], 1.0, rng));
        store.insert(&video_query, Tensor::randn(&[n, c], 1.0, rng));
        let mut frame_layers = Vec::new();
        let mut video_layers = Vec::new();
        let mut exchanges = Vec::new();
        for l in 0..cfg.num_layers {
            frame_layers.push(DecoderLayer::new(store, &format!("{prefix}.layer{l}.frame"), cfg, rng));
            video_layers.push(DecoderLayer::new(store, &format!("{prefix}.layer{l}.video"), cfg, rng));
            exchanges.push(ExchangeLayer::new(
                store,
                &format!("{prefix}.layer{l}.exchange"),
                cfg,
                rng,
            ));
        }
        Self {
            cfg: cfg.clone(),
            frame_query,
            video_query,
            frame_layers,
            video_layers,
            exchanges,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn frame_layers(&self) -> &[DecoderLayer] {
        &self.frame_layers
    }

    pub fn video_layers(&self) -> &[DecoderLayer] {
        &self.video_layers
    }

    pub fn exchanges(&self) -> &[ExchangeLayer] {
        &self.exchanges
    }

    pub fn query_names(&self) -> (&str, &str) {
        (&self.frame_query, &self.video_query)
    }

    /// Pyramid level used by layer `l` (0-based): coarsest first, cycling.
    pub fn level_for_layer(l: usize) -> usize {
        2 - l % 3
    }

    fn predict(
        &self,
        g: &Graph,
        p: &Bound,
        heads: &Heads,
        pyr: &PyramidFeatures,
        state: &EmbeddingState,
    ) -> Result<PredictionSet> {
        Ok(PredictionSet {
            frame_class: heads.classify(g, p, state.x_f, Level::Frame),
            frame_mask: heads.predict_masks(g, p, state.x_f, pyr.pixel_embed, Level::Frame)?,
            video_class: {
                let s = g.shape(state.x_v);
                g.reshape(
                    heads.classify(g, p, state.x_v, Level::Video),
                    &[s[1], heads.num_classes() + 1],
                )
            },
            video_mask: heads.predict_masks(g, p, state.x_v, pyr.pixel_embed, Level::Video)?,
            layer: state.layer,
        })
    }

    /// Attention masks for layer `l` from the previous predictions.
    fn attention_masks(
        &self,
        g: &Graph,
        pyr: &PyramidFeatures,
        prev: &PredictionSet,
        level: usize,
    ) -> (Vec<bool>, Vec<bool>) {
        let ps = g.shape(pyr.pixel_embed);
        let (t, h, w) = (ps[0], ps[1], ps[2]);
        let factor = LEVEL_STRIDES[level] / PIXEL_STRIDE;
        let n = self.cfg.num_queries;
        let frame = pooled_mask(g.value_of(prev.frame_mask).data(), t * n, 1, h, w, factor);
        let video = pooled_mask(g.value_of(prev.video_mask).data(), n, t, h, w, factor);
        (frame, video)
    }

    /// Runs every layer on `pyr`, returning `num_layers + 1` states and the
    /// predictions made from each.
    pub fn run(&self, g: &Graph, p: &Bound, heads: &Heads, pyr: &PyramidFeatures) -> Result<DecoderOutput> {
        let t = g.shape(pyr.pixel_embed)[0];
        let state = init_state(g, &self.cfg, p.get(&self.frame_query), p.get(&self.video_query), t)?;
        let mut states = vec![state];
        let mut predictions = vec![self.predict(g, p, heads, pyr, &state)?];
        let positions = self.positions(g, pyr);
        for l in 0..self.cfg.num_layers {
            let level = Self::level_for_layer(l);
            let (fmask, vmask) = self.attention_masks(g, pyr, predictions.last().unwrap(), level);
            let prev = states.last().unwrap();
            let feats = pyr.levels[level];
            let x_f = decoder_layer_update(
                g,
                p,
                &self.frame_layers[l],
                prev.x_f,
                feats,
                &positions[level],
                Some(&fmask),
                Level::Frame,
            )?;
            let x_v = decoder_layer_update(
                g,
                p,
                &self.video_layers[l],
                prev.x_v,
                feats,
                &positions[level],
                Some(&vmask),
                Level::Video,
            )?;
            let mid = EmbeddingState { x_f, x_v, layer: l + 1 };
            let next = if self.cfg.sync_active() {
                let fs = heads.foreground_scores(g, p, x_f, Level::Frame);
                let vs = heads.foreground_scores(g, p, x_v, Level::Video);
                sync_exchange(g, p, &self.exchanges[l], &mid, &fs, &vs, &self.cfg)?
            } else {
                mid
            };
            predictions.push(self.predict(g, p, heads, pyr, &next)?);
            states.push(next);
        }
        Ok(DecoderOutput { states, predictions })
    }

    fn positions(&self, g: &Graph, pyr: &PyramidFeatures) -> Vec<Tensor> {
        pyr.levels
            .iter()
            .map(|&v| {
                let s = g.shape(v);
                position_table(s[0], s[1], s[2], s[3])
            })
            .collect()
    }

    /// Video-query-only decoding with the same parameters: no frame-level
    /// embeddings and no exchange. Returns the video embeddings of every
    /// layer.
    pub fn run_video_only(&self, g: &Graph, p: &Bound, heads: &Heads, pyr: &PyramidFeatures) -> Result<Vec<Var>> {
        let ps = g.shape(pyr.pixel_embed);
        let (t, h, w) = (ps[0], ps[1], ps[2]);
        let (n, c) = (self.cfg.num_queries, self.cfg.hidden_dim);
        let positions = self.positions(g, pyr);
        let mut x = g.reshape(p.get(&self.video_query), &[1, n, c]);
        let mut out = vec![x];
        for l in 0..self.cfg.num_layers {
            let level = Self::level_for_layer(l);
            let logits = heads.predict_masks(g, p, x, pyr.pixel_embed, Level::Video)?;
            let factor = LEVEL_STRIDES[level] / PIXEL_STRIDE;
            let mask = pooled_mask(g.value_of(logits).data(), n, t, h, w, factor);
            x = decoder_layer_update(
                g,
                p,
                &self.video_layers[l],
                x,
                pyr.levels[level],
                &positions[level],
                Some(&mask),
                Level::Video,
            )?;
            out.push(x);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Backbone;
    use crate::config::SyncMode;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            num_queries: 4,
            hidden_dim: 8,
            num_layers: 2,
            top_k: 2,
            num_heads: 2,
            ffn_dim: 16,
            clip_frames: 2,
            subclip_frames: 2,
            ..ModelConfig::desk_scale()
        }
    }

    #[test]
    fn init_replicates_frame_queries() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let g = Graph::new();
        let fq = g.constant(q.clone());
        let vq = g.constant(Tensor::zeros(&[4, 8]));
        let s = init_state(&g, &cfg, fq, vq, 3).unwrap();
        let xf = g.value_of(s.x_f).clone();
        assert_eq!(xf.shape(), &[3, 4, 8]);
        for t in 0..3 {
            assert_eq!(&xf.data()[t * 32..(t + 1) * 32], q.data());
        }
        assert!(g.value_of(s.x_v).data().iter().all(|&v| v == 0.0));
        let one = init_state(&g, &cfg, fq, vq, 1).unwrap();
        assert_eq!(g.value_of(one.x_f).data(), q.data());
        assert!(init_state(&g, &cfg, vq, g.constant(Tensor::zeros(&[3, 8])), 1).is_err());
    }

    #[test]
    fn top_k_orders_and_breaks_ties() {
        assert_eq!(top_k_indices(&[0.9, 0.1, 0.8, 0.3, 0.2], 2).unwrap(), vec![0, 2]);
        assert_eq!(top_k_indices(&[0.5; 5], 3).unwrap(), vec![0, 1, 2]);
        assert!(matches!(top_k_indices(&[0.1, 0.2], 3), Err(Error::TopK { k: 3, n: 2 })));
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let v = g.constant(e.clone());
        let (sel, idx) = select_top_k(&g, v, &[0.3, 0.2, 0.1, 0.0, 0.5, 0.5], 3).unwrap();
        assert_eq!(idx, vec![vec![0, 1, 2], vec![1, 2, 0]]);
        let s = g.value_of(sel);
        assert_eq!(&s.data()[..12], &e.data()[..12]);
        assert_eq!(&s.data()[12..16], &e.data()[16..20]);
        assert_eq!(&s.data()[20..24], &e.data()[12..16]);
    }

    struct Fixture {
        cfg: ModelConfig,
        store: ParamStore,
        layer: DecoderLayer,
        exchange: ExchangeLayer,
    }

    fn fixture(cfg: ModelConfig) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = DecoderLayer::new(&mut store, "dl", &cfg, &mut rng);
        let exchange = ExchangeLayer::new(&mut store, "ex", &cfg, &mut rng);
        store.insert("x", Tensor::randn(&[2, 4, 8], 1.0, &mut rng));
        store.insert("xv", Tensor::randn(&[1, 4, 8], 1.0, &mut rng));
        store.insert("feat", Tensor::randn(&[2, 2, 2, 8], 1.0, &mut rng));
        Fixture {
            cfg,
            store,
            layer,
            exchange,
        }
    }

    #[test]
    fn all_empty_mask_equals_unmasked_attention() {
        let f = fixture(tiny_cfg());
        let pos = position_table(2, 2, 2, 8);
        for (x, level, rows, tokens) in [("x", Level::Frame, 8, 4), ("xv", Level::Video, 4, 8)] {
            let g = Graph::new();
            let p = f.store.bind_frozen(&g);
            let masked = vec![false; rows * tokens];
            let a =
                decoder_layer_update(&g, &p, &f.layer, p.get(x), p.get("feat"), &pos, Some(&masked), level).unwrap();
            let b = decoder_layer_update(&g, &p, &f.layer, p.get(x), p.get("feat"), &pos, None, level).unwrap();
            assert_eq!(g.value_of(a).data(), g.value_of(b).data());
        }
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let mut f = fixture(tiny_cfg());
        for name in f.layer.output_projections() {
            f.store
                .get_mut(&name)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let pos = position_table(2, 2, 2, 8);
        let g = Graph::new();
        let p = f.store.bind_frozen(&g);
        let y = decoder_layer_update(&g, &p, &f.layer, p.get("x"), p.get("feat"), &pos, None, Level::Frame).unwrap();
        assert_eq!(g.value_of(y).data(), f.store.get("x").unwrap().data());
    }

    #[test]
    fn layer_gradient_wrt_embeddings_matches_finite_differences() {
        let f = fixture(tiny_cfg());
        let pos = position_table(2, 2, 2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn(&[2, 4, 8], 1.0, &mut rng);
        // Only the embeddings are probed: the rest of the store is frozen by
        // binding it into a separate constant store inside the closure.
        let mut only_x = ParamStore::new();
        only_x.insert("x", f.store.get("x").unwrap().clone());
        let rest = f.store.clone();
        let report = check_gradients(
            &only_x,
            |g, p| {
                let r = rest.bind_frozen(g);
                let feat = r.get("feat");
                let y = decoder_layer_update(g, &r, &f.layer, p.get("x"), feat, &pos, None, Level::Frame).unwrap();
                g.sum(g.mul_const(y, &w))
            },
            50,
            1e-6,
            5,
        );
        assert!(report.max_rel_err() <= 1e-4, "{:?}", report.worst());
    }

    fn exchange_inputs(p: &Bound) -> (EmbeddingState, Vec<f64>, Vec<f64>) {
        let state = EmbeddingState {
            x_f: p.get("x"),
            x_v: p.get("xv"),
            layer: 1,
        };
        (
            state,
            vec![0.9, 0.2, 0.4, 0.1, 0.3, 0.8, 0.5, 0.6],
            vec![0.1, 0.7, 0.3, 0.9],
        )
    }

    #[test]
    fn zero_lambda_exchange_is_identity() {
        let f = fixture(ModelConfig {
            lambda: 0.0,
            ..tiny_cfg()
        });
        let g = Graph::new();
        let p = f.store.bind_frozen(&g);
        let (s, fs, vs) = exchange_inputs(&p);
        let before = g.len();
        let out = sync_exchange(&g, &p, &f.exchange, &s, &fs, &vs, &f.cfg).unwrap();
        assert_eq!((out.x_f, out.x_v), (s.x_f, s.x_v));
        assert_eq!(g.len(), before);
    }

    #[test]
    fn unit_lambda_drops_the_residual_term() {
        let f = fixture(ModelConfig {
            lambda: 1.0,
            ..tiny_cfg()
        });
        let g = Graph::new();
        let p = f.store.bind_frozen(&g);
        let (s, fs, vs) = exchange_inputs(&p);
        let out = sync_exchange(&g, &p, &f.exchange, &s, &fs, &vs, &f.cfg).unwrap();
        let (sel, _) = select_top_k(&g, s.x_v, &vs, 2).unwrap();
        let keys = f.exchange.ffn_vf.forward(&g, &p, g.reshape(sel, &[2, 8]));
        let ca = f.exchange.attend(&g, &p, Level::Frame, g.reshape(s.x_f, &[8, 8]), keys);
        assert_eq!(g.value_of(out.x_f).data(), g.value_of(ca).data());
    }

    #[test]
    fn exchange_is_order_independent() {
        let f = fixture(ModelConfig {
            lambda: 0.3,
            ..tiny_cfg()
        });
        let g = Graph::new();
        let p = f.store.bind_frozen(&g);
        let (s, fs, vs) = exchange_inputs(&p);
        let a = exchange_ordered(&g, &p, &f.exchange, &s, &fs, &vs, &f.cfg, false).unwrap();
        let b = exchange_ordered(&g, &p, &f.exchange, &s, &fs, &vs, &f.cfg, true).unwrap();
        assert_eq!(g.value_of(a.x_f).data(), g.value_of(b.x_f).data());
        assert_eq!(g.value_of(a.x_v).data(), g.value_of(b.x_v).data());
    }

    #[test]
    fn one_directional_modes_leave_the_other_level() {
        for mode in [SyncMode::FrameToVideo, SyncMode::VideoToFrame] {
            let f = fixture(ModelConfig {
                sync_mode: mode,
                ..tiny_cfg()
            });
            let g = Graph::new();
            let p = f.store.bind_frozen(&g);
            let (s, fs, vs) = exchange_inputs(&p);
            let out = sync_exchange(&g, &p, &f.exchange, &s, &fs, &vs, &f.cfg).unwrap();
            assert_eq!(out.x_f == s.x_f, mode == SyncMode::FrameToVideo);
            assert_eq!(out.x_v == s.x_v, mode == SyncMode::VideoToFrame);
        }
    }

    struct Model {
        store: ParamStore,
        backbone: Backbone,
        decoder: SyncDecoder,
        heads: Heads,
    }

    fn model(cfg: &ModelConfig, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, "bb", cfg.hidden_dim, &mut rng);
        let decoder = SyncDecoder::new(&mut store, "dec", cfg, &mut rng);
        let heads = Heads::new(&mut store, "heads", cfg.hidden_dim, cfg.num_classes, &mut rng);
        Model {
            store,
            backbone,
            decoder,
            heads,
        }
    }

    fn frames(t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Tensor::uniform(&[t, 32, 32, 3], 0.5, &mut rng);
        Tensor::new(&[t, 32, 32, 3], u.data().iter().map(|v| v + 0.5).collect())
    }

    #[test]
    fn zero_layers_return_the_initial_state() {
        let cfg = ModelConfig {
            num_layers: 0,
            ..tiny_cfg()
        };
        let m = model(&cfg, 1);
        let g = Graph::new();
        let p = m.store.bind_frozen(&g);
        let pyr = m.backbone.extract_pyramid(&g, &p, g.constant(frames(2, 1))).unwrap();
        let out = m.decoder.run(&g, &p, &m.heads, &pyr).unwrap();
        assert_eq!(out.states.len(), 1);
        assert_eq!(out.predictions.len(), 1);
        assert_eq!(out.states[0].layer, 0);
    }

    #[test]
    fn zero_lambda_video_trajectory_matches_video_only_decoder() {
        let cfg = ModelConfig {
            lambda: 0.0,
            num_layers: 3,
            ..tiny_cfg()
        };
        let m = model(&cfg, 2);
        let g = Graph::new();
        let p = m.store.bind_frozen(&g);
        let pyr = m.backbone.extract_pyramid(&g, &p, g.constant(frames(2, 2))).unwrap();
        let out = m.decoder.run(&g, &p, &m.heads, &pyr).unwrap();
        let baseline = m.decoder.run_video_only(&g, &p, &m.heads, &pyr).unwrap();
        assert_eq!(baseline.len(), out.states.len());
        for (s, b) in out.states.iter().zip(&baseline) {
            assert_eq!(g.value_of(s.x_v).data(), g.value_of(*b).data());
        }
    }

    #[test]
    fn sync_none_matches_zero_lambda_bitwise() {
        let a_cfg = ModelConfig {
            lambda: 0.0,
            ..tiny_cfg()
        };
        let b_cfg = ModelConfig {
            sync_mode: SyncMode::None,
            ..tiny_cfg()
        };
        let (a, b) = (model(&a_cfg, 3), model(&b_cfg, 3));
        let run = |m: &Model| {
            let g = Graph::new();
            let p = m.store.bind_frozen(&g);
            let pyr = m.backbone.extract_pyramid(&g, &p, g.constant(frames(2, 3))).unwrap();
            let out = m.decoder.run(&g, &p, &m.heads, &pyr).unwrap();
            let last = out.states.last().unwrap();
            let r = (g.value_of(last.x_f).clone(), g.value_of(last.x_v).clone());
            r
        };
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn query_permutation_permutes_outputs() {
        let cfg = tiny_cfg();
        let m = model(&cfg, 4);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = m.store.clone();
        for name in ["dec.frame_query", "dec.video_query"] {
            let q = m.store.get(name).unwrap();
            let mut data = Vec::new();
            for &i in &perm {
                data.extend_from_slice(q.row(i));
            }
            *permuted.get_mut(name).unwrap() = Tensor::new(&[4, 8], data);
        }
        let run = |store: &ParamStore| {
            let g = Graph::new();
            let p = store.bind_frozen(&g);
            let pyr = m.backbone.extract_pyramid(&g, &p, g.constant(frames(2, 4))).unwrap();
            let out = m.decoder.run(&g, &p, &m.heads, &pyr).unwrap();
            let last = out.states.last().unwrap();
            let r = (g.value_of(last.x_f).clone(), g.value_of(last.x_v).clone());
            r
        };
        let (af, av) = run(&m.store);
        let (bf, bv) = run(&permuted);
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((bv.data()[k * 8 + c] - av.data()[i * 8 + c]).abs() < 1e-9);
                for t in 0..2 {
                    let (bk, ai) = ((t * 4 + k) * 8 + c, (t * 4 + i) * 8 + c);
                    assert!((bf.data()[bk] - af.data()[ai]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn full_decoder_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            lambda: 0.3,
            ..tiny_cfg()
        };
        let m = model(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        for (name, t) in m.store.iter() {
            if !name.starts_with("bb.") {
                store.insert(name.clone(), t.clone());
            }
        }
        // Pyramid features enter as parameters so their gradients are probed too.
        let bbstore = m.store.clone();
        let (levels, pix) = {
            let g = Graph::new();
            let p = bbstore.bind_frozen(&g);
            let pyr = m.backbone.extract_pyramid(&g, &p, g.constant(frames(2, 6))).unwrap();
            let lv: Vec<Tensor> = pyr.levels.iter().map(|v| g.value_of(*v).clone()).collect();
            let px = g.value_of(pyr.pixel_embed).clone();
            (lv, px)
        };
        for (i, t) in levels.iter().enumerate() {
            store.insert(format!("feat{i}"), t.clone());
        }
        store.insert("pix", pix);
        let weights: Vec<(Tensor, Tensor)> = (0..=2)
            .map(|_| {
                (
                    Tensor::randn(&[2, 4, 8], 1.0, &mut rng),
                    Tensor::randn(&[1, 4, 8], 1.0, &mut rng),
                )
            })
            .collect();
        let report = check_gradients(
            &store,
            |g, p| {
                let pyr = PyramidFeatures {
                    levels: [p.get("feat0"), p.get("feat1"), p.get("feat2")],
                    pixel_embed: p.get("pix"),
                };
                let out = m.decoder.run(g, p, &m.heads, &pyr).unwrap();
                let terms: Vec<Var> = out
                    .states
                    .iter()
                    .zip(&weights)
                    .map(|(s, (wf, wv))| g.add(g.sum(g.mul_const(s.x_f, wf)), g.sum(g.mul_const(s.x_v, wv))))
                    .collect();
                terms[1..].iter().fold(terms[0], |a, b| g.add(a, *b))
            },
            60,
            1e-5,
            8,
        );
        assert!(report.nonzero_probes() >= 50);
        assert!(report.max_rel_err() <= 1e-4, "{:?}", report.worst());
    }
}
