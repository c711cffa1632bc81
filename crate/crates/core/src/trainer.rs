//! Training loop, checkpoints, held-out evaluation and ablation sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::Graph;
use crate::config::{ModelConfig, SyncMode};
use crate::data_synth::{load_dataset, VideoSample};
use crate::error::{Error, Result};
use crate::evaluator::{compute_ap, infer, instance_quality, EvalResult, InstanceQuality, TrackPrediction};
use crate::matching::LossBreakdown;
use crate::model::SyncVisModel;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    /// Only "adamw" is implemented.
    pub optimizer: String,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Random horizontal mirroring and colour-channel permutation of each
    /// training clip.
    #[serde(default = "default_augment")]
    pub augment: bool,
    pub weight_decay: f64,
    /// Global gradient-norm threshold; 0 disables clipping.
    pub grad_clip: f64,
    pub iterations: usize,
    /// Videos per optimisation step.
    pub batch_size: usize,
    pub seed: u64,
    /// Iterations between checkpoints (and held-out evaluations).
    pub eval_interval: usize,
    /// Number of videos, last in id order, held out from training.
    pub holdout: usize,
    /// Leading frames of each held-out video used for evaluation, whatever
    /// the training clip length.
    #[serde(default = "default_eval_frames")]
    pub eval_frames: usize,
}

fn default_eval_frames() -> usize {
    8
}

fn default_augment() -> bool {
    true
}

/// Learning-rate multiplier over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from the base rate down to zero at the last iteration.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Multiplier for 1-based `iteration` of `total`.
    pub fn factor(self, iteration: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let progress = (iteration - 1) as f64 / total.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk_scale(),
            optimizer: "adamw".into(),
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::default(),
            augment: default_augment(),
            weight_decay: 0.05,
            grad_clip: 1.0,
            iterations: 2000,
            batch_size: 2,
            seed: 0,
            eval_interval: 2000,
            holdout: 50,
            eval_frames: default_eval_frames(),
        }
    }
}

impl TrainConfig {
    /// Optimiser values at the original scale; too slow to train here.
    pub fn paper_scale() -> Self {
        Self {
            model: ModelConfig::paper_scale(),
            learning_rate: 5e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.optimizer != "adamw" {
            return Err(Error::BadValue {
                key: "optimizer".into(),
                value: self.optimizer.clone(),
            });
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be non-negative");
        }
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be positive");
        }
        if self.eval_frames == 0 {
            return bad("eval_frames must be positive");
        }
        Ok(())
    }

    fn to_object(&self) -> serde_json::Map<String, Value> {
        match serde_json::to_value(self).expect("config serialises") {
            Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        }
    }

    /// Overrides one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut obj = self.to_object();
        let bad = || Error::BadValue {
            key: key.into(),
            value: value.into(),
        };
        let slot = obj
            .get_mut(key)
            .ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
        *slot = match slot {
            Value::String(_) => Value::String(value.into()),
            Value::Number(n) if n.is_f64() => {
                let v: f64 = value.parse().map_err(|_| bad())?;
                serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?
            }
            Value::Number(_) => Value::Number(value.parse::<u64>().map_err(|_| bad())?.into()),
            Value::Bool(_) => Value::Bool(value.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        *self = serde_json::from_value(Value::Object(obj)).map_err(|_| bad())?;
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its value, one per line, in key order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_object() {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// Decoupled weight decay Adam. Decay applies to matrices and kernels only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in store.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *w -= self.learning_rate * (update + decay * *w);
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub iter: usize,
    pub ce_f: f64,
    pub ce_v: f64,
    pub bce_f: f64,
    pub bce_v: f64,
    pub dice_f: f64,
    pub dice_v: f64,
    pub contras: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub iteration: usize,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serialises");
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|source| Error::Json {
            path: origin.to_path_buf(),
            source,
        })?;
        match value.get("format_version").and_then(Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_FORMAT_VERSION) => {}
            Some(v) => return Err(Error::Checkpoint(format!("unsupported format version {v}"))),
            None => return Err(Error::Checkpoint("missing format_version".into())),
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|source| Error::Json {
            path: origin.to_path_buf(),
            source,
        })?;
        ck.config.validate()?;
        Ok(ck)
    }

    /// The model this checkpoint's parameters belong to.
    pub fn model(&self) -> Result<SyncVisModel> {
        SyncVisModel::for_store(&self.config.model, &self.params)
    }
}

/// Writes `path` through a `.partial` sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let partial = partial_path(path);
    fs::write(&partial, bytes).map_err(|e| Error::io(&partial, e))?;
    fs::rename(&partial, path).map_err(|e| Error::io(path, e))
}

pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Splits videos, sorted by id, into training and held-out parts.
pub fn split_holdout(mut videos: Vec<VideoSample>, holdout: usize) -> Result<(Vec<VideoSample>, Vec<VideoSample>)> {
    if holdout >= videos.len() {
        return Err(Error::Config(format!(
            "holdout of {holdout} leaves no training videos out of {}",
            videos.len()
        )));
    }
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let held = videos.split_off(videos.len() - holdout);
    Ok((videos, held))
}

/// Held-out metrics for one model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: EvalResult,
    pub quality: InstanceQuality,
    pub videos: usize,
}

/// First `frames` frames of each video, the window every evaluation uses.
pub fn evaluation_clips(videos: &[VideoSample], frames: usize) -> Vec<VideoSample> {
    videos.iter().map(|v| v.clip(0..frames.min(v.len()))).collect()
}

pub fn predict_all(model: &SyncVisModel, store: &ParamStore, clips: &[VideoSample]) -> Result<Vec<TrackPrediction>> {
    let mut out = Vec::new();
    for c in clips {
        out.extend(infer(model, store, c)?);
    }
    Ok(out)
}

pub fn evaluate(model: &SyncVisModel, store: &ParamStore, videos: &[VideoSample], frames: usize) -> Result<EvalReport> {
    let clips = evaluation_clips(videos, frames);
    let preds = predict_all(model, store, &clips)?;
    report_for(&preds, &clips)
}

pub fn report_for(preds: &[TrackPrediction], clips: &[VideoSample]) -> Result<EvalReport> {
    Ok(EvalReport {
        metrics: compute_ap(preds, clips)?,
        quality: instance_quality(preds, clips)?,
        videos: clips.len(),
    })
}

/// In-memory training state.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: SyncVisModel,
    pub store: ParamStore,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, store) = SyncVisModel::init(&config.model, config.seed)?;
        let optimizer = AdamW::new(config.learning_rate, config.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
        Ok(Self {
            config,
            model,
            store,
            optimizer,
            rng,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    fn sample_clip(&mut self, videos: &[VideoSample]) -> Result<VideoSample> {
        let t = self.config.model.clip_frames;
        let v = &videos[self.rng.random_range(0..videos.len())];
        if v.len() < t {
            return Err(Error::Config(format!(
                "video {} has {} frames, clips need {t}",
                v.video_id,
                v.len()
            )));
        }
        let start = self.rng.random_range(0..=v.len() - t);
        let clip = v.clip(start..start + t);
        if !self.config.augment {
            return Ok(clip);
        }
        let transform = self.rng.random_range(0..2);
        let mut channels = [0, 1, 2];
        channels.shuffle(&mut self.rng);
        Ok(clip.transformed(transform, channels))
    }

    /// One optimisation step on a freshly sampled batch.
    pub fn step(&mut self, videos: &[VideoSample]) -> Result<MetricRecord> {
        if videos.is_empty() {
            return Err(Error::Config("no training videos".into()));
        }
        let iteration = self.iteration + 1;
        let batch = self.config.batch_size;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut mean = [0.0; 8];
        for _ in 0..batch {
            let clip = self.sample_clip(videos)?;
            let g = Graph::new();
            let p = self.store.bind(&g);
            let out = self.model.loss(&g, &p, &clip)?;
            check_finite(&out.breakdown, iteration)?;
            for (acc, (_, v)) in mean.iter_mut().zip(out.breakdown.components()) {
                *acc += v / batch as f64;
            }
            let gr = p.gradients(&g.backward(out.total));
            for (name, t) in gr {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, t);
                    }
                }
            }
        }
        let mut sq = 0.0;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v /= batch as f64;
                sq += *v * *v;
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration,
                component: "gradient".into(),
            });
        }
        let clip = self.config.grad_clip;
        if clip > 0.0 && grad_norm > clip {
            let s = clip / grad_norm;
            grads
                .values_mut()
                .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        self.optimizer.learning_rate =
            self.config.learning_rate * self.config.lr_schedule.factor(iteration, self.config.iterations);
        self.optimizer.step(&mut self.store, &grads);
        self.iteration = iteration;
        let [ce_f, ce_v, bce_f, bce_v, dice_f, dice_v, contras, total] = mean;
        Ok(MetricRecord {
            iter: iteration,
            ce_f,
            ce_v,
            bce_f,
            bce_v,
            dice_f,
            dice_v,
            contras,
            total,
            grad_norm,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            iteration: self.iteration,
            params: self.store.clone(),
        }
    }
}

fn check_finite(b: &LossBreakdown, iteration: usize) -> Result<()> {
    match b.components().into_iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(Error::NonFiniteLoss {
            iteration,
            component: name.into(),
        }),
        None => Ok(()),
    }
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    /// Held-out evaluation after the final iteration, when videos were held out.
    pub report: Option<EvalReport>,
}

/// Trains on `train`, evaluating on `held_out` at every evaluation interval.
/// With `out`, writes the checkpoint, metrics log and evaluation log there.
pub fn train_on(
    config: &TrainConfig,
    train: &[VideoSample],
    held_out: &[VideoSample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut metrics = Vec::with_capacity(config.iterations);
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_atomic(&dir.join(CONFIG_FILE), config.to_text().as_bytes())?;
            let path = partial_path(&dir.join(METRICS_FILE));
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut evals = Vec::new();
    let mut report = None;
    for _ in 0..config.iterations {
        let rec = trainer.step(train)?;
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec).expect("record serialises"))
                .map_err(|e| Error::io(&*path, e))?;
        }
        if rec.iter % 50 == 0 || rec.iter == 1 {
            log::info!(
                "iter {} total {:.4} grad_norm {:.3}",
                rec.iter,
                rec.total,
                rec.grad_norm
            );
        }
        metrics.push(rec);
        let it = trainer.iteration();
        if it % config.eval_interval == 0 || it == config.iterations {
            if let Some(dir) = out {
                trainer.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
            if !held_out.is_empty() {
                let r = evaluate(&trainer.model, &trainer.store, held_out, config.eval_frames)?;
                log::info!(
                    "iter {it} held-out AP {:.2} mean IoU {:.3}",
                    r.metrics.ap,
                    r.quality.mean_iou
                );
                evals.push(serde_json::json!({ "iter": it, "report": r }));
                report = Some(r);
            }
        }
    }
    if let Some(dir) = out {
        if let Some((f, path)) = log.take() {
            drop(f);
            fs::rename(&path, dir.join(METRICS_FILE)).map_err(|e| Error::io(&path, e))?;
        }
        if !evals.is_empty() {
            let text: String = evals.iter().map(|e| format!("{e}\n")).collect();
            write_atomic(&dir.join(EVAL_FILE), text.as_bytes())?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        metrics,
        report,
    })
}

/// Loads `dataset_dir`, holds out the configured videos and trains.
pub fn train(config: &TrainConfig, dataset_dir: &Path, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let (train_set, held_out) = split_holdout(load_dataset(dataset_dir)?, config.holdout)?;
    train_on(config, &train_set, &held_out, Some(out))
}

/// Parameters a sweep can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationParam {
    ClipFrames,
    SubclipFrames,
    TopK,
    Lambda,
    SyncMode,
}

impl std::str::FromStr for AblationParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "T" => Self::ClipFrames,
            "T_s" => Self::SubclipFrames,
            "N_k" => Self::TopK,
            "lambda" => Self::Lambda,
            "sync_mode" => Self::SyncMode,
            _ => {
                return Err(Error::BadValue {
                    key: "param".into(),
                    value: s.into(),
                })
            }
        })
    }
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::ClipFrames => "T",
            Self::SubclipFrames => "T_s",
            Self::TopK => "N_k",
            Self::Lambda => "lambda",
            Self::SyncMode => "sync_mode",
        }
    }

    /// `base` with this parameter set to `value`. Lowering T also lowers
    /// T_s to at most T.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let bad = || Error::BadValue {
            key: self.name().into(),
            value: value.into(),
        };
        let mut cfg = base.clone();
        let m = &mut cfg.model;
        match self {
            Self::ClipFrames => {
                m.clip_frames = value.parse().map_err(|_| bad())?;
                m.subclip_frames = m.subclip_frames.min(m.clip_frames);
            }
            Self::SubclipFrames => m.subclip_frames = value.parse().map_err(|_| bad())?,
            Self::TopK => m.top_k = value.parse().map_err(|_| bad())?,
            Self::Lambda => m.lambda = value.parse().map_err(|_| bad())?,
            Self::SyncMode => m.sync_mode = value.parse::<SyncMode>().map_err(|_| bad())?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub report: EvalReport,
}

/// Trains one model per value with identical seeds and evaluates each on the
/// held-out videos. Every value is validated before any training starts.
/// `parallel` runs the values on separate threads; each run is unchanged.
pub fn ablate(
    param: AblationParam,
    values: &[String],
    base: &TrainConfig,
    train: &[VideoSample],
    held_out: &[VideoSample],
    out: Option<&Path>,
    parallel: bool,
) -> Result<Vec<AblationRow>> {
    if held_out.is_empty() {
        return Err(Error::Config("ablation needs held-out videos".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            param.apply(base, v).map(|c| TrainConfig {
                eval_interval: c.iterations,
                ..c
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let run = |value: &String, cfg: &TrainConfig| -> Result<AblationRow> {
        log::info!("ablation {}={value}", param.name());
        let dir = out.map(|d| d.join(format!("{}={value}", param.name())));
        let outcome = train_on(cfg, train, held_out, dir.as_deref())?;
        Ok(AblationRow {
            value: value.clone(),
            report: outcome.report.expect("held-out videos present"),
        })
    };
    if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = values
                .iter()
                .zip(&configs)
                .map(|(v, c)| s.spawn(move || run(v, c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation run panicked"))
                .collect()
        })
    } else {
        values.iter().zip(&configs).map(|(v, c)| run(v, c)).collect()
    }
}

pub fn ablation_csv(param: AblationParam, rows: &[AblationRow]) -> String {
    let mut s = format!("{},AP,AP50,AP75,AR1,AR10\n", param.name());
    for r in rows {
        let m = &r.report.metrics;
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            r.value, m.ap, m.ap50, m.ap75, m.ar1, m.ar10
        ));
    }
    s
}
