use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};
use syncvis::data_synth::{encode_png, frame_file_name, load_dataset, write_dataset, ScenarioSampler, VideoSample};
use syncvis::evaluator::{infer, predictions_from_json, TrackPrediction};
use syncvis::trainer::{
    ablate as run_ablation, ablation_csv, evaluate, partial_path, report_for, split_holdout, train as run_training,
    write_atomic, AblationParam, Checkpoint, TrainConfig,
};

use crate::{ensure_writable, overlay, publish_dir};

fn json_pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("value serialises");
    s.push('\n');
    s
}

pub fn gen_data(
    out: &Path,
    videos: usize,
    frames: usize,
    max_instances: usize,
    seed: u64,
    occlusion_rate: Option<f64>,
    force: bool,
) -> Result<()> {
    ensure_writable(out, force)?;
    let mut sampler = ScenarioSampler {
        frames,
        max_instances,
        ..ScenarioSampler::default()
    };
    if let Some(r) = occlusion_rate {
        sampler.occlusion_rate = r;
    }
    let samples = sampler.generate(videos, seed)?;
    let partial = partial_path(out);
    if partial.exists() {
        fs::remove_dir_all(&partial)?;
    }
    let manifest = write_dataset(&samples, &partial)?;
    let record = json!({
        "generator": sampler,
        "videos": videos,
        "seed": seed,
        "video_ids": manifest.video_ids,
        "num_annotations": manifest.num_annotations,
        "num_frames": manifest.num_frames,
    });
    fs::write(partial.join("manifest.json"), json_pretty(&record))?;
    publish_dir(&partial, out)?;
    println!(
        "wrote {} videos, {} frames, {} annotations to {}",
        videos,
        manifest.num_frames,
        manifest.num_annotations,
        out.display()
    );
    Ok(())
}

pub fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    let outcome = run_training(&cfg, data, out)?;
    let last = outcome.metrics.last().expect("at least one iteration");
    println!("trained {} iterations, final loss {:.4}", last.iter, last.total);
    if let Some(r) = &outcome.report {
        println!(
            "held-out ({} videos): AP {:.2} AP50 {:.2} AP75 {:.2} AR1 {:.2} AR10 {:.2} mean IoU {:.3}",
            r.videos, r.metrics.ap, r.metrics.ap50, r.metrics.ap75, r.metrics.ar1, r.metrics.ar10, r.quality.mean_iou
        );
    }
    println!(
        "checkpoint written to {}",
        out.join(syncvis::trainer::CHECKPOINT_FILE).display()
    );
    Ok(())
}

/// Ground truth clipped to the frame count the predictions of each video use.
fn clips_for_dump(videos: &[VideoSample], preds: &[TrackPrediction]) -> Result<Vec<VideoSample>> {
    let mut lengths: BTreeMap<&str, usize> = BTreeMap::new();
    for p in preds {
        let t = p.masks.len();
        if let Some(prev) = lengths.insert(p.video_id.as_str(), t) {
            if prev != t {
                anyhow::bail!("predictions for video {} disagree on the frame count", p.video_id);
            }
        }
    }
    Ok(videos
        .iter()
        .map(|v| {
            v.clip(
                0..lengths
                    .get(v.video_id.as_str())
                    .copied()
                    .unwrap_or(v.len())
                    .min(v.len()),
            )
        })
        .collect())
}

/// `ckpt` holds either a training checkpoint or a prediction dump.
pub fn eval(ckpt: &Path, data: &Path, report: &Path) -> Result<()> {
    let text = fs::read_to_string(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", ckpt.display()))?;
    let videos = load_dataset(data)?;
    let result = if value.is_array() {
        let preds = predictions_from_json(&text, ckpt)?;
        let clips = clips_for_dump(&videos, &preds)?;
        report_for(&preds, &clips)?
    } else {
        let ck = Checkpoint::from_json(&text, ckpt)?;
        let model = ck.model()?;
        evaluate(&model, &ck.params, &videos, ck.config.eval_frames)?
    };
    write_atomic(report, json_pretty(&result).as_bytes())?;
    println!(
        "AP {:.2} AP50 {:.2} AP75 {:.2} AR1 {:.2} AR10 {:.2} over {} videos",
        result.metrics.ap,
        result.metrics.ap50,
        result.metrics.ap75,
        result.metrics.ar1,
        result.metrics.ar10,
        result.videos
    );
    Ok(())
}

pub fn ablate(param: &str, values: &[String], config: &Path, data: &Path, out: &Path, parallel: bool) -> Result<()> {
    let param: AblationParam = param.parse()?;
    let base = TrainConfig::load(config)?;
    let (train_set, held_out) = split_holdout(load_dataset(data)?, base.holdout)?;
    fs::create_dir_all(out)?;
    let rows = run_ablation(param, values, &base, &train_set, &held_out, Some(out), parallel)?;
    let csv = ablation_csv(param, &rows);
    write_atomic(&out.join(format!("ablation_{}.csv", param.name())), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

pub fn visualize(ckpt: &Path, video: &str, data: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", ckpt.display()))?;
    let videos = load_dataset(data)?;
    let sample = videos
        .iter()
        .find(|v| v.video_id == video)
        .ok_or_else(|| syncvis::Error::UnknownVideoId(video.to_string()))?;
    let (clip, preds) = if value.is_array() {
        let preds: Vec<TrackPrediction> = predictions_from_json(&text, ckpt)?
            .into_iter()
            .filter(|p| p.video_id == video)
            .collect();
        (clips_for_dump(std::slice::from_ref(sample), &preds)?.remove(0), preds)
    } else {
        let ck = Checkpoint::from_json(&text, ckpt)?;
        let preds = infer(&ck.model()?, &ck.params, sample)?;
        (sample.clone(), preds)
    };
    let partial = partial_path(out);
    if partial.exists() {
        fs::remove_dir_all(&partial)?;
    }
    fs::create_dir_all(&partial)?;
    for (t, frame) in overlay::render(&clip, &preds).iter().enumerate() {
        encode_png(frame, &partial.join(frame_file_name(t)))?;
    }
    publish_dir(&partial, out)?;
    println!(
        "wrote {} frames with {} tracks to {}",
        clip.len(),
        preds.len(),
        out.display()
    );
    Ok(())
}
