//! Scenario descriptions and the moving-shapes renderer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mask::BinaryMask;
use super::{Frame, InstanceTrack, VideoSample};
use crate::error::{Error, Result};

pub const MAX_INSTANCES: usize = 8;
pub const BACKGROUND_GRAY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle];

    /// One category per shape kind, numbered from 1.
    pub fn category_id(self) -> usize {
        match self {
            ShapeKind::Disk => 1,
            ShapeKind::Rectangle => 2,
            ShapeKind::Triangle => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
        }
    }

    /// Whether the pixel centre `(px, py)` lies inside a shape of this kind
    /// centred at `(cx, cy)` with extent `size`.
    pub fn covers(self, cx: f64, cy: f64, size: f64, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= size * size,
            ShapeKind::Rectangle => dx.abs() <= size && dy.abs() <= 0.6 * size,
            ShapeKind::Triangle => {
                // Apex up, base down; half-base = size.
                if dy < -size || dy > size {
                    return false;
                }
                let half = size * (dy + size) / (2.0 * size);
                dx.abs() <= half
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub kind: ShapeKind,
    /// Radius / half-extent in pixels.
    pub size: f64,
    pub color: [u8; 3],
    /// Centre at frame 0, `(x, y)` in pixels.
    pub start: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Frame at which the velocity flips sign.
    pub reverse_at: Option<usize>,
}

/// `back` is rendered overlapping `front` for frames `start..=end`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionEvent {
    pub front: usize,
    pub back: usize,
    pub start: usize,
    pub end: usize,
}

/// The instance is off-canvas for frames `start..=end` and keeps its track id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbsenceInterval {
    pub instance: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub video_id: String,
    pub instances: Vec<InstanceSpec>,
    pub occlusion_events: Vec<OcclusionEvent>,
    pub absence_intervals: Vec<AbsenceInterval>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub noise_amplitude: f64,
}

impl ScenarioSpec {
    /// A scenario with no instances and default noise.
    pub fn new(video_id: impl Into<String>, frames: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            video_id: video_id.into(),
            instances: Vec::new(),
            occlusion_events: Vec::new(),
            absence_intervals: Vec::new(),
            frames,
            height,
            width,
            seed,
            noise_amplitude: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Scenario(m));
        if self.frames == 0 {
            return bad("frame count must be positive".into());
        }
        if self.height == 0 || self.width == 0 {
            return bad("canvas must be non-empty".into());
        }
        if self.instances.len() > MAX_INSTANCES {
            return bad(format!("at most {MAX_INSTANCES} instances"));
        }
        let canvas = self.height.min(self.width) as f64;
        for (i, inst) in self.instances.iter().enumerate() {
            if !(inst.size > 0.0) || 2.0 * inst.size >= canvas {
                return bad(format!(
                    "instance {i} of size {} cannot fit in a {}x{} canvas",
                    inst.size, self.height, self.width
                ));
            }
            if !inst.start.iter().chain(&inst.velocity).all(|v| v.is_finite()) {
                return bad(format!("instance {i} has non-finite motion"));
            }
        }
        let n = self.instances.len();
        for e in &self.occlusion_events {
            if e.front >= n || e.back >= n || e.front >= e.back {
                return bad(format!(
                    "occlusion event needs front < back < {n}, got {} / {}",
                    e.front, e.back
                ));
            }
            if e.start > e.end || e.end >= self.frames {
                return bad(format!("occlusion interval {}..={} out of range", e.start, e.end));
            }
        }
        for a in &self.absence_intervals {
            if a.instance >= n || a.start > a.end || a.end >= self.frames {
                return bad(format!(
                    "absence interval {}..={} for instance {} out of range",
                    a.start, a.end, a.instance
                ));
            }
        }
        Ok(())
    }

    fn absent(&self, instance: usize, t: usize) -> bool {
        self.absence_intervals
            .iter()
            .any(|a| a.instance == instance && (a.start..=a.end).contains(&t))
    }

    /// Centre of every instance at every frame: `[t][instance]`.
    pub fn trajectories(&self) -> Vec<Vec<[f64; 2]>> {
        let n = self.instances.len();
        let mut pos: Vec<[f64; 2]> = self.instances.iter().map(|i| i.start).collect();
        let mut vel: Vec<[f64; 2]> = self.instances.iter().map(|i| i.velocity).collect();
        for (i, inst) in self.instances.iter().enumerate() {
            pos[i] = clamp_to_canvas(pos[i], inst.size, self.width, self.height);
        }
        let mut out = Vec::with_capacity(self.frames);
        for t in 0..self.frames {
            if t > 0 {
                for i in 0..n {
                    if self.instances[i].reverse_at == Some(t) {
                        vel[i] = [-vel[i][0], -vel[i][1]];
                    }
                    let size = self.instances[i].size;
                    for (axis, extent) in [(0, self.width as f64), (1, self.height as f64)] {
                        let mut p = pos[i][axis] + vel[i][axis];
                        let (lo, hi) = (size, extent - size);
                        if p < lo {
                            p = 2.0 * lo - p;
                            vel[i][axis] = -vel[i][axis];
                        } else if p > hi {
                            p = 2.0 * hi - p;
                            vel[i][axis] = -vel[i][axis];
                        }
                        pos[i][axis] = p.clamp(lo, hi);
                    }
                }
            }
            // Occluded instances are pinned next to their occluder, in depth
            // order so the occluder's position for this frame is final.
            for e in &self.occlusion_events {
                if !(e.start..=e.end).contains(&t) {
                    continue;
                }
                let (fp, bp) = (pos[e.front], pos[e.back]);
                let (mut dx, mut dy) = (bp[0] - fp[0], bp[1] - fp[1]);
                let norm = (dx * dx + dy * dy).sqrt();
                if norm < 1e-9 {
                    (dx, dy) = (1.0, 0.0);
                } else {
                    (dx, dy) = (dx / norm, dy / norm);
                }
                let gap = 0.5 * (self.instances[e.front].size + self.instances[e.back].size);
                pos[e.back] = clamp_to_canvas(
                    [fp[0] + gap * dx, fp[1] + gap * dy],
                    self.instances[e.back].size,
                    self.width,
                    self.height,
                );
            }
            out.push(pos.clone());
        }
        out
    }
}

fn clamp_to_canvas(p: [f64; 2], size: f64, width: usize, height: usize) -> [f64; 2] {
    [
        p[0].clamp(size, width as f64 - size),
        p[1].clamp(size, height as f64 - size),
    ]
}

/// Renders a scenario. Deterministic in `spec` (including its seed).
///
/// Each pixel belongs to the visible instance with the lowest index covering
/// it, so masks of one frame are pixel-disjoint.
pub fn generate_video(spec: &ScenarioSpec) -> Result<VideoSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = spec.instances.len();
    let traj = spec.trajectories();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks: Vec<Vec<Option<BinaryMask>>> = vec![Vec::with_capacity(spec.frames); n];
    for (t, centres) in traj.iter().enumerate() {
        let mut owner: Vec<Option<usize>> = vec![None; h * w];
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                owner[y * w + x] = (0..n).find(|&i| {
                    !spec.absent(i, t) && {
                        let inst = &spec.instances[i];
                        inst.kind.covers(centres[i][0], centres[i][1], inst.size, px, py)
                    }
                });
            }
        }
        let mut rgb = Vec::with_capacity(h * w * 3);
        for o in &owner {
            match o {
                Some(i) => rgb.extend_from_slice(&spec.instances[*i].color),
                None => {
                    let noise = rng.random_range(-1.0..=1.0) * spec.noise_amplitude;
                    let v = ((BACKGROUND_GRAY + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
                    rgb.extend_from_slice(&[v, v, v]);
                }
            }
        }
        frames.push(Frame::new(h, w, rgb));
        for (i, track_masks) in masks.iter_mut().enumerate() {
            let bits: Vec<bool> = owner.iter().map(|o| *o == Some(i)).collect();
            let m = BinaryMask::from_bits(h, w, bits);
            track_masks.push(if m.is_empty() { None } else { Some(m) });
        }
    }
    let tracks = masks
        .into_iter()
        .enumerate()
        .map(|(i, m)| InstanceTrack::new(i, spec.instances[i].kind.category_id(), m))
        .collect();
    Ok(VideoSample {
        video_id: spec.video_id.clone(),
        height: h,
        width: w,
        frames,
        tracks,
    })
}

/// Draws random scenarios for dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSampler {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub max_instances: usize,
    /// Probability that a video with at least two instances gets an occlusion event.
    pub occlusion_rate: f64,
    /// Per-instance probability of an absence interval.
    pub absence_rate: f64,
    pub min_size: f64,
    pub max_size: f64,
    pub max_speed: f64,
    pub reverse_rate: f64,
}

impl Default for ScenarioSampler {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 64,
            width: 64,
            max_instances: 3,
            occlusion_rate: 0.3,
            absence_rate: 0.1,
            min_size: 6.0,
            max_size: 10.0,
            max_speed: 2.0,
            reverse_rate: 0.2,
        }
    }
}

impl ScenarioSampler {
    /// `videos` samples named `video_0000`, `video_0001`, …; video `i` uses
    /// its own seed derived from `seed` and `i`.
    pub fn generate(&self, videos: usize, seed: u64) -> Result<Vec<VideoSample>> {
        (0..videos)
            .map(|i| {
                let vs = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                generate_video(&self.sample(format!("video_{i:04}"), vs))
            })
            .collect()
    }

    pub fn sample(&self, video_id: impl Into<String>, seed: u64) -> ScenarioSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5CE7_A210);
        let mut spec = ScenarioSpec::new(video_id, self.frames, self.height, self.width, seed);
        let count = if self.max_instances == 0 {
            0
        } else {
            rng.random_range(1..=self.max_instances.min(MAX_INSTANCES))
        };
        for _ in 0..count {
            let kind = ShapeKind::ALL[rng.random_range(0..3)];
            let size = rng.random_range(self.min_size..=self.max_size);
            // Keep starting positions apart so nobody begins fully hidden.
            let mut start = [0.0; 2];
            for _attempt in 0..32 {
                start = [
                    rng.random_range(size..=self.width as f64 - size),
                    rng.random_range(size..=self.height as f64 - size),
                ];
                let clear = spec.instances.iter().all(|o: &InstanceSpec| {
                    let d = ((o.start[0] - start[0]).powi(2) + (o.start[1] - start[1]).powi(2)).sqrt();
                    d > o.size + size
                });
                if clear {
                    break;
                }
            }
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(0.0..=self.max_speed);
            let reverse_at =
                (self.frames > 2 && rng.random_bool(self.reverse_rate)).then(|| rng.random_range(1..self.frames));
            spec.instances.push(InstanceSpec {
                kind,
                size,
                color: random_color(&mut rng),
                start,
                velocity: [speed * angle.cos(), speed * angle.sin()],
                reverse_at,
            });
        }
        if count >= 2 && self.frames >= 2 && rng.random_bool(self.occlusion_rate) {
            let front = rng.random_range(0..count - 1);
            let back = rng.random_range(front + 1..count);
            let start = rng.random_range(0..self.frames - 1);
            let end = (start + 1).min(self.frames - 1);
            spec.occlusion_events.push(OcclusionEvent {
                front,
                back,
                start,
                end,
            });
        }
        for i in 0..count {
            if self.frames >= 3 && rng.random_bool(self.absence_rate) {
                let start = rng.random_range(1..self.frames - 1);
                let end = rng.random_range(start..self.frames - 1);
                spec.absence_intervals.push(AbsenceInterval {
                    instance: i,
                    start,
                    end,
                });
            }
        }
        spec
    }
}

/// A saturated colour well away from the background gray.
fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [u8; 3] {
    let hue = rng.random_range(0.0..6.0f64);
    let sector = hue.floor() as usize;
    let f = hue - hue.floor();
    let (hi, lo) = (230.0, 30.0);
    let mid_up = lo + (hi - lo) * f;
    let mid_down = hi - (hi - lo) * f;
    let (r, g, b) = match sector {
        0 => (hi, mid_up, lo),
        1 => (mid_down, hi, lo),
        2 => (lo, hi, mid_up),
        3 => (lo, mid_down, hi),
        4 => (mid_up, lo, hi),
        _ => (hi, lo, mid_down),
    };
    [r as u8, g as u8, b as u8]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(x: f64, y: f64, r: f64) -> InstanceSpec {
        InstanceSpec {
            kind: ShapeKind::Disk,
            size: r,
            color: [200, 20, 20],
            start: [x, y],
            velocity: [0.0, 0.0],
            reverse_at: None,
        }
    }

    #[test]
    fn single_static_disk() {
        let mut spec = ScenarioSpec::new("v", 1, 32, 32, 7);
        spec.instances.push(disk(16.0, 16.0, 5.0));
        let v = generate_video(&spec).unwrap();
        assert_eq!(v.tracks.len(), 1);
        assert_eq!(v.tracks[0].presence, vec![true]);
        let m = v.tracks[0].masks[0].as_ref().unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let (dx, dy) = (x as f64 + 0.5 - 16.0, y as f64 + 0.5 - 16.0);
                assert_eq!(m.get(y, x), dx * dx + dy * dy <= 25.0);
            }
        }
    }

    #[test]
    fn absence_interval_sets_presence() {
        let mut spec = ScenarioSpec::new("v", 8, 32, 32, 1);
        spec.instances.push(disk(10.0, 10.0, 4.0));
        spec.absence_intervals.push(AbsenceInterval {
            instance: 0,
            start: 2,
            end: 5,
        });
        let v = generate_video(&spec).unwrap();
        assert_eq!(
            v.tracks[0].presence,
            vec![true, true, false, false, false, false, true, true]
        );
        assert_eq!(v.tracks[0].track_id, 0);
    }

    #[test]
    fn oversized_shapes_are_rejected() {
        let mut spec = ScenarioSpec::new("v", 2, 16, 16, 1);
        spec.instances.push(disk(8.0, 8.0, 8.0));
        assert!(matches!(generate_video(&spec), Err(Error::Scenario(_))));
    }

    #[test]
    fn bad_occlusion_order_is_rejected() {
        let mut spec = ScenarioSpec::new("v", 4, 32, 32, 1);
        spec.instances.push(disk(8.0, 8.0, 3.0));
        spec.instances.push(disk(20.0, 8.0, 3.0));
        spec.occlusion_events.push(OcclusionEvent {
            front: 1,
            back: 0,
            start: 0,
            end: 1,
        });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn motion_stays_inside_canvas() {
        let mut spec = ScenarioSpec::new("v", 40, 32, 32, 3);
        let mut d = disk(5.0, 5.0, 4.0);
        d.velocity = [3.1, -2.3];
        d.reverse_at = Some(13);
        spec.instances.push(d);
        for frame in spec.trajectories() {
            let [x, y] = frame[0];
            assert!((4.0..=28.0).contains(&x) && (4.0..=28.0).contains(&y));
        }
    }

    #[test]
    fn triangle_covers_apex_and_base() {
        let k = ShapeKind::Triangle;
        assert!(k.covers(0.0, 0.0, 4.0, 0.0, -3.9));
        assert!(!k.covers(0.0, 0.0, 4.0, 1.0, -3.9));
        assert!(k.covers(0.0, 0.0, 4.0, 3.9, 3.9));
    }

    #[test]
    fn sampler_is_deterministic_and_valid() {
        let s = ScenarioSampler::default();
        for seed in 0..50 {
            let a = s.sample("x", seed);
            assert_eq!(a, s.sample("x", seed));
            a.validate().unwrap();
            assert!((1..=3).contains(&a.instances.len()));
        }
    }
}
