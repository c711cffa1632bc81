//! Synthetic moving-shape videos with exact instance ground truth.

mod dataset;
mod mask;
pub mod rle;
mod scenario;

pub use dataset::{
    encode_png, frame_file_name, load_dataset, write_dataset, DatasetManifest, RleRecord, ANNOTATIONS_FILE,
};
pub use mask::BinaryMask;
pub use scenario::{
    generate_video, AbsenceInterval, InstanceSpec, OcclusionEvent, ScenarioSampler, ScenarioSpec, ShapeKind,
    MAX_INSTANCES,
};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// One 8-bit RGB frame. Channel values map to `[0, 1]` as `v / 255`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    height: usize,
    width: usize,
    rgb: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize, rgb: Vec<u8>) -> Self {
        assert_eq!(rgb.len(), height * width * 3, "frame extent mismatch");
        Self { height, width, rgb }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        f64::from(self.rgb[(y * self.width + x) * 3 + c]) / 255.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceTrack {
    pub track_id: usize,
    pub category_id: usize,
    pub masks: Vec<Option<BinaryMask>>,
    pub presence: Vec<bool>,
}

impl InstanceTrack {
    /// Builds a track; empty masks are normalised to absent so that presence
    /// always mirrors mask content.
    pub fn new(track_id: usize, category_id: usize, masks: Vec<Option<BinaryMask>>) -> Self {
        let masks: Vec<Option<BinaryMask>> = masks.into_iter().map(|m| m.filter(|m| !m.is_empty())).collect();
        let presence = masks.iter().map(Option::is_some).collect();
        Self {
            track_id,
            category_id,
            masks,
            presence,
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn present_in(&self, frames: std::ops::Range<usize>) -> bool {
        self.presence[frames].iter().any(|&p| p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoSample {
    pub video_id: String,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Frame>,
    pub tracks: Vec<InstanceTrack>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frames `range` as a `[T, H, W, 3]` tensor with values in `[0, 1]`.
    pub fn frames_tensor(&self, range: std::ops::Range<usize>) -> Tensor {
        let t = range.len();
        let mut data = Vec::with_capacity(t * self.height * self.width * 3);
        for f in &self.frames[range] {
            data.extend(f.rgb().iter().map(|&v| f64::from(v) / 255.0));
        }
        Tensor::new(&[t, self.height, self.width, 3], data)
    }

    /// The video under one of the eight flips/rotations of the square
    /// (`transform` in `0..8`: bit 0 mirrors x, bit 1 mirrors y, bit 2
    /// transposes) with colour channels reordered by `channels`. Transposing
    /// requires a square canvas.
    pub fn transformed(&self, transform: u8, channels: [usize; 3]) -> VideoSample {
        let (h, w) = (self.height, self.width);
        let transpose = transform & 4 != 0;
        assert!(!transpose || h == w, "transpose needs a square canvas");
        let source = |y: usize, x: usize| {
            let (y, x) = if transpose { (x, y) } else { (y, x) };
            let x = if transform & 1 != 0 { w - 1 - x } else { x };
            let y = if transform & 2 != 0 { h - 1 - y } else { y };
            y * w + x
        };
        let map: Vec<usize> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| source(y, x))
            .collect();
        let frames = self
            .frames
            .iter()
            .map(|f| {
                let rgb = map
                    .iter()
                    .flat_map(|&i| channels.iter().map(move |&c| f.rgb[i * 3 + c]))
                    .collect();
                Frame::new(h, w, rgb)
            })
            .collect();
        let tracks = self
            .tracks
            .iter()
            .map(|tr| {
                let masks = tr
                    .masks
                    .iter()
                    .map(|m| {
                        m.as_ref()
                            .map(|m| BinaryMask::from_bits(h, w, map.iter().map(|&i| m.bits()[i]).collect()))
                    })
                    .collect();
                InstanceTrack::new(tr.track_id, tr.category_id, masks)
            })
            .collect();
        VideoSample {
            video_id: self.video_id.clone(),
            height: h,
            width: w,
            frames,
            tracks,
        }
    }

    /// The sub-video covering `range`, with tracks that never appear in it
    /// dropped.
    pub fn clip(&self, range: std::ops::Range<usize>) -> VideoSample {
        let tracks = self
            .tracks
            .iter()
            .filter(|tr| tr.present_in(range.clone()))
            .map(|tr| InstanceTrack::new(tr.track_id, tr.category_id, tr.masks[range.clone()].to_vec()))
            .collect();
        VideoSample {
            video_id: self.video_id.clone(),
            height: self.height,
            width: self.width,
            frames: self.frames[range].to_vec(),
            tracks,
        }
    }

    /// Checks the structural invariants: consistent lengths and dimensions,
    /// unique track ids, presence mirroring mask content, pixel-disjoint masks.
    pub fn check_invariants(&self) -> Result<(), String> {
        let t = self.frames.len();
        for f in &self.frames {
            if (f.height(), f.width()) != (self.height, self.width) {
                return Err("frame dimensions differ from video".into());
            }
        }
        let mut ids: Vec<usize> = self.tracks.iter().map(|tr| tr.track_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.tracks.len() {
            return Err("duplicate track id".into());
        }
        for tr in &self.tracks {
            if tr.masks.len() != t || tr.presence.len() != t {
                return Err(format!("track {} length differs from video", tr.track_id));
            }
            for (m, &p) in tr.masks.iter().zip(&tr.presence) {
                let has = m.as_ref().is_some_and(|m| !m.is_empty());
                if has != p {
                    return Err(format!("track {} presence disagrees with mask", tr.track_id));
                }
                if let Some(m) = m {
                    if (m.height(), m.width()) != (self.height, self.width) {
                        return Err(format!("track {} mask dimensions", tr.track_id));
                    }
                }
            }
        }
        for frame in 0..t {
            let mut seen = vec![false; self.height * self.width];
            for tr in &self.tracks {
                if let Some(m) = &tr.masks[frame] {
                    for (i, &b) in m.bits().iter().enumerate() {
                        if b {
                            if seen[i] {
                                return Err(format!("overlapping masks at frame {frame}"));
                            }
                            seen[i] = true;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
