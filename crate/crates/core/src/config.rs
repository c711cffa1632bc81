//! Model hyper-parameters shared by the decoder, heads, loss and trainer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Whether the contrastive association term is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Offline,
    Online,
}

/// Which directions of the frame/video exchange run inside each decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    None,
    /// Frame-level embeddings refine the video-level ones.
    FrameToVideo,
    /// Video-level embeddings refine the frame-level ones.
    VideoToFrame,
    Both,
}

impl SyncMode {
    pub fn updates_video(self) -> bool {
        matches!(self, SyncMode::FrameToVideo | SyncMode::Both)
    }

    pub fn updates_frames(self) -> bool {
        matches!(self, SyncMode::VideoToFrame | SyncMode::Both)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Offline => "offline",
            Mode::Online => "online",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "offline" => Ok(Mode::Offline),
            "online" => Ok(Mode::Online),
            _ => Err(Error::BadValue {
                key: "mode".into(),
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for SyncMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyncMode::None => "none",
            SyncMode::FrameToVideo => "frame_to_video",
            SyncMode::VideoToFrame => "video_to_frame",
            SyncMode::Both => "both",
        })
    }
}

impl FromStr for SyncMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(SyncMode::None),
            "frame_to_video" | "frame->video" | "f2v" => Ok(SyncMode::FrameToVideo),
            "video_to_frame" | "video->frame" | "v2f" => Ok(SyncMode::VideoToFrame),
            "both" => Ok(SyncMode::Both),
            _ => Err(Error::BadValue {
                key: "sync_mode".into(),
                value: s.into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Queries per level (N).
    pub num_queries: usize,
    /// Embedding width (C).
    pub hidden_dim: usize,
    /// Decoder layers (L).
    pub num_layers: usize,
    /// Embeddings kept as keys/values in each exchange direction (N_k).
    pub top_k: usize,
    /// Exchange momentum.
    pub lambda: f64,
    /// Foreground classes (K); index K is the no-object class.
    pub num_classes: usize,
    /// Training clip length (T).
    pub clip_frames: usize,
    /// Sub-clip length for the video-level objective (T_s).
    pub subclip_frames: usize,
    pub num_heads: usize,
    /// Hidden width of the decoder feed-forward blocks.
    pub ffn_dim: usize,
    pub w_ce: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub w_contras: f64,
    pub no_object_weight: f64,
    pub contrastive_temperature: f64,
    pub mode: Mode,
    pub sync_mode: SyncMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl ModelConfig {
    pub fn desk_scale() -> Self {
        Self {
            num_queries: 20,
            hidden_dim: 64,
            num_layers: 3,
            top_k: 5,
            lambda: 0.05,
            num_classes: 3,
            clip_frames: 8,
            subclip_frames: 3,
            num_heads: 4,
            ffn_dim: 128,
            w_ce: 2.0,
            w_bce: 5.0,
            w_dice: 5.0,
            w_contras: 1.0,
            no_object_weight: 0.1,
            contrastive_temperature: 0.1,
            mode: Mode::Offline,
            sync_mode: SyncMode::Both,
        }
    }

    /// Reference values at the original scale. Too large to train here.
    pub fn paper_scale() -> Self {
        Self {
            num_queries: 100,
            hidden_dim: 256,
            num_layers: 9,
            top_k: 10,
            num_heads: 8,
            ffn_dim: 2048,
            ..Self::desk_scale()
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.num_queries == 0 {
            return bad("num_queries must be positive");
        }
        if self.top_k == 0 || self.top_k > self.num_queries {
            return bad("top_k must be in 1..=num_queries");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1]");
        }
        if self.clip_frames == 0 {
            return bad("clip_frames must be positive");
        }
        if self.subclip_frames == 0 || self.subclip_frames > self.clip_frames {
            return bad("subclip_frames must be in 1..=clip_frames");
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad("hidden_dim must be a positive multiple of num_heads");
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive");
        }
        for (name, w) in [
            ("w_ce", self.w_ce),
            ("w_bce", self.w_bce),
            ("w_dice", self.w_dice),
            ("w_contras", self.w_contras),
            ("no_object_weight", self.no_object_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(&format!("{name} must be a finite non-negative weight"));
            }
        }
        if self.contrastive_temperature <= 0.0 {
            return bad("contrastive_temperature must be positive");
        }
        Ok(())
    }

    /// Whether any exchange runs at all.
    pub fn sync_active(&self) -> bool {
        self.lambda != 0.0 && self.sync_mode != SyncMode::None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        ModelConfig::desk_scale().validate().unwrap();
        let p = ModelConfig::paper_scale();
        p.validate().unwrap();
        assert_eq!((p.num_queries, p.top_k, p.num_layers), (100, 10, 9));
        assert_eq!(p.lambda, 0.05);
        assert_eq!(p.subclip_frames, 3);
    }

    #[test]
    fn rejects_out_of_range_values() {
        let mut c = ModelConfig::desk_scale();
        c.top_k = 21;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk_scale();
        c.lambda = 1.5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk_scale();
        c.subclip_frames = 9;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sync_mode_parsing() {
        assert_eq!("frame->video".parse::<SyncMode>().unwrap(), SyncMode::FrameToVideo);
        assert_eq!("both".parse::<SyncMode>().unwrap(), SyncMode::Both);
        assert!("sideways".parse::<SyncMode>().is_err());
        for m in [
            SyncMode::None,
            SyncMode::FrameToVideo,
            SyncMode::VideoToFrame,
            SyncMode::Both,
        ] {
            assert_eq!(m.to_string().parse::<SyncMode>().unwrap(), m);
        }
    }
}
