//! Backbone, decoder and heads wired into one model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, PyramidFeatures, PIXEL_STRIDE};
use crate::config::ModelConfig;
use crate::data_synth::VideoSample;
use crate::error::{Error, Result};
use crate::heads::Heads;
use crate::matching::{total_loss, ClipTargets, LossOutput};
use crate::params::{Bound, ParamStore};
use crate::sync_decoder::{DecoderOutput, SyncDecoder};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SyncVisModel {
    cfg: ModelConfig,
    backbone: Backbone,
    decoder: SyncDecoder,
    heads: Heads,
}

pub struct ModelOutput {
    pub pyramid: PyramidFeatures,
    pub decoder: DecoderOutput,
}

impl SyncVisModel {
    /// Builds the model and a freshly initialised parameter store.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, "backbone", cfg.hidden_dim, &mut rng);
        let decoder = SyncDecoder::new(&mut store, "decoder", cfg, &mut rng);
        let heads = Heads::new(&mut store, "heads", cfg.hidden_dim, cfg.num_classes, &mut rng);
        Ok((
            Self {
                cfg: cfg.clone(),
                backbone,
                decoder,
                heads,
            },
            store,
        ))
    }

    /// Builds the model for an existing store, checking that the store holds
    /// exactly the parameters this configuration needs.
    pub fn for_store(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let (model, fresh) = Self::init(cfg, 0)?;
        for (name, t) in fresh.iter() {
            match store.get(name) {
                None => return Err(Error::Checkpoint(format!("parameter {name} is missing"))),
                Some(s) if s.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, configuration expects {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                Some(s) if !s.is_finite() => return Err(Error::Checkpoint(format!("parameter {name} is not finite"))),
                _ => {}
            }
        }
        if let Some(extra) = store.names().find(|n| fresh.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn decoder(&self) -> &SyncDecoder {
        &self.decoder
    }

    /// `frames`: `[T, H, W, 3]`.
    pub fn forward(&self, g: &Graph, p: &Bound, frames: &Tensor) -> Result<ModelOutput> {
        let f = g.constant(frames.clone());
        let pyramid = self.backbone.extract_pyramid(g, p, f)?;
        let decoder = self.decoder.run(g, p, &self.heads, &pyramid)?;
        Ok(ModelOutput { pyramid, decoder })
    }

    /// Forward pass and objective on a clip.
    pub fn loss(&self, g: &Graph, p: &Bound, clip: &VideoSample) -> Result<LossOutput> {
        let out = self.forward(g, p, &clip.frames_tensor(0..clip.len()))?;
        let targets = ClipTargets::from_sample(clip, 0..clip.len(), PIXEL_STRIDE, self.cfg.num_classes)?;
        let last: Var = out.decoder.states.last().expect("at least one state").x_f;
        total_loss(g, &out.decoder.predictions, last, &targets, &self.cfg)
    }
}
