//! Small convolutional feature extractor with a top-down pyramid.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Input height and width must be multiples of this.
pub const PAD_MULTIPLE: usize = 32;
/// Strides of the three decoder levels, finest first.
pub const LEVEL_STRIDES: [usize; 3] = [8, 16, 32];
/// Stride of the pixel embedding map.
pub const PIXEL_STRIDE: usize = 4;

const STEM_CHANNELS: usize = 16;

/// Multi-scale features for a clip. Every entry is NHWC with the frame axis
/// first.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    /// Strides 8, 16, 32: `[T, H/s, W/s, C]`.
    pub levels: [Var; 3],
    /// `[T, H/4, W/4, C]`.
    pub pixel_embed: Var,
}

#[derive(Clone, Debug)]
struct Conv {
    w: String,
    b: String,
    kernel: usize,
    stride: usize,
}

impl Conv {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = format!("{prefix}.weight");
        let b = format!("{prefix}.bias");
        store.insert(&w, Tensor::uniform(&[fan_in, cout], bound, rng));
        store.insert(&b, Tensor::zeros(&[cout]));
        Self { w, b, kernel, stride }
    }

    fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(
            x,
            p.get(&self.w),
            p.get(&self.b),
            self.kernel,
            self.stride,
            self.kernel / 2,
        )
    }
}

/// Five stride-2 3×3 stages (stem, then 32, 64, C, C channels) followed by
/// 1×1 laterals fused top-down.
#[derive(Clone, Debug)]
pub struct Backbone {
    stages: Vec<Conv>,
    refines: Vec<Conv>,
    laterals: Vec<Conv>,
    pixel_out: Conv,
    hidden_dim: usize,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, hidden_dim: usize, rng: &mut R) -> Self {
        let c = hidden_dim;
        let widths = [3, STEM_CHANNELS, 32, 64, c, c];
        let stages = (0..5)
            .map(|i| {
                Conv::new(
                    store,
                    &format!("{prefix}.stage{i}"),
                    widths[i],
                    widths[i + 1],
                    3,
                    2,
                    rng,
                )
            })
            .collect();
        let refines = (1..5)
            .map(|i| {
                Conv::new(
                    store,
                    &format!("{prefix}.refine{i}"),
                    widths[i + 1],
                    widths[i + 1],
                    3,
                    1,
                    rng,
                )
            })
            .collect();
        // Laterals read stage outputs at strides 4, 8, 16, 32.
        let laterals = (0..4)
            .map(|i| Conv::new(store, &format!("{prefix}.lateral{i}"), widths[i + 2], c, 1, 1, rng))
            .collect();
        let pixel_out = Conv::new(store, &format!("{prefix}.pixel_out"), c, c, 1, 1, rng);
        Self {
            stages,
            refines,
            laterals,
            pixel_out,
            hidden_dim,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// `frames`: `[T, H, W, 3]` with values in `[0, 1]`.
    pub fn extract_pyramid(&self, g: &Graph, p: &Bound, frames: Var) -> Result<PyramidFeatures> {
        let shape = g.shape(frames);
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::Shape(format!("frames must be [T, H, W, 3], got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        if h == 0 || w == 0 || h % PAD_MULTIPLE != 0 || w % PAD_MULTIPLE != 0 {
            return Err(Error::Unpadded { height: h, width: w });
        }
        let mut x = g.add_scalar(frames, -0.5);
        let mut taps = Vec::with_capacity(5);
        for (i, stage) in self.stages.iter().enumerate() {
            x = g.relu(stage.forward(g, p, x));
            if i > 0 {
                x = g.add(x, g.relu(self.refines[i - 1].forward(g, p, x)));
            }
            taps.push(x);
        }
        // taps[1..] sit at strides 4, 8, 16, 32.
        let mut top = self.laterals[3].forward(g, p, taps[4]);
        let mut fused = vec![top];
        for i in (0..3).rev() {
            let lat = self.laterals[i].forward(g, p, taps[i + 1]);
            top = g.add(lat, g.upsample2x(top));
            fused.push(top);
        }
        // fused: strides 32, 16, 8, 4.
        let pixel_embed = self.pixel_out.forward(g, p, fused[3]);
        Ok(PyramidFeatures {
            levels: [fused[2], fused[1], fused[0]],
            pixel_embed,
        })
    }
}
