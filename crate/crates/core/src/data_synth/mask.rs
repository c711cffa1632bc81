use serde::{Deserialize, Serialize};

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "mask extent mismatch");
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn intersection(&self, other: &BinaryMask) -> usize {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }

    pub fn union(&self, other: &BinaryMask) -> usize {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count()
    }

    /// Block-majority downsampling: an output pixel is set when at least half of
    /// its `factor×factor` input block is set. Dimensions must divide evenly.
    pub fn downsample(&self, factor: usize) -> BinaryMask {
        assert!(factor > 0 && self.height % factor == 0 && self.width % factor == 0);
        let (h, w) = (self.height / factor, self.width / factor);
        let need = (factor * factor).div_ceil(2);
        let mut out = BinaryMask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                let mut n = 0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        n += usize::from(self.get(y * factor + dy, x * factor + dx));
                    }
                }
                out.set(y, x, n >= need);
            }
        }
        out
    }

    /// Row-major `f64` indicator.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| f64::from(u8::from(b))).collect()
    }
}
