use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One encoder stage: 3×3×3 convolution to `out_channels`, then max pooling
/// by `temporal_pool × spatial_pool × spatial_pool` (a factor of 1 skips that axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    pub temporal_pool: usize,
    pub spatial_pool: usize,
}

impl ConvStage {
    pub const fn new(out_channels: usize, temporal_pool: usize, spatial_pool: usize) -> Self {
        ConvStage {
            out_channels,
            temporal_pool,
            spatial_pool,
        }
    }
}

/// Architecture of the encoder, the split, both frame decoders and the head.
///
/// The bottleneck has as many channels as the last encoder stage; the split
/// sizes partition them as `(foreground, background, motion)`. Each decoder
/// stage upsamples 2× spatially and applies a 3×3 convolution, so the number
/// of decoder stages fixes the ratio between frame and bottleneck size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(T, H, W, C)` of input clips.
    pub input_dims: [usize; 4],
    pub conv_stages: Vec<ConvStage>,
    pub split_sizes: [usize; 3],
    /// Side of the square cross-convolution kernels; odd.
    pub kernel_size: usize,
    /// Output channels of each decoder stage; the last equals `C`.
    pub decoder_channels: Vec<usize>,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Full-size configuration: 16×128×128 RGB clips, five C3D-like stages
    /// with a `[2, 8, 8, 256]` bottleneck split `(96, 96, 64)`, 5×5 motion
    /// kernels and four-stage decoders.
    pub fn full(num_classes: usize) -> Self {
        ModelConfig {
            input_dims: [16, 128, 128, 3],
            conv_stages: vec![
                ConvStage::new(32, 1, 2),
                ConvStage::new(64, 2, 2),
                ConvStage::new(128, 2, 2),
                ConvStage::new(256, 2, 2),
                ConvStage::new(256, 1, 1),
            ],
            split_sizes: [96, 96, 64],
            kernel_size: 5,
            decoder_channels: vec![128, 64, 32, 3],
            num_classes,
        }
    }

    /// CPU-sized configuration for 16×64×64 RGB synthetic clips:
    /// `[2, 8, 8, 48]` bottleneck, three-stage decoders.
    pub fn desk(num_classes: usize) -> Self {
        ModelConfig {
            input_dims: [16, 64, 64, 3],
            conv_stages: vec![
                ConvStage::new(8, 2, 2),
                ConvStage::new(16, 2, 2),
                ConvStage::new(32, 2, 2),
                ConvStage::new(48, 1, 1),
            ],
            split_sizes: [16, 16, 16],
            kernel_size: 5,
            decoder_channels: vec![24, 12, 3],
            num_classes,
        }
    }

    /// Smallest useful configuration (clips `[4, 16, 16, 1]`), used for
    /// finite-difference gradient checks.
    pub fn tiny(num_classes: usize) -> Self {
        ModelConfig {
            input_dims: [4, 16, 16, 1],
            conv_stages: vec![ConvStage::new(4, 2, 2), ConvStage::new(6, 2, 2)],
            split_sizes: [2, 2, 2],
            kernel_size: 3,
            decoder_channels: vec![4, 1],
            num_classes,
        }
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.conv_stages.last().map(|s| s.out_channels).unwrap_or(0)
    }

    /// `(T', H', W')` after every pooling stage.
    pub fn bottleneck_dims(&self) -> [usize; 3] {
        let [t, h, w, _] = self.input_dims;
        let tp: usize = self.conv_stages.iter().map(|s| s.temporal_pool).product();
        let sp: usize = self.conv_stages.iter().map(|s| s.spatial_pool).product();
        [t / tp.max(1), h / sp.max(1), w / sp.max(1)]
    }

    pub fn channels(&self) -> usize {
        self.input_dims[3]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.conv_stages.is_empty() {
            return bad("conv_stages must not be empty".into());
        }
        let [t, h, w, c] = self.input_dims;
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return bad(format!("input_dims {:?} has a zero extent", self.input_dims));
        }
        let (mut tt, mut hh, mut ww) = (t, h, w);
        for (i, s) in self.conv_stages.iter().enumerate() {
            if s.out_channels == 0 || s.temporal_pool == 0 || s.spatial_pool == 0 {
                return bad(format!("stage {i}: zero channel count or pooling factor"));
            }
            if tt % s.temporal_pool != 0 || hh % s.spatial_pool != 0 || ww % s.spatial_pool != 0 {
                return bad(format!(
                    "stage {i}: extent {:?} not divisible by pooling ({}, {})",
                    [tt, hh, ww],
                    s.temporal_pool,
                    s.spatial_pool
                ));
            }
            tt /= s.temporal_pool;
            hh /= s.spatial_pool;
            ww /= s.spatial_pool;
        }
        let split: usize = self.split_sizes.iter().sum();
        if split != self.bottleneck_channels() {
            return bad(format!(
                "split sizes {:?} sum to {split}, bottleneck has {} channels",
                self.split_sizes,
                self.bottleneck_channels()
            ));
        }
        if self.split_sizes.contains(&0) {
            return bad(format!("split sizes {:?} contain an empty split", self.split_sizes));
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size {} must be odd", self.kernel_size));
        }
        let up = 1usize << self.decoder_channels.len();
        if self.decoder_channels.is_empty() || hh * up != h || ww * up != w {
            return bad(format!(
                "{} decoder stages cannot map a {hh}x{ww} bottleneck to {h}x{w} frames",
                self.decoder_channels.len()
            ));
        }
        if self.decoder_channels.last() != Some(&c) {
            return bad(format!(
                "last decoder stage must emit {c} channels, not {:?}",
                self.decoder_channels.last()
            ));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_have_expected_bottlenecks() {
        let full = ModelConfig::full(24);
        full.validate().unwrap();
        assert_eq!(full.bottleneck_dims(), [2, 8, 8]);
        assert_eq!(full.bottleneck_channels(), 256);
        let tiny = ModelConfig::tiny(3);
        tiny.validate().unwrap();
        assert_eq!(tiny.bottleneck_dims(), [1, 4, 4]);
        ModelConfig::desk(8).validate().unwrap();
        assert_eq!(ModelConfig::desk(8).bottleneck_dims(), [2, 8, 8]);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut c = ModelConfig::tiny(2);
        c.split_sizes = [2, 2, 3];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(2);
        c.kernel_size = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(2);
        c.decoder_channels = vec![1];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(2);
        c.input_dims = [3, 16, 16, 1];
        assert!(c.validate().is_err());
    }
}
