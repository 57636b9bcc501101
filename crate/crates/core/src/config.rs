//! Run configuration: dimensions, loss weights, optimizer, toggles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::GaussianSpec;
use crate::tensor::AdamWConfig;

/// Extents of every tensor in the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    /// Image height and width in pixels.
    pub h: usize,
    pub w: usize,
    /// Image channels.
    pub c: usize,
    /// Token grid side; the encoder emits `grid²` tokens.
    pub grid: usize,
    /// Reasoner hidden width.
    pub d_lm: usize,
    /// Query width after projection.
    pub d: usize,
    /// Decoder feature channels and spatial extent.
    pub channels: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    /// Long-side targets of the vision-language grid and the decoder input.
    pub l_vl: usize,
    pub l_sam: usize,
    /// Query bank length, contextual queries plus the anchor.
    pub n_bank: usize,
    /// Number of anchor heads; priors are fused when above one.
    pub anchors: usize,
    /// Strides of the three prior-head convolutions.
    pub head_strides: [usize; 3],
    /// Query symbol vocabulary size.
    pub vocab: usize,
    /// Two-way decoder blocks.
    pub decoder_blocks: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self::toy()
    }
}

impl Dims {
    /// The training profile.
    pub fn toy() -> Self {
        Self {
            h: 96,
            w: 96,
            c: 3,
            grid: 8,
            d_lm: 64,
            d: 32,
            channels: 16,
            feat_h: 24,
            feat_w: 24,
            l_vl: 96,
            l_sam: 96,
            n_bank: 8,
            anchors: 1,
            head_strides: [2, 2, 1],
            vocab: 32,
            decoder_blocks: 2,
        }
    }

    /// Full-size extents, used for shape checks only.
    pub fn paper_shape() -> Self {
        Self {
            h: 480,
            w: 640,
            c: 3,
            grid: 24,
            d_lm: 64,
            d: 32,
            channels: 256,
            feat_h: 64,
            feat_w: 64,
            l_vl: 336,
            l_sam: 256,
            n_bank: 8,
            anchors: 1,
            head_strides: [2, 2, 1],
            vocab: 32,
            decoder_blocks: 2,
        }
    }

    /// Small enough for exhaustive finite differences.
    pub fn tiny() -> Self {
        Self {
            h: 16,
            w: 16,
            c: 3,
            grid: 4,
            d_lm: 8,
            d: 6,
            channels: 4,
            feat_h: 4,
            feat_w: 4,
            l_vl: 16,
            l_sam: 16,
            n_bank: 3,
            anchors: 1,
            head_strides: [2, 2, 1],
            vocab: 8,
            decoder_blocks: 2,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.grid * self.grid
    }

    /// Contextual query count `K = n_bank - 1`.
    pub fn k(&self) -> usize {
        self.n_bank - 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h", self.h),
            ("w", self.w),
            ("c", self.c),
            ("grid", self.grid),
            ("d_lm", self.d_lm),
            ("d", self.d),
            ("channels", self.channels),
            ("feat_h", self.feat_h),
            ("feat_w", self.feat_w),
            ("l_vl", self.l_vl),
            ("l_sam", self.l_sam),
            ("n_bank", self.n_bank),
            ("anchors", self.anchors),
            ("vocab", self.vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("dims.{name} must be at least 1")));
            }
        }
        if self.head_strides.contains(&0) {
            return Err(Error::Config("dims.head_strides must be positive".into()));
        }
        let mut side = self.l_sam;
        for s in self.head_strides {
            side = side.div_ceil(s);
        }
        if side != self.feat_h || side != self.feat_w {
            return Err(Error::Config(format!(
                "prior head maps {0}x{0} to {side}x{side} with strides {1:?}, but decoder features are {2}x{3}",
                self.l_sam, self.head_strides, self.feat_h, self.feat_w
            )));
        }
        Ok(())
    }
}

/// Loss weights of the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub mask: f64,
    pub tmcc: f64,
    /// Weight of an externally supplied text loss.
    pub txt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 2.0,
            dice: 4.0,
            mask: 1.0,
            tmcc: 1.0,
            txt: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("bce", self.bce),
            ("dice", self.dice),
            ("mask", self.mask),
            ("tmcc", self.tmcc),
            ("txt", self.txt),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub use_prior: bool,
    pub use_tmcc: bool,
    pub use_contextual: bool,
    pub use_t2m: bool,
    pub use_m2t: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_prior: true,
            use_tmcc: true,
            use_contextual: true,
            use_t2m: true,
            use_m2t: true,
        }
    }
}

/// Synthetic dataset parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_samples: usize,
    /// Leading fraction of samples used for training; the rest is held out.
    pub train_fraction: f64,
    pub null_fraction: f64,
    /// Fraction of non-null queries phrased as a spatial relation.
    pub relation_fraction: f64,
    pub max_symbols: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 640,
            train_fraction: 0.8,
            null_fraction: 0.125,
            relation_fraction: 0.25,
            max_symbols: 6,
        }
    }
}

impl DataConfig {
    pub fn n_train(&self) -> usize {
        ((self.n_samples as f64) * self.train_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train_fraction", self.train_fraction),
            ("null_fraction", self.null_fraction),
            ("relation_fraction", self.relation_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("data.{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.n_samples == 0 || self.max_symbols == 0 {
            return Err(Error::Config("data.n_samples and data.max_symbols must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seed of the frozen scene and feature encoders, shared by every run.
    pub encoder_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate on the held-out split every this many steps; 0 disables.
    pub eval_every: usize,
    pub dims: Dims,
    pub loss: LossWeights,
    pub gaussian: GaussianSpec,
    pub optim: AdamWConfig,
    pub ablation: Toggles,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder_seed: 1,
            steps: 2000,
            batch_size: 4,
            eval_every: 0,
            dims: Dims::toy(),
            loss: LossWeights::default(),
            gaussian: GaussianSpec::default(),
            optim: AdamWConfig::default(),
            ablation: Toggles::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.loss.validate()?;
        self.gaussian.validate()?;
        self.data.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
        Dims::paper_shape().validate().unwrap();
        Dims::tiny().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[ablation]\nuse_prior = false\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert!(!cfg.ablation.use_prior);
        assert!(cfg.ablation.use_tmcc);
        assert_eq!(cfg.dims, Dims::toy());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 7\n").is_err());
        assert!(RunConfig::from_toml("[dims]\nheight = 3\n").is_err());
        assert!(RunConfig::from_toml("[telemetry]\n").is_err());
    }

    #[test]
    fn stride_product_must_reach_feature_extent() {
        let mut d = Dims::toy();
        d.head_strides = [2, 1, 1];
        assert!(matches!(d.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn negative_weight_rejected() {
        let mut cfg = RunConfig::default();
        cfg.loss.dice = -1.0;
        assert!(cfg.validate().is_err());
    }
}
