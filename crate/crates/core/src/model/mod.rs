//! The detection network: learned raw-frame features fused with log-mel
//! features, self-attention over the hybrid map, and a residual classifier.

mod gradcheck;
mod loss;
mod network;
mod params;

pub use gradcheck::{check_model_gradients, ModelGradCheck, TensorCheck};
pub use loss::{composite_loss, LossParts};
pub use network::{fuse, self_attention, AttentionOutput, Batch, Features, ForwardOutput, Gradients, Network};
pub use params::ParamStore;

use thiserror::Error;

use crate::dsp::{DspConfig, DspError};
use crate::tensor::{conv2d_out_size, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("time axes differ: deep path has {deep} frames, mel path has {mel}")]
    TimeAxisMismatch { deep: usize, mel: usize },
    #[error("{stage}: expected shape {expected:?}, got {actual:?}")]
    StageShape {
        stage: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("target {0} is not 0 or 1")]
    TargetOutOfRange(f64),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter {0}: {1}")]
    Param(String, String),
    #[error("clip {0} has no ground-truth label")]
    Unlabelled(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Denominator of the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleMode {
    /// `sqrt(T)`, the number of frames.
    SqrtT,
    /// `sqrt(d)`, the feature dimension.
    SqrtD,
}

impl ScaleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleMode::SqrtT => "sqrt_t",
            ScaleMode::SqrtD => "sqrt_d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sqrt_t" => Some(ScaleMode::SqrtT),
            "sqrt_d" => Some(ScaleMode::SqrtD),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub dsp: DspConfig,
    /// Channels inside the learned raw-frame path.
    pub deep_channels: usize,
    /// Channels of the classifier stem; each downsampling stage doubles them.
    pub base_channels: usize,
    pub lambda: f64,
    pub scale_mode: ScaleMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dsp: DspConfig::default(),
            deep_channels: 4,
            base_channels: 8,
            lambda: 1.0,
            scale_mode: ScaleMode::SqrtT,
            seed: 1234,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        if self.deep_channels == 0 || self.base_channels == 0 {
            return Err(ModelError::Config("channel counts must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(ModelError::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        ShapeTrace::for_config(self)?;
        Ok(())
    }

    pub fn d_cnn(&self) -> Result<usize> {
        Ok(self.dsp.frame_len()?)
    }

    pub fn d_model(&self) -> Result<usize> {
        Ok(self.d_cnn()? + self.dsp.n_mels)
    }

    pub fn n_frames(&self) -> Result<usize> {
        Ok(self.dsp.n_frames()?)
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    pub fn attention_scale(&self) -> Result<f64> {
        Ok(match self.scale_mode {
            ScaleMode::SqrtT => (self.n_frames()? as f64).sqrt(),
            ScaleMode::SqrtD => (self.d_model()? as f64).sqrt(),
        })
    }
}

/// Padding of the first convolution of a downsampling unit: one row on the
/// feature axis, none on the time axis.
pub const DOWNSAMPLE_PADDING: (usize, usize) = (1, 0);

/// Spatial size after every classifier stage, derived from the config before
/// any data is seen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTrace {
    pub hybrid: (usize, usize),
    pub stem: (usize, usize),
    pub pool: (usize, usize),
    pub blocks: [(usize, usize); 4],
}

impl ShapeTrace {
    pub fn for_config(cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model()?;
        let t = cfg.n_frames()?;
        let too_small = |stage: &str| {
            ModelError::Config(format!("input {d}x{t} is too small for {stage}"))
        };
        let pool = (
            conv2d_out_size(d, 3, 2, 1).ok_or_else(|| too_small("max pool"))?,
            conv2d_out_size(t, 3, 2, 1).ok_or_else(|| too_small("max pool"))?,
        );
        let mut blocks = [pool; 4];
        for i in 1..4 {
            let (h, w) = blocks[i - 1];
            blocks[i] = (
                conv2d_out_size(h, 3, 2, DOWNSAMPLE_PADDING.0)
                    .ok_or_else(|| too_small("a downsampling block"))?,
                conv2d_out_size(w, 3, 2, DOWNSAMPLE_PADDING.1)
                    .ok_or_else(|| too_small("a downsampling block"))?,
            );
        }
        Ok(ShapeTrace {
            hybrid: (d, t),
            stem: (d, t),
            pool,
            blocks,
        })
    }

    /// `(stage, rows, cols)` from the stem to the classification layer.
    pub fn rows(&self) -> Vec<(&'static str, usize, usize)> {
        let mut v = vec![
            ("convolution", self.stem.0, self.stem.1),
            ("max pooling", self.pool.0, self.pool.1),
        ];
        let names = ["resnet block 1", "resnet block 2", "resnet block 3", "resnet block 4"];
        for (name, (h, w)) in names.iter().zip(self.blocks) {
            v.push((name, h, w));
        }
        v.push(("classification layer", 1, 1));
        v
    }
}

pub(crate) fn check_shape(stage: &'static str, actual: &[usize], expected: &[usize]) -> Result<()> {
    if actual != expected {
        return Err(ModelError::StageShape {
            stage,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_trace_matches_reference_table() {
        let trace = ShapeTrace::for_config(&ModelConfig::default()).unwrap();
        let sizes: Vec<(usize, usize)> = trace.rows().iter().map(|r| (r.1, r.2)).collect();
        assert_eq!(
            sizes,
            vec![(640, 126), (320, 63), (320, 63), (160, 31), (80, 15), (40, 7), (1, 1)]
        );
        assert_eq!(trace.hybrid, (640, 126));
    }

    #[test]
    fn scale_modes() {
        let mut cfg = ModelConfig::default();
        assert!((cfg.attention_scale().unwrap() - 126f64.sqrt()).abs() < 1e-15);
        cfg.scale_mode = ScaleMode::SqrtD;
        assert!((cfg.attention_scale().unwrap() - 640f64.sqrt()).abs() < 1e-15);
        assert_eq!(ScaleMode::parse("sqrt_t"), Some(ScaleMode::SqrtT));
        assert_eq!(ScaleMode::parse("bogus"), None);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = ModelConfig::default();
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.base_channels = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.dsp.clip_seconds = 0.05;
        assert!(cfg.validate().is_err());
    }
}
