use serde::{Deserialize, Serialize};

use super::layers::Pooling;
use crate::error::{Error, Result};

/// Convolutional trunk preceding global pooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Backbone {
    /// Stack of 3×3 stride-2 convolutions, each followed by a frozen norm and ReLU.
    TinyConv { widths: Vec<usize> },
    /// Residual network truncated before its global pooling (18, 34, 50, 101 or 152 layers).
    ResNet { depth: usize },
}

impl Backbone {
    pub fn resnet_blocks(depth: usize) -> Option<(bool, [usize; 4])> {
        // (bottleneck, blocks per stage)
        match depth {
            18 => Some((false, [2, 2, 2, 2])),
            34 => Some((false, [3, 4, 6, 3])),
            50 => Some((true, [3, 4, 6, 3])),
            101 => Some((true, [3, 4, 23, 3])),
            152 => Some((true, [3, 8, 36, 3])),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub backbone: Backbone,
    pub pooling: Pooling,
    /// Channels, height, width of input images.
    pub input_shape: [usize; 3],
    pub embedding_dim: usize,
    /// Dropout after every convolution stage; nonzero only for the MC-Dropout variant.
    #[serde(default)]
    pub dropout: f64,
}

impl Default for EncoderSpec {
    /// ResNet50 trunk with GeM pooling and 2048-d embeddings.
    fn default() -> Self {
        Self {
            backbone: Backbone::ResNet { depth: 50 },
            pooling: Pooling::GeneralizedMean { p: 3.0 },
            input_shape: [3, 200, 200],
            embedding_dim: 2048,
            dropout: 0.0,
        }
    }
}

impl EncoderSpec {
    pub fn desk() -> Self {
        Self {
            backbone: Backbone::TinyConv {
                widths: vec![16, 32, 64],
            },
            pooling: Pooling::GeneralizedMean { p: 3.0 },
            input_shape: [3, 32, 32],
            embedding_dim: 32,
            dropout: 0.0,
        }
    }

    pub fn with_dropout(&self, rate: f64) -> Self {
        Self {
            dropout: rate,
            ..self.clone()
        }
    }

    /// Channel count of the pooled feature map.
    pub fn feature_channels(&self) -> usize {
        match &self.backbone {
            Backbone::TinyConv { widths } => widths.last().copied().unwrap_or(self.input_shape[0]),
            Backbone::ResNet { depth } => match Backbone::resnet_blocks(*depth) {
                Some((true, _)) => 2048,
                _ => 512,
            },
        }
    }

    /// Whether a linear projection maps pooled features to the embedding.
    pub fn has_projection(&self) -> bool {
        self.feature_channels() != self.embedding_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.embedding_dim < 2 {
            return fail(format!("embedding_dim must be at least 2, got {}", self.embedding_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if let Pooling::GeneralizedMean { p } = self.pooling {
            if !(p > 0.0 && p.is_finite()) {
                return fail(format!("GeM exponent must be positive, got {p}"));
            }
        }
        if self.input_shape.contains(&0) {
            return fail(format!("input_shape must be positive, got {:?}", self.input_shape));
        }
        match &self.backbone {
            Backbone::TinyConv { widths } => {
                if widths.is_empty() || widths.contains(&0) {
                    return fail(format!(
                        "tiny-conv widths must be nonempty and positive, got {widths:?}"
                    ));
                }
            }
            Backbone::ResNet { depth } => {
                if Backbone::resnet_blocks(*depth).is_none() {
                    return fail(format!("unsupported resnet depth {depth}"));
                }
                if self.input_shape[1] < 32 || self.input_shape[2] < 32 {
                    return fail("resnet inputs must be at least 32×32".into());
                }
            }
        }
        Ok(())
    }
}
