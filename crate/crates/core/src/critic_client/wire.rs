//! JSON message types of the critic protocol.
//!
//! Every numeric array travels as [`WireTensor`]: an explicit shape, the
//! dtype tag `"f32"` and base64 of the little-endian float32 bytes.
//! Images are `[height, width, 3]` in `[0, 1]`, latents
//! `[res/f, res/f, channels]`, attention maps `[height, width]` and feature
//! layers `[channels, height, width]`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::CriticError;
use crate::init::{AttentionBundle, AttentionMap};
use crate::perceptual::{FeatureKind, FeatureLayer, FeatureStack};
use crate::tensor::{RasterImage, Tensor};

pub const DTYPE: &str = "f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub data: String,
}

fn protocol(msg: impl Into<String>) -> CriticError {
    CriticError::Protocol(msg.into())
}

impl WireTensor {
    pub fn encode(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(t.data.len() * 4);
        for &v in &t.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Self {
            shape: t.shape.clone(),
            dtype: DTYPE.to_string(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn from_image(img: &RasterImage) -> Self {
        Self::encode(&img.to_tensor())
    }

    /// Decodes and checks the dtype, byte count and finiteness. `field`
    /// names the payload in error messages.
    pub fn decode(&self, field: &'static str) -> Result<Tensor, CriticError> {
        if self.dtype != DTYPE {
            return Err(protocol(format!("{field}: dtype {:?}, expected {DTYPE:?}", self.dtype)));
        }
        let bytes = STANDARD
            .decode(self.data.as_bytes())
            .map_err(|e| protocol(format!("{field}: bad base64: {e}")))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(protocol(format!(
                "{field}: shape {:?} needs {} bytes, payload has {}",
                self.shape,
                4 * n,
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CriticError::NonFinite(field));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Decodes and requires exactly `shape`.
    pub fn decode_shaped(&self, field: &'static str, shape: &[usize]) -> Result<Tensor, CriticError> {
        if self.shape != shape {
            return Err(protocol(format!("{field}: shape {:?}, expected {shape:?}", self.shape)));
        }
        self.decode(field)
    }

    pub fn decode_image(&self, field: &'static str) -> Result<RasterImage, CriticError> {
        if self.shape.len() != 3 || self.shape[2] != 3 {
            return Err(protocol(format!("{field}: shape {:?} is not [H,W,3]", self.shape)));
        }
        let t = self.decode(field)?;
        RasterImage::from_tensor(&t).map_err(|e| protocol(format!("{field}: {e}")))
    }

    pub fn from_map(m: &AttentionMap) -> Self {
        Self::encode(&Tensor {
            shape: vec![m.height, m.width],
            data: m.data.clone(),
        })
    }

    pub fn decode_map(&self, field: &'static str) -> Result<AttentionMap, CriticError> {
        if self.shape.len() != 2 {
            return Err(protocol(format!("{field}: shape {:?} is not [H,W]", self.shape)));
        }
        let t = self.decode(field)?;
        AttentionMap::new(self.shape[1], self.shape[0], t.data).map_err(|e| protocol(format!("{field}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

impl ErrorBody {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            error: ErrorDetail {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub prompt: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMessage {
    pub image: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMessage {
    pub latent: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeBackwardRequest {
    pub image: WireTensor,
    pub latent_grad: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGradMessage {
    pub image_grad: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictNoiseRequest {
    pub latent: WireTensor,
    pub t: usize,
    pub prompt: String,
    pub guidance_scale: f64,
    pub seed: u64,
    #[serde(default)]
    pub raw: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsMessage {
    pub eps: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsPairMessage {
    pub eps_cond: WireTensor,
    pub eps_uncond: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRequest {
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMessage {
    pub cross: Vec<WireTensor>,
    pub self_mean: WireTensor,
    pub token_labels: Vec<String>,
}

impl AttentionMessage {
    pub fn encode(b: &AttentionBundle) -> Self {
        Self {
            cross: b.cross.iter().map(WireTensor::from_map).collect(),
            self_mean: WireTensor::from_map(&b.self_mean),
            token_labels: b.token_labels.clone(),
        }
    }

    pub fn decode(&self) -> Result<AttentionBundle, CriticError> {
        let bundle = AttentionBundle {
            cross: self
                .cross
                .iter()
                .map(|m| m.decode_map("cross"))
                .collect::<Result<_, _>>()?,
            self_mean: self.self_mean.decode_map("self_mean")?,
            token_labels: self.token_labels.clone(),
        };
        bundle.validate().map_err(|e| protocol(e.to_string()))?;
        Ok(bundle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireLayer {
    pub name: String,
    pub tensor: WireTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMessage {
    pub layers: Vec<WireLayer>,
}

impl FeatureMessage {
    pub fn encode(s: &FeatureStack) -> Self {
        Self {
            layers: s
                .layers
                .iter()
                .map(|l| WireLayer {
                    name: l.name.clone(),
                    tensor: WireTensor::encode(&l.tensor),
                })
                .collect(),
        }
    }

    pub fn decode(&self) -> Result<FeatureStack, CriticError> {
        let stack = FeatureStack {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    Ok(FeatureLayer {
                        name: l.name.clone(),
                        tensor: l.tensor.decode("features")?,
                    })
                })
                .collect::<Result<_, CriticError>>()?,
        };
        stack.validate()?;
        Ok(stack)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesRequest {
    pub image: WireTensor,
    pub kind: FeatureKind,
    pub layers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesBackwardRequest {
    pub image: WireTensor,
    pub kind: FeatureKind,
    pub layers: Vec<usize>,
    pub grads: FeatureMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub image: WireTensor,
    pub prompt: String,
}
