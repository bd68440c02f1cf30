//! The critic interface (latent encoder, noise predictor, attention maps,
//! guide sampling, feature extraction) and an analytic in-process critic.

use serde::{Deserialize, Serialize};

use crate::augment::{apply_augment, AugmentParams, CRITIC_RESOLUTION};
use crate::error::{CriticError, Result};
use crate::init::{AttentionBundle, AttentionMap};
use crate::perceptual::{BuiltinExtractor, FeatureExtractor, FeatureKind, FeatureStack};
use crate::schedule::{cfg_combine, NoiseSchedule, ScheduleParams};
use crate::tensor::{RasterImage, Tensor};

/// Start-token label used in attention bundles.
pub const START_TOKEN: &str = "<|startoftext|>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticInfo {
    /// Spatial downsampling of the latent encoder.
    pub latent_factor: usize,
    pub latent_channels: usize,
    /// Side length of the square images the encoder accepts.
    pub input_resolution: usize,
    pub schedule: ScheduleParams,
    pub supports_concurrency: bool,
}

impl CriticInfo {
    pub fn validate(&self) -> Result<(), CriticError> {
        if self.latent_factor == 0 || self.input_resolution == 0 || self.input_resolution % self.latent_factor != 0 {
            return Err(CriticError::Protocol(format!(
                "latent factor {} does not divide input resolution {}",
                self.latent_factor, self.input_resolution
            )));
        }
        if self.latent_channels == 0 {
            return Err(CriticError::Protocol("latent_channels must be positive".into()));
        }
        Ok(())
    }

    /// Fails unless the critic's schedule equals `local` within `1e-9`.
    pub fn check_schedule(&self, local: &ScheduleParams) -> Result<(), CriticError> {
        if self.schedule.matches(local, 1e-9) {
            Ok(())
        } else {
            Err(CriticError::ScheduleMismatch(format!(
                "critic reports {:?}, local schedule is {:?}",
                self.schedule, local
            )))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseRequest<'a> {
    pub latent: &'a Tensor,
    pub t: usize,
    pub prompt: &'a str,
    pub guidance_scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub clip_text_cosine: f64,
    pub aesthetic: f64,
}

pub trait Critic: FeatureExtractor {
    fn info(&self) -> Result<CriticInfo, CriticError>;

    /// Image at `input_resolution` to latent.
    fn encode(&self, image: &RasterImage) -> Result<Tensor, CriticError>;

    /// Vector-Jacobian product of [`Critic::encode`] at `image`.
    fn encode_backward(&self, image: &RasterImage, latent_grad: &Tensor) -> Result<Tensor, CriticError>;

    fn decode(&self, latent: &Tensor) -> Result<RasterImage, CriticError>;

    /// Conditional and unconditional noise predictions.
    fn predict_noise_raw(&self, req: &NoiseRequest<'_>) -> Result<(Tensor, Tensor), CriticError>;

    /// Guided noise prediction.
    fn predict_noise(&self, req: &NoiseRequest<'_>) -> Result<Tensor, CriticError> {
        let (cond, uncond) = self.predict_noise_raw(req)?;
        cfg_combine(&cond, &uncond, req.guidance_scale).map_err(|e| CriticError::Protocol(e.to_string()))
    }

    fn attention(&self, prompt: &str, seed: u64) -> Result<AttentionBundle, CriticError>;

    /// Samples an image for `prompt`; `steps` overrides the sampler length.
    fn sample(&self, prompt: &str, seed: u64, steps: Option<usize>) -> Result<RasterImage, CriticError>;

    fn score(&self, _image: &RasterImage, _prompt: &str) -> Result<Score, CriticError> {
        Err(CriticError::Unsupported("score"))
    }
}

/// Side length of the toy critic's attention grid.
const TOY_ATTENTION_SIDE: usize = 32;

/// Analytic critic whose data distribution is a point mass at a target
/// image. The latent space is the image itself (`f = 1`, three channels)
/// and the noise predictor is the exact optimum for that distribution, so
/// the distillation gradient vanishes exactly when the render equals the
/// target.
#[derive(Debug, Clone)]
pub struct ToyCritic {
    target: RasterImage,
    latent_target: Tensor,
    resolution: usize,
    schedule: NoiseSchedule,
    extractor: BuiltinExtractor,
}

impl ToyCritic {
    pub fn new(target: RasterImage) -> Result<Self> {
        Self::with_resolution(target, CRITIC_RESOLUTION)
    }

    /// Toy critic that accepts `resolution`-sided images.
    pub fn with_resolution(target: RasterImage, resolution: usize) -> Result<Self> {
        let ap = AugmentParams::identity(target.width, target.height, resolution);
        // same resampling path as an identity augmentation of a render
        let latent_target = apply_augment(&target, &ap)?.to_tensor();
        Ok(Self {
            target,
            latent_target,
            resolution,
            schedule: NoiseSchedule::default(),
            extractor: BuiltinExtractor::new(0),
        })
    }

    pub fn with_extractor(mut self, extractor: BuiltinExtractor) -> Self {
        self.extractor = extractor;
        self
    }

    pub fn target(&self) -> &RasterImage {
        &self.target
    }

    pub fn latent_target(&self) -> &Tensor {
        &self.latent_target
    }

    fn check_input(&self, image: &RasterImage) -> Result<(), CriticError> {
        if image.width != self.resolution || image.height != self.resolution {
            return Err(CriticError::Protocol(format!(
                "expected {0}x{0} image, got {1}x{2}",
                self.resolution, image.width, image.height
            )));
        }
        Ok(())
    }

    fn check_latent(&self, latent: &Tensor) -> Result<(), CriticError> {
        if latent.shape != self.latent_target.shape {
            return Err(CriticError::Protocol(format!(
                "expected latent of shape {:?}, got {:?}",
                self.latent_target.shape, latent.shape
            )));
        }
        Ok(())
    }

    /// Target darkness averaged over a square grid.
    fn darkness_grid(&self) -> AttentionMap {
        let n = TOY_ATTENTION_SIDE;
        let (w, h) = (self.target.width, self.target.height);
        let mut sums = vec![0.0; n * n];
        let mut counts = vec![0usize; n * n];
        for y in 0..h {
            for x in 0..w {
                let cell = (y * n / h) * n + x * n / w;
                sums[cell] += self.target.darkness(x, y);
                counts[cell] += 1;
            }
        }
        let data = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0 { (s / c as f64).max(0.0) } else { 0.0 })
            .collect();
        AttentionMap {
            width: n,
            height: n,
            data,
        }
    }
}

impl FeatureExtractor for ToyCritic {
    fn features(&self, image: &RasterImage, kind: FeatureKind, layers: &[usize]) -> Result<FeatureStack, CriticError> {
        self.extractor.features(image, kind, layers)
    }

    fn features_backward(
        &self,
        image: &RasterImage,
        kind: FeatureKind,
        layers: &[usize],
        grads: &FeatureStack,
    ) -> Result<Tensor, CriticError> {
        self.extractor.features_backward(image, kind, layers, grads)
    }
}

impl Critic for ToyCritic {
    fn info(&self) -> Result<CriticInfo, CriticError> {
        Ok(CriticInfo {
            latent_factor: 1,
            latent_channels: 3,
            input_resolution: self.resolution,
            schedule: self.schedule.params(),
            supports_concurrency: true,
        })
    }

    fn encode(&self, image: &RasterImage) -> Result<Tensor, CriticError> {
        self.check_input(image)?;
        Ok(image.to_tensor())
    }

    fn encode_backward(&self, image: &RasterImage, latent_grad: &Tensor) -> Result<Tensor, CriticError> {
        self.check_input(image)?;
        self.check_latent(latent_grad)?;
        Ok(latent_grad.clone())
    }

    fn decode(&self, latent: &Tensor) -> Result<RasterImage, CriticError> {
        self.check_latent(latent)?;
        RasterImage::from_tensor(latent).map_err(|e| CriticError::Protocol(e.to_string()))
    }

    fn predict_noise_raw(&self, req: &NoiseRequest<'_>) -> Result<(Tensor, Tensor), CriticError> {
        self.check_latent(req.latent)?;
        let eps = self
            .schedule
            .toy_predict_noise(req.latent, req.t, &self.latent_target)
            .map_err(|e| CriticError::Protocol(e.to_string()))?;
        Ok((eps.clone(), eps))
    }

    fn attention(&self, prompt: &str, _seed: u64) -> Result<AttentionBundle, CriticError> {
        let grid = self.darkness_grid();
        let n = grid.width;
        let total: f64 = grid.data.iter().sum();
        let (cx, cy, sx, sy) = if total > 0.0 {
            let coords = || (0..n * n).map(|i| ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5, grid.data[i]));
            let cx = coords().map(|(x, _, w)| x * w).sum::<f64>() / total;
            let cy = coords().map(|(_, y, w)| y * w).sum::<f64>() / total;
            let vx = coords().map(|(x, _, w)| (x - cx).powi(2) * w).sum::<f64>() / total;
            let vy = coords().map(|(_, y, w)| (y - cy).powi(2) * w).sum::<f64>() / total;
            (cx, cy, vx.sqrt().max(1.0), vy.sqrt().max(1.0))
        } else {
            let c = n as f64 / 2.0;
            (c, c, c / 2.0, c / 2.0)
        };
        let blob = AttentionMap::from_fn(n, n, |x, y| {
            let dx = (x as f64 + 0.5 - cx) / sx;
            let dy = (y as f64 + 0.5 - cy) / sy;
            (-0.5 * (dx * dx + dy * dy)).exp()
        });
        let mut token_labels = vec![START_TOKEN.to_string()];
        token_labels.extend(prompt.split_whitespace().map(str::to_string));
        let mut cross = vec![AttentionMap::from_fn(n, n, |_, _| 1.0)];
        cross.extend(std::iter::repeat_n(blob, token_labels.len() - 1));
        let peak = grid.data.iter().copied().fold(0.0, f64::max);
        let floor = 1e-3 * peak.max(1.0);
        let self_mean = AttentionMap {
            width: n,
            height: n,
            data: grid.data.iter().map(|v| v + floor).collect(),
        };
        Ok(AttentionBundle {
            cross,
            self_mean,
            token_labels,
        })
    }

    fn sample(&self, _prompt: &str, _seed: u64, _steps: Option<usize>) -> Result<RasterImage, CriticError> {
        Ok(self.target.clone())
    }
}
