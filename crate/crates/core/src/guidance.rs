//! Augmented score distillation: a stochastic parameter gradient from the
//! critic's noise-prediction residual, chained back through the encoder,
//! the augmentation and the rasterizer. The noise predictor itself is never
//! differentiated.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{sample_augment, AugmentConfig, AugmentPlan};
use crate::critic::{Critic, CriticInfo, NoiseRequest};
use crate::error::{invalid, CriticError, Error, Result};
use crate::geometry::SketchParams;
use crate::raster::{ParamGrad, Rasterizer};
use crate::schedule::{NoiseSchedule, ScheduleParams, TimestepSampler};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    #[default]
    Constant,
    SigmaSquared,
    SigmaOverAlpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsdsConfig {
    pub guidance_scale: f64,
    pub weight_mode: WeightMode,
    /// Multiplies the timestep weight.
    pub weight_scale: f64,
    pub timesteps: TimestepSampler,
    pub augment: AugmentConfig,
    /// Independent `(t, eps, augmentation)` draws averaged per step.
    pub views: usize,
    /// Optional max-norm for the parameter gradient.
    pub grad_clip: Option<f64>,
}

impl Default for AsdsConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 100.0,
            weight_mode: WeightMode::Constant,
            weight_scale: 1.0,
            timesteps: TimestepSampler::default(),
            augment: AugmentConfig::default(),
            views: 1,
            grad_clip: None,
        }
    }
}

impl AsdsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(invalid("guidance scale must be finite and >= 0"));
        }
        if !(self.weight_scale.is_finite()) {
            return Err(invalid("weight scale must be finite"));
        }
        if self.views == 0 {
            return Err(invalid("asds views must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(invalid("grad_clip must be positive"));
            }
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AsdsDiagnostics {
    pub timesteps: Vec<usize>,
    pub weights: Vec<f64>,
    /// Root-mean-square of `eps_hat - eps`, averaged over views.
    pub residual_rms: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Gradient estimator bound to one critic. The critic's schedule is checked
/// against the local default once, at construction.
pub struct Asds<'a> {
    critic: &'a dyn Critic,
    info: CriticInfo,
    schedule: NoiseSchedule,
    raster: Rasterizer,
    cfg: AsdsConfig,
}

impl<'a> Asds<'a> {
    pub fn new(critic: &'a dyn Critic, cfg: AsdsConfig, raster: Rasterizer) -> Result<Self> {
        cfg.validate()?;
        let info = critic.info()?;
        info.validate()?;
        info.check_schedule(&ScheduleParams::default())?;
        let schedule = NoiseSchedule::new(info.schedule)?;
        Ok(Self {
            critic,
            info,
            schedule,
            raster,
            cfg,
        })
    }

    pub fn info(&self) -> &CriticInfo {
        &self.info
    }

    pub fn config(&self) -> &AsdsConfig {
        &self.cfg
    }

    pub fn weight(&self, t: usize) -> Result<f64> {
        let (a, s) = (self.schedule.alpha(t)?, self.schedule.sigma(t)?);
        let w = match self.cfg.weight_mode {
            WeightMode::Constant => 1.0,
            WeightMode::SigmaSquared => s * s,
            WeightMode::SigmaOverAlpha => s / a,
        };
        Ok(self.cfg.weight_scale * w)
    }

    /// One stochastic gradient estimate; `params` is not modified.
    pub fn step<R: Rng + ?Sized>(
        &self,
        params: &SketchParams,
        prompt: &str,
        rng: &mut R,
    ) -> Result<(ParamGrad, AsdsDiagnostics)> {
        let render = self.raster.render(params)?;
        let aug_cfg = AugmentConfig {
            out_size: self.info.input_resolution,
            ..self.cfg.augment
        };
        let mut total = ParamGrad::zeros(params.len());
        let mut diag = AsdsDiagnostics::default();
        for _ in 0..self.cfg.views {
            let ap = sample_augment(rng, &aug_cfg, render.width, render.height)?;
            let t = self.cfg.timesteps.sample(rng, self.schedule.num_steps())?;
            let seed: u64 = rng.random();
            let plan = AugmentPlan::new(&ap)?;
            let fwd = plan.forward(&render)?;
            let augmented = &fwd.image;
            let latent = self.critic.encode(augmented)?;
            if !latent.is_finite() {
                return Err(CriticError::NonFinite("encode").into());
            }
            let eps = Tensor {
                shape: latent.shape.clone(),
                data: (0..latent.len()).map(|_| StandardNormal.sample(rng)).collect(),
            };
            let z = self.schedule.add_noise(&latent, t, &eps)?;
            let eps_hat = self.critic.predict_noise(&NoiseRequest {
                latent: &z,
                t,
                prompt,
                guidance_scale: self.cfg.guidance_scale,
                seed,
            })?;
            if eps_hat.shape != eps.shape {
                return Err(CriticError::Protocol(format!(
                    "noise prediction shape {:?}, latent shape {:?}",
                    eps_hat.shape, eps.shape
                ))
                .into());
            }
            if !eps_hat.is_finite() {
                return Err(Error::NonFinite(format!("noise prediction at t={t}")));
            }
            let w = self.weight(t)?;
            let mut residual_sq = 0.0;
            let latent_grad = Tensor {
                shape: eps.shape.clone(),
                data: eps_hat
                    .data
                    .iter()
                    .zip(&eps.data)
                    .map(|(h, e)| {
                        residual_sq += (h - e) * (h - e);
                        w * (h - e)
                    })
                    .collect(),
            };
            let image_grad = self.critic.encode_backward(augmented, &latent_grad)?;
            let render_grad = plan.backward(&fwd, &image_grad)?;
            total.add_assign(&self.raster.backward(params, &render_grad)?)?;
            diag.timesteps.push(t);
            diag.weights.push(w);
            diag.residual_rms += (residual_sq / eps.len() as f64).sqrt();
        }
        let views = self.cfg.views as f64;
        if self.cfg.views > 1 {
            total.scale(1.0 / views);
        }
        diag.residual_rms /= views;
        diag.grad_norm = total.l2_norm();
        if let Some(max) = self.cfg.grad_clip {
            if diag.grad_norm > max {
                total.scale(max / diag.grad_norm);
                diag.clipped = true;
            }
        }
        Ok((total, diag))
    }

    /// Mean of `n` independent [`Asds::step`] estimates drawn in sequence
    /// from `rng`.
    pub fn expected<R: Rng + ?Sized>(&self, params: &SketchParams, prompt: &str, n: usize, rng: &mut R) -> Result<ParamGrad> {
        if n == 0 {
            return Err(invalid("need at least one sample"));
        }
        let mut acc = ParamGrad::zeros(params.len());
        for _ in 0..n {
            acc.add_assign(&self.step(params, prompt, rng)?.0)?;
        }
        if n > 1 {
            acc.scale(1.0 / n as f64);
        }
        Ok(acc)
    }
}

/// One-shot form of [`Asds::step`] with the default rasterizer.
pub fn asds_step<R: Rng + ?Sized>(
    params: &SketchParams,
    critic: &dyn Critic,
    prompt: &str,
    cfg: &AsdsConfig,
    rng: &mut R,
) -> Result<(ParamGrad, AsdsDiagnostics)> {
    Asds::new(critic, cfg.clone(), Rasterizer::default())?.step(params, prompt, rng)
}

pub fn expected_asds<R: Rng + ?Sized>(
    params: &SketchParams,
    critic: &dyn Critic,
    prompt: &str,
    cfg: &AsdsConfig,
    n: usize,
    rng: &mut R,
) -> Result<ParamGrad> {
    Asds::new(critic, cfg.clone(), Rasterizer::default())?.expected(params, prompt, n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::{Score, ToyCritic};
    use crate::gradcheck::random_sketch;
    use crate::init::AttentionBundle;
    use crate::perceptual::{FeatureExtractor, FeatureKind, FeatureStack};
    use crate::tensor::RasterImage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_cfg() -> AsdsConfig {
        AsdsConfig {
            augment: AugmentConfig::identity(),
            ..AsdsConfig::default()
        }
    }

    fn sketch(seed: u64, n: usize, side: usize) -> SketchParams {
        random_sketch(&mut ChaCha8Rng::seed_from_u64(seed), n, side, side, 2.0)
    }

    #[test]
    fn gradient_vanishes_at_the_target() {
        let params = sketch(1, 6, 32);
        let critic = ToyCritic::with_resolution(crate::raster::render(&params).unwrap(), 64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let (g, d) = asds_step(&params, &critic, "x", &identity_cfg(), &mut rng).unwrap();
            assert!(g.max_abs() <= 1e-8, "{}", g.max_abs());
            assert!(d.residual_rms < 1e-8);
        }
    }

    #[test]
    fn params_are_not_mutated_and_steps_are_seeded() {
        let params = sketch(3, 5, 32);
        let before = params.clone();
        let critic = ToyCritic::with_resolution(RasterImage::white(32, 32), 48).unwrap();
        let cfg = AsdsConfig::default();
        let a = asds_step(&params, &critic, "x", &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = asds_step(&params, &critic, "x", &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(params, before);
        assert_eq!(a, b);
        assert!(a.0.max_abs() > 0.0);
    }

    #[test]
    fn constant_weight_scales_linearly() {
        let params = sketch(5, 4, 32);
        let critic = ToyCritic::with_resolution(RasterImage::white(32, 32), 32).unwrap();
        let base = identity_cfg();
        let scaled = AsdsConfig {
            weight_scale: 4.0,
            ..base.clone()
        };
        let (g1, _) = asds_step(&params, &critic, "x", &base, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let (g4, _) = asds_step(&params, &critic, "x", &scaled, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        for (a, b) in g1.to_flat().iter().zip(g4.to_flat()) {
            assert!((4.0 * a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }

    #[test]
    fn single_sample_expectation_equals_step() {
        let params = sketch(7, 4, 32);
        let critic = ToyCritic::with_resolution(RasterImage::white(32, 32), 32).unwrap();
        let cfg = AsdsConfig::default();
        let (g, _) = asds_step(&params, &critic, "x", &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let e = expected_asds(&params, &critic, "x", &cfg, 1, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(g, e);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let params = sketch(9, 4, 32);
        let critic = ToyCritic::with_resolution(RasterImage::white(32, 32), 32).unwrap();
        let cfg = AsdsConfig {
            grad_clip: Some(1e-3),
            ..identity_cfg()
        };
        let (g, d) = asds_step(&params, &critic, "x", &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(d.clipped && d.grad_norm > 1e-3);
        assert!((g.l2_norm() - 1e-3).abs() < 1e-12);
    }

    /// Predicts the true noise plus a constant offset, with identity encode.
    struct OffsetCritic {
        inner: ToyCritic,
        offset: f64,
    }

    impl FeatureExtractor for OffsetCritic {
        fn features(&self, i: &RasterImage, k: FeatureKind, l: &[usize]) -> Result<FeatureStack, CriticError> {
            self.inner.features(i, k, l)
        }
        fn features_backward(
            &self,
            i: &RasterImage,
            k: FeatureKind,
            l: &[usize],
            g: &FeatureStack,
        ) -> Result<Tensor, CriticError> {
            self.inner.features_backward(i, k, l, g)
        }
    }

    impl Critic for OffsetCritic {
        fn info(&self) -> Result<CriticInfo, CriticError> {
            self.inner.info()
        }
        fn encode(&self, i: &RasterImage) -> Result<Tensor, CriticError> {
            self.inner.encode(i)
        }
        fn encode_backward(&self, i: &RasterImage, g: &Tensor) -> Result<Tensor, CriticError> {
            self.inner.encode_backward(i, g)
        }
        fn decode(&self, l: &Tensor) -> Result<RasterImage, CriticError> {
            self.inner.decode(l)
        }
        fn predict_noise_raw(&self, req: &NoiseRequest<'_>) -> Result<(Tensor, Tensor), CriticError> {
            let (c, _) = self.inner.predict_noise_raw(req)?;
            let c = c.map(|v| v + self.offset);
            Ok((c.clone(), c))
        }
        fn attention(&self, p: &str, s: u64) -> Result<AttentionBundle, CriticError> {
            self.inner.attention(p, s)
        }
        fn sample(&self, p: &str, s: u64, n: Option<usize>) -> Result<RasterImage, CriticError> {
            self.inner.sample(p, s, n)
        }
        fn score(&self, i: &RasterImage, p: &str) -> Result<Score, CriticError> {
            self.inner.score(i, p)
        }
    }

    #[test]
    fn constant_residual_gives_closed_form_gradient() {
        let params = sketch(11, 5, 32);
        let render = crate::raster::render(&params).unwrap();
        let critic = OffsetCritic {
            inner: ToyCritic::with_resolution(render, 32).unwrap(),
            offset: 0.25,
        };
        let cfg = AsdsConfig {
            weight_mode: WeightMode::SigmaSquared,
            ..identity_cfg()
        };
        let asds = Asds::new(&critic, cfg, Rasterizer::default()).unwrap();
        let (g, d) = asds.step(&params, "x", &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let w = asds.weight(d.timesteps[0]).unwrap();
        let expected = crate::raster::render_backward(&params, &Tensor::filled(&[32, 32, 3], w * 0.25)).unwrap();
        for (a, b) in g.to_flat().iter().zip(expected.to_flat()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_prediction_is_rejected() {
        let params = sketch(13, 3, 16);
        let critic = OffsetCritic {
            inner: ToyCritic::with_resolution(RasterImage::white(16, 16), 16).unwrap(),
            offset: f64::NAN,
        };
        let err = asds_step(&params, &critic, "x", &identity_cfg(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
