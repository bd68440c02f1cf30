//! HTTP client for a remote critic server, plus an in-process mock server
//! that exposes any [`Critic`] over the same protocol.
//!
//! | method | path                | request                                          | response                      |
//! |--------|---------------------|--------------------------------------------------|-------------------------------|
//! | GET    | `/info`             |                                                  | [`CriticInfo`]                |
//! | POST   | `/sample`           | `{prompt, seed, steps?}`                         | `{image}`                     |
//! | POST   | `/encode`           | `{image}`                                        | `{latent}`                    |
//! | POST   | `/encode_backward`  | `{image, latent_grad}`                           | `{image_grad}`                |
//! | POST   | `/predict_noise`    | `{latent, t, prompt, guidance_scale, seed, raw}` | `{eps}` or `{eps_cond, eps_uncond}` |
//! | POST   | `/decode`           | `{latent}`                                       | `{image}`                     |
//! | POST   | `/attention`        | `{prompt, seed}`                                 | `{cross, self_mean, token_labels}` |
//! | POST   | `/features`         | `{image, kind, layers}`                          | `{layers: [{name, tensor}]}`  |
//! | POST   | `/features_backward`| `{image, kind, layers, grads}`                   | `{image_grad}`                |
//! | POST   | `/score`            | `{image, prompt}`                                | `{clip_text_cosine, aesthetic}` |
//!
//! Errors come back as `{"error": {"code", "message"}}` with a 4xx/5xx
//! status. 502, 503, 504 and transport failures are retried with exponential backoff.

pub mod mock;
pub mod wire;

use std::sync::{Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use ureq::Agent;

use crate::critic::{Critic, CriticInfo, NoiseRequest, Score};
use crate::error::CriticError;
use crate::init::AttentionBundle;
use crate::perceptual::{FeatureExtractor, FeatureKind, FeatureStack};
use crate::schedule::ScheduleParams;
use crate::tensor::{RasterImage, Tensor};
use wire::*;

/// Upper bound on a response body.
const MAX_BODY_BYTES: u64 = 1 << 30;
/// Longest `Retry-After` the client will honour.
const MAX_RETRY_AFTER: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(200),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff.mul_f64(self.multiplier.powi(retry as i32))
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// Schedule the server must report.
    pub local_schedule: ScheduleParams,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(300),
            retry: RetryPolicy::default(),
            local_schedule: ScheduleParams::default(),
        }
    }
}

/// [`Critic`] backed by a remote server. `/info` is fetched and validated
/// once, in [`HttpCritic::connect`].
#[derive(Debug)]
pub struct HttpCritic {
    base: String,
    agent: Agent,
    info: CriticInfo,
    retry: RetryPolicy,
    serial: Option<Mutex<()>>,
}

enum Attempt {
    Done(String),
    Retry(CriticError, Option<Duration>),
    Fail(CriticError),
}

impl HttpCritic {
    pub fn connect(url: &str) -> Result<Self, CriticError> {
        Self::connect_with(url, ClientConfig::default())
    }

    /// Fetches `/info` and refuses servers whose schedule differs from
    /// `cfg.local_schedule`.
    pub fn connect_with(url: &str, cfg: ClientConfig) -> Result<Self, CriticError> {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut client = Self {
            base: url.trim_end_matches('/').to_string(),
            agent,
            info: CriticInfo {
                latent_factor: 1,
                latent_channels: 1,
                input_resolution: 1,
                schedule: cfg.local_schedule,
                supports_concurrency: false,
            },
            retry: cfg.retry,
            serial: None,
        };
        let info: CriticInfo = client.call("/info", None::<&()>)?;
        info.validate()?;
        info.check_schedule(&cfg.local_schedule)?;
        if !info.supports_concurrency {
            client.serial = Some(Mutex::new(()));
        }
        log::info!("connected to critic at {} ({info:?})", client.base);
        client.info = info;
        Ok(client)
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    pub fn cached_info(&self) -> &CriticInfo {
        &self.info
    }

    fn latent_shape(&self) -> [usize; 3] {
        let side = self.info.input_resolution / self.info.latent_factor;
        [side, side, self.info.latent_channels]
    }

    fn image_shape(&self) -> [usize; 3] {
        let r = self.info.input_resolution;
        [r, r, 3]
    }

    fn check_image(&self, image: &RasterImage) -> Result<(), CriticError> {
        let r = self.info.input_resolution;
        if image.width != r || image.height != r {
            return Err(CriticError::Protocol(format!(
                "critic expects {r}x{r} images, got {}x{}",
                image.width, image.height
            )));
        }
        Ok(())
    }

    fn check_latent(&self, latent: &Tensor) -> Result<(), CriticError> {
        if latent.shape != self.latent_shape() {
            return Err(CriticError::Protocol(format!(
                "latent shape {:?}, critic expects {:?}",
                latent.shape,
                self.latent_shape()
            )));
        }
        Ok(())
    }

    fn lock(&self) -> Option<MutexGuard<'_, ()>> {
        self.serial.as_ref().map(|m| m.lock().unwrap_or_else(|e| e.into_inner()))
    }

    /// GET when `body` is `None`, POST otherwise.
    fn call<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: Option<&B>) -> Result<R, CriticError> {
        let payload = body
            .map(serde_json::to_string)
            .transpose()
            .map_err(|e| CriticError::Protocol(format!("encoding {path} request: {e}")))?;
        let _guard = self.lock();
        let mut retry = 0;
        loop {
            match self.attempt(path, payload.as_deref()) {
                Attempt::Done(text) => {
                    return serde_json::from_str(&text)
                        .map_err(|e| CriticError::Protocol(format!("decoding {path} response: {e}")));
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e, after) => {
                    if retry >= self.retry.max_retries {
                        return Err(e);
                    }
                    let wait = after.unwrap_or_else(|| self.retry.backoff(retry));
                    log::warn!("{path}: {e}; retrying in {wait:?}");
                    thread::sleep(wait);
                    retry += 1;
                }
            }
        }
    }

    fn attempt(&self, path: &str, payload: Option<&str>) -> Attempt {
        let url = format!("{}{}", self.base, path);
        let sent = match payload {
            None => self.agent.get(&url).call(),
            Some(p) => self
                .agent
                .post(&url)
                .header("content-type", "application/json")
                .send(p.as_bytes()),
        };
        let mut resp = match sent {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(CriticError::Transport(format!("{path}: {e}")), None),
        };
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<u64>().ok())
            .map(|s| Duration::from_secs(s).min(MAX_RETRY_AFTER));
        let text = match resp.body_mut().with_config().limit(MAX_BODY_BYTES).read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(CriticError::Transport(format!("{path}: reading body: {e}")), None),
        };
        if (200..300).contains(&status) {
            return Attempt::Done(text);
        }
        let (code, message) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => (b.error.code, b.error.message),
            Err(_) => ("unknown".to_string(), text.chars().take(200).collect()),
        };
        if matches!(status, 502..=504) {
            return Attempt::Retry(
                CriticError::Transport(format!("{path}: status {status} ({code}): {message}")),
                retry_after,
            );
        }
        Attempt::Fail(CriticError::Server { status, code, message })
    }
}

impl FeatureExtractor for HttpCritic {
    fn features(&self, image: &RasterImage, kind: FeatureKind, layers: &[usize]) -> Result<FeatureStack, CriticError> {
        let req = FeaturesRequest {
            image: WireTensor::from_image(image),
            kind,
            layers: layers.to_vec(),
        };
        let resp: FeatureMessage = self.call("/features", Some(&req))?;
        resp.decode()
    }

    fn features_backward(
        &self,
        image: &RasterImage,
        kind: FeatureKind,
        layers: &[usize],
        grads: &FeatureStack,
    ) -> Result<Tensor, CriticError> {
        let req = FeaturesBackwardRequest {
            image: WireTensor::from_image(image),
            kind,
            layers: layers.to_vec(),
            grads: FeatureMessage::encode(grads),
        };
        let resp: ImageGradMessage = self.call("/features_backward", Some(&req))?;
        resp.image_grad.decode_shaped("image_grad", &image.shape())
    }
}

impl Critic for HttpCritic {
    fn info(&self) -> Result<CriticInfo, CriticError> {
        Ok(self.info.clone())
    }

    fn encode(&self, image: &RasterImage) -> Result<Tensor, CriticError> {
        self.check_image(image)?;
        let resp: LatentMessage = self.call(
            "/encode",
            Some(&ImageMessage {
                image: WireTensor::from_image(image),
            }),
        )?;
        resp.latent.decode_shaped("latent", &self.latent_shape())
    }

    fn encode_backward(&self, image: &RasterImage, latent_grad: &Tensor) -> Result<Tensor, CriticError> {
        self.check_image(image)?;
        self.check_latent(latent_grad)?;
        let req = EncodeBackwardRequest {
            image: WireTensor::from_image(image),
            latent_grad: WireTensor::encode(latent_grad),
        };
        let resp: ImageGradMessage = self.call("/encode_backward", Some(&req))?;
        resp.image_grad.decode_shaped("image_grad", &self.image_shape())
    }

    fn decode(&self, latent: &Tensor) -> Result<RasterImage, CriticError> {
        self.check_latent(latent)?;
        let resp: ImageMessage = self.call(
            "/decode",
            Some(&LatentMessage {
                latent: WireTensor::encode(latent),
            }),
        )?;
        resp.image.decode_shaped("image", &self.image_shape())?;
        resp.image.decode_image("image")
    }

    fn predict_noise_raw(&self, req: &NoiseRequest<'_>) -> Result<(Tensor, Tensor), CriticError> {
        self.check_latent(req.latent)?;
        let resp: EpsPairMessage = self.call("/predict_noise", Some(&noise_request(req, true)))?;
        Ok((
            resp.eps_cond.decode_shaped("eps_cond", &req.latent.shape)?,
            resp.eps_uncond.decode_shaped("eps_uncond", &req.latent.shape)?,
        ))
    }

    /// Guidance is combined server-side, one round trip per step.
    fn predict_noise(&self, req: &NoiseRequest<'_>) -> Result<Tensor, CriticError> {
        self.check_latent(req.latent)?;
        let resp: EpsMessage = self.call("/predict_noise", Some(&noise_request(req, false)))?;
        resp.eps.decode_shaped("eps", &req.latent.shape)
    }

    fn attention(&self, prompt: &str, seed: u64) -> Result<AttentionBundle, CriticError> {
        let req = AttentionRequest {
            prompt: prompt.to_string(),
            seed,
        };
        let resp: AttentionMessage = self.call("/attention", Some(&req))?;
        resp.decode()
    }

    fn sample(&self, prompt: &str, seed: u64, steps: Option<usize>) -> Result<RasterImage, CriticError> {
        let req = SampleRequest {
            prompt: prompt.to_string(),
            seed,
            steps,
        };
        let resp: ImageMessage = self.call("/sample", Some(&req))?;
        resp.image.decode_image("image")
    }

    fn score(&self, image: &RasterImage, prompt: &str) -> Result<Score, CriticError> {
        let req = ScoreRequest {
            image: WireTensor::from_image(image),
            prompt: prompt.to_string(),
        };
        let s: Score = self.call("/score", Some(&req))?;
        if !(s.clip_text_cosine.is_finite() && s.aesthetic.is_finite()) {
            return Err(CriticError::NonFinite("score"));
        }
        Ok(s)
    }
}

pub fn noise_request(req: &NoiseRequest<'_>, raw: bool) -> PredictNoiseRequest {
    PredictNoiseRequest {
        latent: WireTensor::encode(req.latent),
        t: req.t,
        prompt: req.prompt.to_string(),
        guidance_scale: req.guidance_scale,
        seed: req.seed,
        raw,
    }
}
