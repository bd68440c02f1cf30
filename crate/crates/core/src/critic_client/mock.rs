//! Serves any in-process [`Critic`] over the critic protocol on a loopback
//! port. Used by the client tests and the examples; it is also a reference
//! for what a real server has to answer.

use std::io;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Method, Request, Response, Server};

use crate::critic::{Critic, CriticInfo, NoiseRequest};
use crate::error::CriticError;
use crate::critic_client::wire::*;

#[derive(Debug, Clone, Default)]
pub struct MockOptions {
    /// Reported by `/info` instead of the wrapped critic's own info.
    pub info: Option<CriticInfo>,
}

struct Shared {
    critic: Arc<dyn Critic>,
    options: MockOptions,
    pending_failures: AtomicUsize,
    requests: AtomicUsize,
}

/// Background HTTP server. Stops when dropped.
pub struct MockServer {
    server: Arc<Server>,
    shared: Arc<Shared>,
    url: String,
    handle: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn start(critic: Arc<dyn Critic>) -> io::Result<Self> {
        Self::start_with(critic, MockOptions::default())
    }

    pub fn start_with(critic: Arc<dyn Critic>, options: MockOptions) -> io::Result<Self> {
        let server = Arc::new(Server::http("127.0.0.1:0").map_err(io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("mock server has no IP address"))?;
        let shared = Arc::new(Shared {
            critic,
            options,
            pending_failures: AtomicUsize::new(0),
            requests: AtomicUsize::new(0),
        });
        let handle = {
            let server = Arc::clone(&server);
            let shared = Arc::clone(&shared);
            std::thread::spawn(move || {
                for req in server.incoming_requests() {
                    shared.handle(req);
                }
            })
        };
        Ok(Self {
            server,
            shared,
            url: format!("http://{addr}"),
            handle: Some(handle),
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// The next `n` requests are answered with `503` and `Retry-After: 0`.
    pub fn fail_next(&self, n: usize) {
        self.shared.pending_failures.store(n, Ordering::SeqCst);
    }

    /// Requests received so far, including injected failures.
    pub fn request_count(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

type Reply = (u16, String);

fn json_reply<T: Serialize>(value: &T) -> Reply {
    match serde_json::to_string(value) {
        Ok(s) => (200, s),
        Err(e) => error_reply(500, "internal", e.to_string()),
    }
}

fn error_reply(status: u16, code: &str, message: impl Into<String>) -> Reply {
    let body = serde_json::to_string(&ErrorBody::new(code, message)).unwrap_or_default();
    (status, body)
}

fn critic_error(e: CriticError) -> Reply {
    match e {
        CriticError::Protocol(m) => error_reply(400, "bad_request", m),
        CriticError::Unsupported(what) => error_reply(501, "unsupported", what),
        CriticError::Transport(m) => error_reply(503, "unavailable", m),
        CriticError::Server { status, code, message } => error_reply(status, &code, message),
        other => error_reply(500, "internal", other.to_string()),
    }
}

fn parse<T: DeserializeOwned>(body: &str) -> Result<T, Reply> {
    serde_json::from_str(body).map_err(|e| error_reply(400, "bad_request", e.to_string()))
}

impl Shared {
    fn handle(&self, mut req: Request) {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let mut body = String::new();
        let (status, text) = if let Err(e) = req.as_reader().read_to_string(&mut body) {
            error_reply(400, "bad_request", e.to_string())
        } else if self
            .pending_failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
        {
            error_reply(503, "overloaded", "injected failure")
        } else {
            let path = req.url().split('?').next().unwrap_or("").to_string();
            self.route(req.method(), &path, &body).unwrap_or_else(|r| r)
        };
        let mut resp = Response::from_string(text).with_status_code(status);
        if let Ok(h) = Header::from_bytes("Content-Type", "application/json") {
            resp = resp.with_header(h);
        }
        if status == 503 {
            if let Ok(h) = Header::from_bytes("Retry-After", "0") {
                resp = resp.with_header(h);
            }
        }
        if let Err(e) = req.respond(resp) {
            log::warn!("mock critic: failed to respond: {e}");
        }
    }

    fn route(&self, method: &Method, path: &str, body: &str) -> Result<Reply, Reply> {
        let c = self.critic.as_ref();
        let reply = match (method, path) {
            (Method::Get, "/info") => match &self.options.info {
                Some(info) => json_reply(info),
                None => json_reply(&c.info().map_err(critic_error)?),
            },
            (Method::Post, "/sample") => {
                let r: SampleRequest = parse(body)?;
                let img = c.sample(&r.prompt, r.seed, r.steps).map_err(critic_error)?;
                json_reply(&ImageMessage {
                    image: WireTensor::from_image(&img),
                })
            }
            (Method::Post, "/encode") => {
                let r: ImageMessage = parse(body)?;
                let img = r.image.decode_image("image").map_err(critic_error)?;
                let latent = c.encode(&img).map_err(critic_error)?;
                json_reply(&LatentMessage {
                    latent: WireTensor::encode(&latent),
                })
            }
            (Method::Post, "/encode_backward") => {
                let r: EncodeBackwardRequest = parse(body)?;
                let img = r.image.decode_image("image").map_err(critic_error)?;
                let g = r.latent_grad.decode("latent_grad").map_err(critic_error)?;
                let grad = c.encode_backward(&img, &g).map_err(critic_error)?;
                json_reply(&ImageGradMessage {
                    image_grad: WireTensor::encode(&grad),
                })
            }
            (Method::Post, "/decode") => {
                let r: LatentMessage = parse(body)?;
                let latent = r.latent.decode("latent").map_err(critic_error)?;
                let img = c.decode(&latent).map_err(critic_error)?;
                json_reply(&ImageMessage {
                    image: WireTensor::from_image(&img),
                })
            }
            (Method::Post, "/predict_noise") => {
                let r: PredictNoiseRequest = parse(body)?;
                let latent = r.latent.decode("latent").map_err(critic_error)?;
                let nr = NoiseRequest {
                    latent: &latent,
                    t: r.t,
                    prompt: &r.prompt,
                    guidance_scale: r.guidance_scale,
                    seed: r.seed,
                };
                if r.raw {
                    let (cond, uncond) = c.predict_noise_raw(&nr).map_err(critic_error)?;
                    json_reply(&EpsPairMessage {
                        eps_cond: WireTensor::encode(&cond),
                        eps_uncond: WireTensor::encode(&uncond),
                    })
                } else {
                    let eps = c.predict_noise(&nr).map_err(critic_error)?;
                    json_reply(&EpsMessage {
                        eps: WireTensor::encode(&eps),
                    })
                }
            }
            (Method::Post, "/attention") => {
                let r: AttentionRequest = parse(body)?;
                let b = c.attention(&r.prompt, r.seed).map_err(critic_error)?;
                json_reply(&AttentionMessage::encode(&b))
            }
            (Method::Post, "/features") => {
                let r: FeaturesRequest = parse(body)?;
                let img = r.image.decode_image("image").map_err(critic_error)?;
                let s = c.features(&img, r.kind, &r.layers).map_err(critic_error)?;
                json_reply(&FeatureMessage::encode(&s))
            }
            (Method::Post, "/features_backward") => {
                let r: FeaturesBackwardRequest = parse(body)?;
                let img = r.image.decode_image("image").map_err(critic_error)?;
                let grads = r.grads.decode().map_err(critic_error)?;
                let g = c
                    .features_backward(&img, r.kind, &r.layers, &grads)
                    .map_err(critic_error)?;
                json_reply(&ImageGradMessage {
                    image_grad: WireTensor::encode(&g),
                })
            }
            (Method::Post, "/score") => {
                let r: ScoreRequest = parse(body)?;
                let img = r.image.decode_image("image").map_err(critic_error)?;
                json_reply(&c.score(&img, &r.prompt).map_err(critic_error)?)
            }
            _ => error_reply(404, "not_found", format!("{method} {path}")),
        };
        Ok(reply)
    }
}
