//! The synthesis loop: initialization, a perceptual stage against a frozen
//! guide image, a score-distillation stage, Adam updates, checkpoints and
//! drawing-process frames.

use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::resize;
use crate::critic::Critic;
use crate::error::{invalid, Error, Result};
use crate::geometry::{SketchParams, DEFAULT_STROKE_WIDTH, PARAMS_PER_STROKE};
use crate::guidance::{Asds, AsdsConfig};
use crate::init::{fuse_attention, random_init, sample_strokes, InitConfig};
use crate::perceptual::{jvsp_loss_cached, JvspConfig, JvspTarget};
use crate::raster::{ParamGrad, RasterConfig, Rasterizer};
use crate::tensor::RasterImage;

pub const CHECKPOINT_VERSION: u32 = 1;

const INIT_STREAM: u64 = 0;
const ASDS_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_points: f64,
    pub lr_logits: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_points: 1.0,
            lr_logits: 0.01,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_points > 0.0 && self.lr_logits > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(invalid("adam betas must be in [0,1) and eps positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One bias-corrected Adam step. Point coordinates and opacity logits use
/// separate learning rates. Non-finite gradients are rejected before
/// anything is modified.
pub fn adam_update(params: &mut SketchParams, state: &mut AdamState, grad: &ParamGrad, cfg: &AdamConfig) -> Result<()> {
    let g = grad.to_flat();
    let mut x = params.to_flat();
    if g.len() != x.len() || state.m.len() != x.len() || state.v.len() != x.len() {
        return Err(invalid("gradient, state and parameters disagree in size"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter gradient".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for i in 0..x.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let lr = if i % PARAMS_PER_STROKE == PARAMS_PER_STROKE - 1 { cfg.lr_logits } else { cfg.lr_points };
        x[i] -= lr * (state.m[i] / bc1) / ((state.v[i] / bc2).sqrt() + cfg.eps);
    }
    params.set_flat(&x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Perceptual stage only.
    Vanilla,
    /// Score-distillation stage only.
    AsdsOnly,
    /// Perceptual stage followed by score distillation.
    #[default]
    Staged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Attention,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub window: usize,
    /// Stop when the mean loss of the latest window improves on the one
    /// before it by less than this fraction.
    pub min_rel_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub prompt: String,
    pub seed: u64,
    pub n_strokes: usize,
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub stroke_width: f64,
    pub mode: Mode,
    pub init: InitMode,
    pub iters_a: usize,
    pub iters_b: usize,
    pub adam: AdamConfig,
    pub init_cfg: InitConfig,
    pub jvsp: JvspConfig,
    pub asds: AsdsConfig,
    pub raster: RasterConfig,
    /// Sampler steps requested for the guide image.
    pub guide_steps: Option<usize>,
    /// Snapshot cadence in iterations; 0 disables snapshots.
    pub frames_every: usize,
    pub plateau: Option<Plateau>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            seed: 0,
            n_strokes: 64,
            canvas_width: 512,
            canvas_height: 512,
            stroke_width: DEFAULT_STROKE_WIDTH,
            mode: Mode::Staged,
            init: InitMode::Attention,
            iters_a: 500,
            iters_b: 1000,
            adam: AdamConfig::default(),
            init_cfg: InitConfig::default(),
            jvsp: JvspConfig::default(),
            asds: AsdsConfig::default(),
            raster: RasterConfig::default(),
            guide_steps: None,
            frames_every: 0,
            plateau: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_strokes == 0 {
            return Err(invalid("n_strokes must be >= 1"));
        }
        if self.canvas_width == 0 || self.canvas_height == 0 {
            return Err(invalid("canvas must be non-empty"));
        }
        if !(self.stroke_width > 0.0 && self.stroke_width.is_finite()) {
            return Err(invalid("stroke width must be positive"));
        }
        if let Some(p) = self.plateau {
            if p.window == 0 {
                return Err(invalid("plateau window must be >= 1"));
            }
        }
        self.adam.validate()?;
        self.init_cfg.validate()?;
        self.jvsp.validate()?;
        self.asds.validate()
    }

    fn stage_iters(&self, stage: Stage) -> usize {
        match (stage, self.mode) {
            (Stage::Perceptual, Mode::Vanilla | Mode::Staged) => self.iters_a,
            (Stage::Distill, Mode::AsdsOnly | Mode::Staged) => self.iters_b,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Perceptual,
    Distill,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub stage: Stage,
    pub iteration: usize,
    /// Perceptual loss in the first stage; noise residual RMS in the second.
    pub loss: f64,
    pub grad_norm: f64,
    pub timestep: Option<usize>,
    /// MSE against the reference image, when one was supplied.
    pub reference_mse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub records: Vec<IterRecord>,
    pub wall_clock_secs: f64,
    pub final_params: Option<SketchParams>,
    /// `(global iteration, params)` taken every `frames_every` iterations.
    pub snapshots: Vec<(usize, SketchParams)>,
    pub stopped_early: bool,
}

impl RunReport {
    pub fn stage_losses(&self, stage: Stage) -> Vec<f64> {
        self.records.iter().filter(|r| r.stage == stage).map(|r| r.loss).collect()
    }
}

/// Resumable state of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub params: SketchParams,
    pub adam: AdamState,
    pub stage: Stage,
    /// Completed iterations within `stage`.
    pub iteration: usize,
    pub asds_rng: ChaCha8Rng,
    pub guide: Option<EncodedImage>,
    pub reference: Option<EncodedImage>,
    pub report: RunReport,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(invalid(format!("unsupported checkpoint version {}", c.version)));
        }
        c.params.validate()?;
        Ok(c)
    }
}

/// Image stored as base64 of little-endian `f64` values, so checkpoints
/// restore bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedImage {
    pub width: usize,
    pub height: usize,
    pub data: String,
}

impl From<&RasterImage> for EncodedImage {
    fn from(img: &RasterImage) -> Self {
        let bytes: Vec<u8> = img.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            width: img.width,
            height: img.height,
            data: B64.encode(bytes),
        }
    }
}

impl EncodedImage {
    pub fn decode(&self) -> Result<RasterImage> {
        let bytes = B64.decode(&self.data).map_err(|e| invalid(format!("checkpoint image: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(invalid("checkpoint image has a truncated value"));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        RasterImage::new(self.width, self.height, data)
    }
}

/// A failed run together with the state needed to resume it.
#[derive(Debug, thiserror::Error)]
#[error("synthesis stopped at {stage:?} iteration {iteration}: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    pub iteration: usize,
    #[source]
    pub source: Error,
    /// Absent when the run failed before its first iteration.
    pub checkpoint: Option<Box<Checkpoint>>,
}

impl PipelineError {
    pub fn is_retryable(&self) -> bool {
        matches!(&self.source, Error::Critic(e) if e.is_retryable())
    }
}

/// Step-wise driver for one synthesis run.
pub struct Synthesizer<'a> {
    cfg: RunConfig,
    critic: &'a dyn Critic,
    raster: Rasterizer,
    params: SketchParams,
    adam: AdamState,
    stage: Stage,
    iteration: usize,
    asds_rng: ChaCha8Rng,
    guide: Option<RasterImage>,
    jvsp_target: Option<JvspTarget>,
    asds: Option<Asds<'a>>,
    reference: Option<RasterImage>,
    report: RunReport,
    started: Instant,
}

impl<'a> Synthesizer<'a> {
    /// Validates the configuration and draws the initial strokes.
    pub fn new(cfg: RunConfig, critic: &'a dyn Critic) -> Result<Self> {
        cfg.validate()?;
        let params = initialize(&cfg, critic)?;
        Self::from_params(cfg, critic, params)
    }

    /// Starts from caller-provided strokes instead of drawing them.
    pub fn from_params(cfg: RunConfig, critic: &'a dyn Critic, params: SketchParams) -> Result<Self> {
        cfg.validate()?;
        if params.is_empty() {
            return Err(invalid("need at least one stroke"));
        }
        if (params.canvas_w, params.canvas_h) != (cfg.canvas_width, cfg.canvas_height) {
            return Err(invalid("initial strokes do not match the configured canvas"));
        }
        params.validate()?;
        let n = params.to_flat().len();
        let mut asds_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        asds_rng.set_stream(ASDS_STREAM);
        let mut s = Self {
            raster: Rasterizer::new(cfg.raster),
            critic,
            params,
            adam: AdamState::new(n),
            stage: Stage::Perceptual,
            iteration: 0,
            asds_rng,
            guide: None,
            jvsp_target: None,
            asds: None,
            reference: None,
            report: RunReport::default(),
            started: Instant::now(),
            cfg,
        };
        s.skip_empty_stages();
        Ok(s)
    }

    /// Restores a run from a checkpoint. Stage set-up (guide features,
    /// critic validation) is redone lazily.
    pub fn resume(checkpoint: Checkpoint, critic: &'a dyn Critic) -> Result<Self> {
        checkpoint.config.validate()?;
        let guide = checkpoint.guide.as_ref().map(EncodedImage::decode).transpose()?;
        let reference = checkpoint.reference.as_ref().map(EncodedImage::decode).transpose()?;
        Ok(Self {
            raster: Rasterizer::new(checkpoint.config.raster),
            critic,
            params: checkpoint.params,
            adam: checkpoint.adam,
            stage: checkpoint.stage,
            iteration: checkpoint.iteration,
            asds_rng: checkpoint.asds_rng,
            guide,
            jvsp_target: None,
            asds: None,
            reference,
            report: checkpoint.report,
            started: Instant::now(),
            cfg: checkpoint.config,
        })
    }

    /// Records the MSE against `reference` at every iteration.
    pub fn with_reference(mut self, reference: RasterImage) -> Result<Self> {
        if (reference.width, reference.height) != (self.cfg.canvas_width, self.cfg.canvas_height) {
            return Err(invalid("reference image does not match the canvas"));
        }
        self.reference = Some(reference);
        Ok(self)
    }

    pub fn params(&self) -> &SketchParams {
        &self.params
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn report(&self) -> &RunReport {
        &self.report
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn is_done(&self) -> bool {
        self.stage == Stage::Done
    }

    pub fn guide(&self) -> Option<&RasterImage> {
        self.guide.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            stage: self.stage,
            iteration: self.iteration,
            asds_rng: self.asds_rng.clone(),
            guide: self.guide.as_ref().map(EncodedImage::from),
            reference: self.reference.as_ref().map(EncodedImage::from),
            report: self.report.clone(),
        }
    }

    /// Runs one optimizer iteration. Returns `None` once every stage is
    /// finished. On error the state is left as it was before the call.
    pub fn step(&mut self) -> Result<Option<IterRecord>> {
        if self.stage == Stage::Done {
            return Ok(None);
        }
        let rng_before = self.asds_rng.clone();
        let result = self.compute_gradient();
        let (grad, loss, timestep) = match result {
            Ok(v) => v,
            Err(e) => {
                self.asds_rng = rng_before;
                return Err(e);
            }
        };
        adam_update(&mut self.params, &mut self.adam, &grad, &self.cfg.adam)?;
        let reference_mse = match &self.reference {
            Some(r) => Some(self.raster.render(&self.params)?.mse(r)?),
            None => None,
        };
        let record = IterRecord {
            stage: self.stage,
            iteration: self.iteration,
            loss,
            grad_norm: grad.l2_norm(),
            timestep,
            reference_mse,
        };
        debug!("{:?} {} loss {:.6e}", record.stage, record.iteration, record.loss);
        self.report.records.push(record.clone());
        self.iteration += 1;
        let global = self.report.records.len();
        if self.cfg.frames_every > 0 && global % self.cfg.frames_every == 0 {
            self.report.snapshots.push((global, self.params.clone()));
        }
        if self.iteration >= self.cfg.stage_iters(self.stage) || self.plateaued() {
            self.advance_stage();
        }
        Ok(Some(record))
    }

    /// Runs to completion.
    pub fn run(mut self) -> std::result::Result<(SketchParams, RunReport), PipelineError> {
        while !self.is_done() {
            if let Err(source) = self.step() {
                return Err(PipelineError {
                    stage: self.stage,
                    iteration: self.iteration,
                    source,
                    checkpoint: Some(Box::new(self.checkpoint())),
                });
            }
        }
        Ok(self.finish())
    }

    pub fn finish(mut self) -> (SketchParams, RunReport) {
        self.report.wall_clock_secs += self.started.elapsed().as_secs_f64();
        self.report.final_params = Some(self.params.clone());
        info!(
            "synthesis finished after {} iterations in {:.2}s",
            self.report.records.len(),
            self.report.wall_clock_secs
        );
        (self.params, self.report)
    }

    fn compute_gradient(&mut self) -> Result<(ParamGrad, f64, Option<usize>)> {
        match self.stage {
            Stage::Perceptual => {
                self.prepare_perceptual_target()?;
                let target = self.jvsp_target.as_ref().expect("prepared above");
                let img = self.raster.render(&self.params)?;
                let (loss, img_grad) = jvsp_loss_cached(&img, target, self.critic, &self.cfg.jvsp)?;
                Ok((self.raster.backward(&self.params, &img_grad)?, loss, None))
            }
            Stage::Distill => {
                if self.asds.is_none() {
                    self.asds = Some(Asds::new(self.critic, self.cfg.asds.clone(), self.raster)?);
                }
                let asds = self.asds.as_ref().expect("initialized above");
                let (grad, diag) = asds.step(&self.params, &self.cfg.prompt, &mut self.asds_rng)?;
                Ok((grad, diag.residual_rms, diag.timesteps.first().copied()))
            }
            Stage::Done => unreachable!("no gradient after the last stage"),
        }
    }

    fn prepare_perceptual_target(&mut self) -> Result<()> {
        if self.jvsp_target.is_none() {
            let guide = match self.guide.take() {
                Some(g) => g,
                None => {
                    let g = self.critic.sample(&self.cfg.prompt, self.cfg.seed, self.cfg.guide_steps)?;
                    if (g.width, g.height) == (self.cfg.canvas_width, self.cfg.canvas_height) {
                        g
                    } else {
                        resize(&g, self.cfg.canvas_width, self.cfg.canvas_height)?
                    }
                }
            };
            self.jvsp_target = Some(JvspTarget::new(&guide, self.critic, &self.cfg.jvsp)?);
            self.guide = Some(guide);
        }
        Ok(())
    }

    fn plateaued(&self) -> bool {
        let Some(p) = self.cfg.plateau else {
            return false;
        };
        let losses: Vec<f64> = self
            .report
            .records
            .iter()
            .rev()
            .take_while(|r| r.stage == self.stage)
            .map(|r| r.loss)
            .collect();
        if losses.len() < 2 * p.window {
            return false;
        }
        let recent: f64 = losses[..p.window].iter().sum::<f64>() / p.window as f64;
        let before: f64 = losses[p.window..2 * p.window].iter().sum::<f64>() / p.window as f64;
        let stop = before - recent < p.min_rel_improvement * before.abs();
        if stop {
            info!("{:?} stage plateaued after {} iterations", self.stage, self.iteration);
        }
        stop
    }

    fn advance_stage(&mut self) {
        if self.iteration < self.cfg.stage_iters(self.stage) {
            self.report.stopped_early = true;
        }
        self.stage = match self.stage {
            Stage::Perceptual => Stage::Distill,
            _ => Stage::Done,
        };
        self.iteration = 0;
        // the second stage fine-tunes from fresh moments
        self.adam = AdamState::new(self.adam.m.len());
        self.skip_empty_stages();
    }

    fn skip_empty_stages(&mut self) {
        while self.stage != Stage::Done && self.cfg.stage_iters(self.stage) == 0 {
            self.stage = match self.stage {
                Stage::Perceptual => Stage::Distill,
                _ => Stage::Done,
            };
        }
    }
}

/// Draws the initial strokes for `cfg`, from fused attention or uniformly.
pub fn initialize(cfg: &RunConfig, critic: &dyn Critic) -> Result<SketchParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    let (w, h) = (cfg.canvas_width, cfg.canvas_height);
    match cfg.init {
        InitMode::Attention => {
            let bundle = critic.attention(&cfg.prompt, cfg.seed)?;
            let dist = fuse_attention(&bundle, &cfg.init_cfg, w, h)?;
            sample_strokes(&dist, cfg.n_strokes, cfg.init_cfg.radius_frac, cfg.stroke_width, &mut rng)
        }
        InitMode::Random => random_init(cfg.n_strokes, w, h, cfg.init_cfg.radius_frac, cfg.stroke_width, &mut rng),
    }
}

/// Runs a full synthesis.
pub fn synthesize(cfg: RunConfig, critic: &dyn Critic) -> std::result::Result<(SketchParams, RunReport), PipelineError> {
    Synthesizer::new(cfg, critic)
        .map_err(|source| PipelineError {
            stage: Stage::Perceptual,
            iteration: 0,
            source,
            checkpoint: None,
        })?
        .run()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub label: String,
    pub image: RasterImage,
}

/// Drawing-process frames: prefixes `0, k, 2k, ..., n` of the final sketch
/// (the last entry of `history`), then one render per earlier snapshot.
pub fn emit_process_frames(history: &[SketchParams], every_k: usize, raster: &Rasterizer) -> Result<Vec<Frame>> {
    let final_params = history.last().ok_or_else(|| invalid("empty parameter history"))?;
    if every_k == 0 {
        return Err(invalid("frame step must be >= 1"));
    }
    let n = final_params.len();
    let mut counts: Vec<usize> = (0..=n).step_by(every_k).collect();
    if counts.last() != Some(&n) {
        counts.push(n);
    }
    let mut frames = counts
        .into_iter()
        .map(|k| {
            Ok(Frame {
                label: format!("strokes_{k:04}"),
                image: raster.render_partial(final_params, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, p) in history[..history.len() - 1].iter().enumerate() {
        frames.push(Frame {
            label: format!("snapshot_{i:04}"),
            image: raster.render(p)?,
        });
    }
    Ok(frames)
}
