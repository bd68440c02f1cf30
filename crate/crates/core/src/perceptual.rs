//! Joint visual-semantic and perceptual (JVSP) loss between a rendered sketch
//! and a fixed guide image.
//!
//! ```text
//! loss = lpips_weight * sum_l mean_hw |n_l(sketch) - n_l(guide)|^2
//!      + clip_weight  * sum_l ||f_l(sketch) - f_l(guide)||_2
//! ```
//!
//! `n_l` are the extractor's perceptual (unit-normalized, calibrated)
//! features and `f_l` its semantic features at the configured layers. The
//! guide never receives a gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, invalid, CriticError, Result};
use crate::tensor::{RasterImage, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Raw activations of the visual-semantic encoder.
    Clip,
    /// Perceptual features: per-position unit-normalized and calibrated, so
    /// the perceptual distance is a plain mean squared difference.
    Lpips,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayer {
    pub name: String,
    /// `[channels, height, width]`.
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStack {
    pub layers: Vec<FeatureLayer>,
}

impl FeatureStack {
    pub fn validate(&self) -> Result<(), CriticError> {
        if self.layers.is_empty() {
            return Err(CriticError::Protocol("empty feature stack".into()));
        }
        for l in &self.layers {
            if l.tensor.shape.len() != 3 || l.tensor.shape.iter().product::<usize>() != l.tensor.data.len() {
                return Err(CriticError::Protocol(format!("layer {} is not a [C,H,W] tensor", l.name)));
            }
            if !l.tensor.is_finite() {
                return Err(CriticError::NonFinite("features"));
            }
        }
        Ok(())
    }

    fn check_compatible(&self, other: &FeatureStack) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(invalid("feature stacks have different layer counts"));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            check_shape(&a.tensor.shape, &b.tensor.shape)?;
        }
        Ok(())
    }
}

/// Anything that maps an image to feature stacks and back-propagates
/// feature gradients to the image.
pub trait FeatureExtractor: Send + Sync {
    /// `layers` selects semantic layers; perceptual requests pass an empty
    /// slice to get every perceptual layer.
    fn features(&self, image: &RasterImage, kind: FeatureKind, layers: &[usize]) -> Result<FeatureStack, CriticError>;

    /// Vector-Jacobian product: image gradient of `sum_l <grads_l, features_l>`.
    fn features_backward(
        &self,
        image: &RasterImage,
        kind: FeatureKind,
        layers: &[usize],
        grads: &FeatureStack,
    ) -> Result<Tensor, CriticError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JvspConfig {
    pub lpips_weight: f64,
    pub clip_weight: f64,
    pub clip_layers: Vec<usize>,
}

impl Default for JvspConfig {
    fn default() -> Self {
        Self {
            lpips_weight: 0.2,
            clip_weight: 1.0,
            clip_layers: vec![3, 4],
        }
    }
}

impl JvspConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lpips_weight >= 0.0 && self.clip_weight >= 0.0) {
            return Err(invalid("jvsp weights must be non-negative"));
        }
        if self.clip_weight > 0.0 && self.clip_layers.is_empty() {
            return Err(invalid("jvsp clip term needs at least one layer"));
        }
        Ok(())
    }
}

/// Guide features computed once and reused across iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct JvspTarget {
    pub width: usize,
    pub height: usize,
    clip: Option<FeatureStack>,
    lpips: Option<FeatureStack>,
}

impl JvspTarget {
    pub fn new(guide: &RasterImage, extractor: &dyn FeatureExtractor, cfg: &JvspConfig) -> Result<Self> {
        cfg.validate()?;
        let clip = if cfg.clip_weight > 0.0 {
            Some(checked(extractor.features(guide, FeatureKind::Clip, &cfg.clip_layers)?)?)
        } else {
            None
        };
        let lpips = if cfg.lpips_weight > 0.0 {
            Some(checked(extractor.features(guide, FeatureKind::Lpips, &[])?)?)
        } else {
            None
        };
        Ok(Self {
            width: guide.width,
            height: guide.height,
            clip,
            lpips,
        })
    }
}

fn checked(stack: FeatureStack) -> Result<FeatureStack> {
    stack.validate()?;
    Ok(stack)
}

/// JVSP loss and its gradient with respect to the sketch pixels.
pub fn jvsp_loss(
    sketch: &RasterImage,
    guide: &RasterImage,
    extractor: &dyn FeatureExtractor,
    cfg: &JvspConfig,
) -> Result<(f64, Tensor)> {
    check_shape(&sketch.shape(), &guide.shape())?;
    let target = JvspTarget::new(guide, extractor, cfg)?;
    jvsp_loss_cached(sketch, &target, extractor, cfg)
}

pub fn jvsp_loss_cached(
    sketch: &RasterImage,
    target: &JvspTarget,
    extractor: &dyn FeatureExtractor,
    cfg: &JvspConfig,
) -> Result<(f64, Tensor)> {
    if (sketch.width, sketch.height) != (target.width, target.height) {
        return Err(invalid(format!(
            "sketch is {}x{}, guide is {}x{}",
            sketch.width, sketch.height, target.width, target.height
        )));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&sketch.shape());

    if let (true, Some(guide_f)) = (cfg.clip_weight > 0.0, &target.clip) {
        let f = checked(extractor.features(sketch, FeatureKind::Clip, &cfg.clip_layers)?)?;
        f.check_compatible(guide_f)?;
        let mut layer_grads = f.clone();
        for (lg, (a, b)) in layer_grads.layers.iter_mut().zip(f.layers.iter().zip(&guide_f.layers)) {
            let norm = a.tensor.data.iter().zip(&b.tensor.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            loss += cfg.clip_weight * norm;
            for (g, (x, y)) in lg.tensor.data.iter_mut().zip(a.tensor.data.iter().zip(&b.tensor.data)) {
                // the norm has no gradient at zero; use zero there
                *g = if norm > 0.0 { cfg.clip_weight * (x - y) / norm } else { 0.0 };
            }
        }
        grad.add_assign(&extractor.features_backward(sketch, FeatureKind::Clip, &cfg.clip_layers, &layer_grads)?)?;
    }

    if let (true, Some(guide_f)) = (cfg.lpips_weight > 0.0, &target.lpips) {
        let f = checked(extractor.features(sketch, FeatureKind::Lpips, &[])?)?;
        f.check_compatible(guide_f)?;
        let mut layer_grads = f.clone();
        for (lg, (a, b)) in layer_grads.layers.iter_mut().zip(f.layers.iter().zip(&guide_f.layers)) {
            let spatial = (a.tensor.shape[1] * a.tensor.shape[2]) as f64;
            let sq: f64 = a.tensor.data.iter().zip(&b.tensor.data).map(|(x, y)| (x - y) * (x - y)).sum();
            loss += cfg.lpips_weight * sq / spatial;
            for (g, (x, y)) in lg.tensor.data.iter_mut().zip(a.tensor.data.iter().zip(&b.tensor.data)) {
                *g = cfg.lpips_weight * 2.0 * (x - y) / spatial;
            }
        }
        grad.add_assign(&extractor.features_backward(sketch, FeatureKind::Lpips, &[], &layer_grads)?)?;
    }
    Ok((loss, grad))
}

/// Deterministic stand-in extractor: a stack of random 3x3 stride-2
/// convolutions with `tanh` activations. Layers are numbered from
/// [`BuiltinExtractor::FIRST_LAYER`] so the default semantic layers `{3, 4}`
/// select the two default layers.
#[derive(Debug, Clone)]
pub struct BuiltinExtractor {
    convs: Vec<Conv>,
}

#[derive(Debug, Clone)]
struct Conv {
    cin: usize,
    cout: usize,
    // [cout][cin][3][3]
    weight: Vec<f64>,
    bias: Vec<f64>,
}

const LPIPS_EPS: f64 = 1e-10;

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

impl BuiltinExtractor {
    pub const FIRST_LAYER: usize = 3;

    pub fn new(seed: u64) -> Self {
        Self::with_depth(seed, 2)
    }

    pub fn with_depth(seed: u64, depth: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let convs = (0..depth.max(1))
            .map(|l| {
                let cout = 8 << l.min(2);
                let scale = 1.5 / ((cin * 9) as f64).sqrt();
                let weight = (0..cout * cin * 9)
                    .map(|_| scale * sample_normal(&mut rng))
                    .collect();
                let bias = (0..cout).map(|_| 0.1 * sample_normal(&mut rng)).collect();
                let conv = Conv { cin, cout, weight, bias };
                cin = cout;
                conv
            })
            .collect();
        Self { convs }
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        (0..self.convs.len()).map(|i| i + Self::FIRST_LAYER).collect()
    }

    fn resolve(&self, kind: FeatureKind, layers: &[usize]) -> Result<Vec<usize>, CriticError> {
        if kind == FeatureKind::Lpips && layers.is_empty() {
            return Ok((0..self.convs.len()).collect());
        }
        layers
            .iter()
            .map(|&id| {
                id.checked_sub(Self::FIRST_LAYER)
                    .filter(|&i| i < self.convs.len())
                    .ok_or_else(|| CriticError::Protocol(format!("unknown feature layer {id}")))
            })
            .collect()
    }

    /// Activations `[C,H,W]` of every layer.
    fn forward(&self, image: &RasterImage) -> Vec<Tensor> {
        let mut x = to_planar(image);
        let mut acts = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            x = conv.forward(&x).map(f64::tanh);
            acts.push(x.clone());
        }
        acts
    }
}

impl FeatureExtractor for BuiltinExtractor {
    fn features(&self, image: &RasterImage, kind: FeatureKind, layers: &[usize]) -> Result<FeatureStack, CriticError> {
        let idx = self.resolve(kind, layers)?;
        let acts = self.forward(image);
        let layers = idx
            .iter()
            .map(|&i| FeatureLayer {
                name: (i + Self::FIRST_LAYER).to_string(),
                tensor: match kind {
                    FeatureKind::Clip => acts[i].clone(),
                    FeatureKind::Lpips => unit_normalize(&acts[i]),
                },
            })
            .collect();
        Ok(FeatureStack { layers })
    }

    fn features_backward(
        &self,
        image: &RasterImage,
        kind: FeatureKind,
        layers: &[usize],
        grads: &FeatureStack,
    ) -> Result<Tensor, CriticError> {
        let idx = self.resolve(kind, layers)?;
        if grads.layers.len() != idx.len() {
            return Err(CriticError::Protocol("feature gradient layer count mismatch".into()));
        }
        let input = to_planar(image);
        let acts = self.forward(image);
        let mut upstream: Vec<Option<Vec<f64>>> = vec![None; self.convs.len()];
        for (&i, g) in idx.iter().zip(&grads.layers) {
            if g.tensor.shape != acts[i].shape {
                return Err(CriticError::Protocol(format!("gradient for layer {} has wrong shape", g.name)));
            }
            let g = match kind {
                FeatureKind::Clip => g.tensor.data.clone(),
                FeatureKind::Lpips => unit_normalize_backward(&acts[i], &g.tensor),
            };
            match &mut upstream[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        // walk the stack from the top, carrying the activation gradient
        let mut carry: Option<Vec<f64>> = None;
        for l in (0..self.convs.len()).rev() {
            let mut g = match (carry.take(), upstream[l].take()) {
                (Some(mut c), Some(u)) => {
                    c.iter_mut().zip(&u).for_each(|(a, b)| *a += b);
                    c
                }
                (Some(c), None) => c,
                (None, Some(u)) => u,
                (None, None) => continue,
            };
            // through tanh
            g.iter_mut().zip(&acts[l].data).for_each(|(g, a)| *g *= 1.0 - a * a);
            let below = if l == 0 { &input } else { &acts[l - 1] };
            carry = Some(self.convs[l].backward_input(below, &g));
        }
        let planar = carry.unwrap_or_else(|| vec![0.0; input.data.len()]);
        Ok(from_planar_grad(&planar, image.width, image.height))
    }
}

impl Conv {
    fn out_dim(n: usize) -> usize {
        n.div_ceil(2)
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let (h, w) = (x.shape[1], x.shape[2]);
        let (oh, ow) = (Self::out_dim(h), Self::out_dim(w));
        let mut out = vec![0.0; self.cout * oh * ow];
        for co in 0..self.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.bias[co];
                    for ci in 0..self.cin {
                        for ky in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += self.weight[((co * self.cin + ci) * 3 + ky) * 3 + kx]
                                    * x.data[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor {
            shape: vec![self.cout, oh, ow],
            data: out,
        }
    }

    fn backward_input(&self, x: &Tensor, g: &[f64]) -> Vec<f64> {
        let (h, w) = (x.shape[1], x.shape[2]);
        let (oh, ow) = (Self::out_dim(h), Self::out_dim(w));
        let mut gx = vec![0.0; x.data.len()];
        for co in 0..self.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[(co * oh + oy) * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ci in 0..self.cin {
                        for ky in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                gx[(ci * h + iy as usize) * w + ix as usize] +=
                                    self.weight[((co * self.cin + ci) * 3 + ky) * 3 + kx] * go;
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

// Interleaved RGB in [0,1] to planar [3,H,W] in [-1,1].
fn to_planar(image: &RasterImage) -> Tensor {
    let (w, h) = (image.width, image.height);
    let mut data = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = 2.0 * image.data[(y * w + x) * 3 + c] - 1.0;
            }
        }
    }
    Tensor {
        shape: vec![3, h, w],
        data,
    }
}

fn from_planar_grad(g: &[f64], w: usize, h: usize) -> Tensor {
    let mut data = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(y * w + x) * 3 + c] = 2.0 * g[(c * h + y) * w + x];
            }
        }
    }
    Tensor {
        shape: vec![h, w, 3],
        data,
    }
}

fn unit_normalize(a: &Tensor) -> Tensor {
    let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
    let hw = h * w;
    let mut out = a.clone();
    for p in 0..hw {
        let norm = (0..c).map(|k| a.data[k * hw + p].powi(2)).sum::<f64>().sqrt();
        for k in 0..c {
            out.data[k * hw + p] = a.data[k * hw + p] / (norm + LPIPS_EPS);
        }
    }
    out
}

fn unit_normalize_backward(a: &Tensor, g: &Tensor) -> Vec<f64> {
    let (c, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
    let hw = h * w;
    let mut out = vec![0.0; a.data.len()];
    for p in 0..hw {
        let r = (0..c).map(|k| a.data[k * hw + p].powi(2)).sum::<f64>().sqrt();
        let d = r + LPIPS_EPS;
        let ag: f64 = (0..c).map(|k| a.data[k * hw + p] * g.data[k * hw + p]).sum();
        for k in 0..c {
            let i = k * hw + p;
            out[i] = g.data[i] / d - if r > 0.0 { a.data[i] * ag / (r * d * d) } else { 0.0 };
        }
    }
    out
}
