//! Differentiable augmentation: random perspective, resized crop and
//! sharpness adjustment, producing a square image at the critic resolution.
//!
//! Every stage is affine in its input: bilinear resampling reads the white
//! background (1.0) outside the source, and the sharpness blend is linear.
//! The final output is clamped to `[0, 1]`. [`augment_backward`] applies the
//! transpose of the linear part, masked where the clamp was active, which is
//! the exact Jacobian-transpose of [`apply_augment`] away from the clamp
//! boundary.

use nalgebra::{Matrix3, SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, invalid, Result};
use crate::tensor::{RasterImage, Tensor};

/// Output side length expected by the latent diffusion critic.
pub const CRITIC_RESOLUTION: usize = 512;

const MAX_RESAMPLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub distortion_scale: f64,
    pub p_perspective: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub sharpness: f64,
    pub p_sharpness: f64,
    pub out_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            distortion_scale: 0.5,
            p_perspective: 0.7,
            crop_scale_min: 0.8,
            crop_scale_max: 1.0,
            aspect_min: 0.95,
            aspect_max: 1.05,
            sharpness: 2.0,
            p_sharpness: 0.3,
            out_size: CRITIC_RESOLUTION,
        }
    }
}

impl AugmentConfig {
    /// A configuration whose samples are always the identity warp.
    pub fn identity() -> Self {
        Self {
            distortion_scale: 0.0,
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            p_sharpness: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(0.0..=1.0).contains(&self.distortion_scale) {
            return Err(invalid("augment.distortion_scale must be in [0,1]"));
        }
        if !prob(self.p_perspective) || !prob(self.p_sharpness) {
            return Err(invalid("augment probabilities must be in [0,1]"));
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= self.crop_scale_max && self.crop_scale_max <= 1.0) {
            return Err(invalid("augment crop scale range must satisfy 0 < min <= max <= 1"));
        }
        if !(self.aspect_min > 0.0 && self.aspect_min <= self.aspect_max) {
            return Err(invalid("augment aspect range is empty"));
        }
        if !(self.sharpness >= 0.0) {
            return Err(invalid("augment.sharpness must be >= 0"));
        }
        if self.out_size == 0 {
            return Err(invalid("augment.out_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ApplyFlags {
    pub perspective: bool,
    pub crop: bool,
    pub sharpness: bool,
}

/// One concrete augmentation draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub src_w: usize,
    pub src_h: usize,
    /// Maps output pixel coordinates to source coordinates; `h[2][2] == 1`.
    pub homography: [[f64; 3]; 3],
    pub crop_rect: CropRect,
    pub out_size: usize,
    pub sharpness_factor: f64,
    pub apply_flags: ApplyFlags,
}

impl AugmentParams {
    pub fn identity(src_w: usize, src_h: usize, out_size: usize) -> Self {
        Self {
            src_w,
            src_h,
            homography: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            crop_rect: CropRect {
                x0: 0.0,
                y0: 0.0,
                w: src_w as f64,
                h: src_h as f64,
            },
            out_size,
            sharpness_factor: 1.0,
            apply_flags: ApplyFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let det = Matrix3::from_fn(|r, c| self.homography[r][c]).determinant();
        if !(det.abs() > 1e-9) {
            return Err(invalid(format!("homography is singular (det = {det})")));
        }
        let c = &self.crop_rect;
        let eps = 1e-9;
        if !(c.w > 0.0 && c.h > 0.0 && c.x0 >= -eps && c.y0 >= -eps)
            || c.x0 + c.w > self.src_w as f64 + eps
            || c.y0 + c.h > self.src_h as f64 + eps
        {
            return Err(invalid(format!("crop rect {c:?} outside {}x{}", self.src_w, self.src_h)));
        }
        if self.out_size == 0 || self.src_w == 0 || self.src_h == 0 {
            return Err(invalid("augment dimensions must be positive"));
        }
        Ok(())
    }
}

/// Draws augmentation parameters from a fixed seed.
pub fn sample_augment_seeded(seed: u64, config: &AugmentConfig, src_w: usize, src_h: usize) -> Result<AugmentParams> {
    sample_augment(&mut ChaCha8Rng::seed_from_u64(seed), config, src_w, src_h)
}

/// Draws augmentation parameters for a `src_w x src_h` input.
///
/// The number of random draws per attempt is fixed, independent of which
/// transforms end up enabled.
pub fn sample_augment<R: Rng + ?Sized>(
    rng: &mut R,
    config: &AugmentConfig,
    src_w: usize,
    src_h: usize,
) -> Result<AugmentParams> {
    config.validate()?;
    if src_w == 0 || src_h == 0 {
        return Err(invalid("augment source must be non-empty"));
    }
    let (w, h) = (src_w as f64, src_h as f64);

    for _ in 0..MAX_RESAMPLE {
        let mut ap = AugmentParams::identity(src_w, src_h, config.out_size);

        let persp_coin: f64 = rng.random();
        let jitter: [f64; 8] = std::array::from_fn(|_| rng.random::<f64>() * 2.0 - 1.0);
        if persp_coin < config.p_perspective && config.distortion_scale > 0.0 {
            let (dx, dy) = (config.distortion_scale * w / 2.0, config.distortion_scale * h / 2.0);
            let src = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
            let dst: [(f64, f64); 4] =
                std::array::from_fn(|i| (src[i].0 + dx * jitter[2 * i], src[i].1 + dy * jitter[2 * i + 1]));
            if !is_convex(&dst) {
                continue;
            }
            match homography_from_points(&dst, &src) {
                Some(hm) => {
                    ap.homography = hm;
                    ap.apply_flags.perspective = true;
                }
                None => continue,
            }
        }

        let scale = lerp(config.crop_scale_min, config.crop_scale_max, rng.random());
        let aspect_u: f64 = rng.random();
        let pos: [f64; 2] = [rng.random(), rng.random()];
        // aspect range that keeps the crop inside the source
        let lo = config.aspect_min.max(scale * w / h);
        let hi = config.aspect_max.min(w / (scale * h));
        let aspect = if lo <= hi { lerp(lo, hi, aspect_u) } else { w / h };
        let area = scale * w * h;
        let cw = (area * aspect).sqrt().min(w);
        let ch = (area / aspect).sqrt().min(h);
        if (w - cw).abs() > 1e-9 || (h - ch).abs() > 1e-9 {
            ap.crop_rect = CropRect {
                x0: pos[0] * (w - cw),
                y0: pos[1] * (h - ch),
                w: cw,
                h: ch,
            };
            ap.apply_flags.crop = true;
        }

        let sharp_coin: f64 = rng.random();
        if sharp_coin < config.p_sharpness && config.sharpness != 1.0 {
            ap.sharpness_factor = config.sharpness;
            ap.apply_flags.sharpness = true;
        }

        if ap.validate().is_ok() {
            return Ok(ap);
        }
    }
    Err(invalid("could not sample a non-degenerate augmentation"))
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn is_convex(q: &[(f64, f64); 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross.abs() < 1e-9 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Homography taking each `from[i]` to `to[i]`, normalized so `h[2][2] = 1`.
pub fn homography_from_points(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Option<[[f64; 3]; 3]> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (u, v) = from[i];
        let (x, y) = to[i];
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[u, v, 1.0, 0.0, 0.0, 0.0, -u * x, -v * x]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, u, v, 1.0, -u * y, -v * y]);
        b[r] = x;
        b[r + 1] = y;
    }
    let sol = a.lu().solve(&b)?;
    let hm = [[sol[0], sol[1], sol[2]], [sol[3], sol[4], sol[5]], [sol[6], sol[7], 1.0]];
    let det = Matrix3::from_fn(|r, c| hm[r][c]).determinant();
    (det.abs() > 1e-9 && hm.iter().flatten().all(|v| v.is_finite())).then_some(hm)
}

/// Sparse bilinear resampling from an `in_w x in_h` RGB image to
/// `out_w x out_h`. Taps outside the input contribute to `background`.
struct Stencil {
    in_w: usize,
    in_h: usize,
    out_w: usize,
    out_h: usize,
    idx: Vec<[u32; 4]>,
    wts: Vec<[f64; 4]>,
    background: Vec<f64>,
}

impl Stencil {
    fn build(in_w: usize, in_h: usize, out_w: usize, out_h: usize, map: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let n = out_w * out_h;
        let mut idx = Vec::with_capacity(n);
        let mut wts = Vec::with_capacity(n);
        let mut background = Vec::with_capacity(n);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let (cx, cy) = map(ox as f64 + 0.5, oy as f64 + 0.5);
                // continuous coordinates to pixel-center grid
                let (gx, gy) = (cx - 0.5, cy - 0.5);
                let mut ti = [0u32; 4];
                let mut tw = [0.0; 4];
                let mut bg = 0.0;
                if gx.is_finite() && gy.is_finite() {
                    let (fx0, fy0) = (gx.floor(), gy.floor());
                    let (fx, fy) = (gx - fx0, gy - fy0);
                    let taps = [
                        (fx0, fy0, (1.0 - fx) * (1.0 - fy)),
                        (fx0 + 1.0, fy0, fx * (1.0 - fy)),
                        (fx0, fy0 + 1.0, (1.0 - fx) * fy),
                        (fx0 + 1.0, fy0 + 1.0, fx * fy),
                    ];
                    for (k, (tx, ty, w)) in taps.into_iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        if tx >= 0.0 && ty >= 0.0 && tx < in_w as f64 && ty < in_h as f64 {
                            ti[k] = (ty as usize * in_w + tx as usize) as u32;
                            tw[k] = w;
                        } else {
                            bg += w;
                        }
                    }
                } else {
                    bg = 1.0;
                }
                idx.push(ti);
                wts.push(tw);
                background.push(bg);
            }
        }
        Self {
            in_w,
            in_h,
            out_w,
            out_h,
            idx,
            wts,
            background,
        }
    }

    /// `bg_value` is the color read outside the input; 0 gives the linear part.
    fn forward(&self, input: &[f64], bg_value: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.out_w * self.out_h * 3];
        for (o, px) in out.chunks_exact_mut(3).enumerate() {
            let (ti, tw) = (&self.idx[o], &self.wts[o]);
            for c in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    if tw[k] != 0.0 {
                        acc += tw[k] * input[ti[k] as usize * 3 + c];
                    }
                }
                if self.background[o] != 0.0 {
                    acc += self.background[o] * bg_value;
                }
                px[c] = acc;
            }
        }
        out
    }

    fn adjoint(&self, upstream: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; self.in_w * self.in_h * 3];
        for (o, g) in upstream.chunks_exact(3).enumerate() {
            let (ti, tw) = (&self.idx[o], &self.wts[o]);
            for k in 0..4 {
                if tw[k] != 0.0 {
                    let base = ti[k] as usize * 3;
                    for c in 0..3 {
                        grad[base + c] += tw[k] * g[c];
                    }
                }
            }
        }
        grad
    }
}

/// 3x3 smoothing kernel used by the sharpness adjustment; border pixels are
/// passed through unfiltered.
const SMOOTH: [[f64; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
const SMOOTH_SUM: f64 = 13.0;

fn smooth(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = img.to_vec();
    if w < 3 || h < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ky, row) in SMOOTH.iter().enumerate() {
                    for (kx, k) in row.iter().enumerate() {
                        acc += k * img[((y + ky - 1) * w + (x + kx - 1)) * 3 + c];
                    }
                }
                out[(y * w + x) * 3 + c] = acc / SMOOTH_SUM;
            }
        }
    }
    out
}

fn smooth_adjoint(up: &[f64], w: usize, h: usize) -> Vec<f64> {
    if w < 3 || h < 3 {
        return up.to_vec();
    }
    let mut grad = vec![0.0; up.len()];
    for y in 0..h {
        for x in 0..w {
            let interior = x > 0 && y > 0 && x < w - 1 && y < h - 1;
            for c in 0..3 {
                let g = up[(y * w + x) * 3 + c];
                if !interior {
                    grad[(y * w + x) * 3 + c] += g;
                    continue;
                }
                for (ky, row) in SMOOTH.iter().enumerate() {
                    for (kx, k) in row.iter().enumerate() {
                        grad[((y + ky - 1) * w + (x + kx - 1)) * 3 + c] += k / SMOOTH_SUM * g;
                    }
                }
            }
        }
    }
    grad
}

fn sharpen(img: &[f64], w: usize, h: usize, factor: f64) -> Vec<f64> {
    let blurred = smooth(img, w, h);
    img.iter()
        .zip(&blurred)
        .map(|(a, b)| factor * a + (1.0 - factor) * b)
        .collect()
}

fn sharpen_adjoint(up: &[f64], w: usize, h: usize, factor: f64) -> Vec<f64> {
    let scaled: Vec<f64> = up.iter().map(|g| (1.0 - factor) * g).collect();
    let mut grad = smooth_adjoint(&scaled, w, h);
    grad.iter_mut().zip(up).for_each(|(a, g)| *a += factor * g);
    grad
}

/// The augmentation as a chain of affine stages.
struct AugmentOp {
    perspective: Option<Stencil>,
    crop: Stencil,
    sharpness: Option<f64>,
    out: usize,
}

impl AugmentOp {
    fn new(ap: &AugmentParams) -> Result<Self> {
        ap.validate()?;
        let (sw, sh) = (ap.src_w, ap.src_h);
        let perspective = ap.apply_flags.perspective.then(|| {
            let hm = ap.homography;
            Stencil::build(sw, sh, sw, sh, |x, y| {
                let den = hm[2][0] * x + hm[2][1] * y + hm[2][2];
                (
                    (hm[0][0] * x + hm[0][1] * y + hm[0][2]) / den,
                    (hm[1][0] * x + hm[1][1] * y + hm[1][2]) / den,
                )
            })
        });
        let c = ap.crop_rect;
        let s = ap.out_size;
        let crop = Stencil::build(sw, sh, s, s, |x, y| (c.x0 + x * c.w / s as f64, c.y0 + y * c.h / s as f64));
        let sharpness = ap.apply_flags.sharpness.then_some(ap.sharpness_factor);
        Ok(Self {
            perspective,
            crop,
            sharpness,
            out: s,
        })
    }

    /// Pre-clamp output with background value `bg` (1 for white, 0 for the
    /// purely linear part).
    fn forward_unclamped(&self, img: &[f64], bg: f64) -> Vec<f64> {
        let warped;
        let mut cur = img;
        if let Some(p) = &self.perspective {
            warped = p.forward(cur, bg);
            cur = &warped;
        }
        let resized = self.crop.forward(cur, bg);
        match self.sharpness {
            Some(f) => sharpen(&resized, self.out, self.out, f),
            None => resized,
        }
    }

    fn adjoint(&self, upstream: &[f64]) -> Vec<f64> {
        let g = match self.sharpness {
            Some(f) => sharpen_adjoint(upstream, self.out, self.out, f),
            None => upstream.to_vec(),
        };
        let g = self.crop.adjoint(&g);
        match &self.perspective {
            Some(p) => p.adjoint(&g),
            None => g,
        }
    }
}

fn check_source(img: &RasterImage, ap: &AugmentParams) -> Result<()> {
    if img.width != ap.src_w || img.height != ap.src_h {
        return Err(invalid(format!(
            "augment params are for {}x{}, image is {}x{}",
            ap.src_w, ap.src_h, img.width, img.height
        )));
    }
    Ok(())
}

/// Stencils for one [`AugmentParams`], reusable across a forward and a
/// backward pass.
pub struct AugmentPlan {
    op: AugmentOp,
    params: AugmentParams,
}

/// Forward result plus the clamp mask needed by [`AugmentPlan::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentForward {
    pub image: RasterImage,
    in_range: Vec<bool>,
}

impl AugmentPlan {
    pub fn new(ap: &AugmentParams) -> Result<Self> {
        Ok(Self {
            op: AugmentOp::new(ap)?,
            params: ap.clone(),
        })
    }

    pub fn params(&self) -> &AugmentParams {
        &self.params
    }

    pub fn forward(&self, img: &RasterImage) -> Result<AugmentForward> {
        check_source(img, &self.params)?;
        let mut data = self.op.forward_unclamped(&img.data, 1.0);
        let in_range = data.iter().map(|v| (0.0..=1.0).contains(v)).collect();
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let s = self.params.out_size;
        Ok(AugmentForward {
            image: RasterImage::new(s, s, data)?,
            in_range,
        })
    }

    /// Gradient with respect to the source image of
    /// `sum(upstream * forward.image)`.
    pub fn backward(&self, forward: &AugmentForward, upstream: &Tensor) -> Result<Tensor> {
        let s = self.params.out_size;
        check_shape(&[s, s, 3], &upstream.shape)?;
        check_shape(&[s, s, 3], &forward.image.shape())?;
        let masked: Vec<f64> = upstream
            .data
            .iter()
            .zip(&forward.in_range)
            .map(|(g, ok)| if *ok { *g } else { 0.0 })
            .collect();
        Tensor::new(vec![self.params.src_h, self.params.src_w, 3], self.op.adjoint(&masked))
    }
}

/// Applies the augmentation; output is `out_size x out_size` in `[0, 1]`.
pub fn apply_augment(img: &RasterImage, ap: &AugmentParams) -> Result<RasterImage> {
    Ok(AugmentPlan::new(ap)?.forward(img)?.image)
}

/// Gradient of `sum(upstream * apply_augment(img, ap))` with respect to `img`.
pub fn augment_backward(img: &RasterImage, ap: &AugmentParams, upstream: &Tensor) -> Result<Tensor> {
    let plan = AugmentPlan::new(ap)?;
    let fwd = plan.forward(img)?;
    plan.backward(&fwd, upstream)
}

/// The linear part of the augmentation (zero background, no clamp), as a
/// `[h, w, 3] -> [s, s, 3]` map.
pub fn augment_linear(x: &Tensor, ap: &AugmentParams) -> Result<Tensor> {
    check_shape(&[ap.src_h, ap.src_w, 3], &x.shape)?;
    let op = AugmentOp::new(ap)?;
    Tensor::new(vec![op.out, op.out, 3], op.forward_unclamped(&x.data, 0.0))
}

/// Transpose of [`augment_linear`].
pub fn augment_linear_adjoint(u: &Tensor, ap: &AugmentParams) -> Result<Tensor> {
    check_shape(&[ap.out_size, ap.out_size, 3], &u.shape)?;
    let op = AugmentOp::new(ap)?;
    Tensor::new(vec![ap.src_h, ap.src_w, 3], op.adjoint(&u.data))
}

/// Resizes an image with the crop/resize stage and no other transform.
pub fn resize(img: &RasterImage, out_w: usize, out_h: usize) -> Result<RasterImage> {
    if out_w == 0 || out_h == 0 {
        return Err(invalid("resize target must be non-empty"));
    }
    let (sx, sy) = (img.width as f64 / out_w as f64, img.height as f64 / out_h as f64);
    let st = Stencil::build(img.width, img.height, out_w, out_h, |x, y| (x * sx, y * sy));
    let mut data = st.forward(&img.data, 1.0);
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    RasterImage::new(out_w, out_h, data)
}
