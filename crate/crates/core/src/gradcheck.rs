//! Central finite-difference checks for the hand-written backward passes.
//!
//! The numeric side only ever calls forward functions, so it stays
//! independent of the analytic code it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::{apply_augment, augment_backward, sample_augment, AugmentConfig};
use crate::error::Result;
use crate::geometry::{ControlPoint, SketchParams, Stroke, PARAMS_PER_STROKE};
use crate::perceptual::{jvsp_loss, BuiltinExtractor, JvspConfig};
use crate::raster::Rasterizer;
use crate::tensor::{RasterImage, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckConfig {
    /// Maximum accepted relative error per coordinate.
    pub rel_tol: f64,
    /// Coordinates whose numeric derivative is below this are skipped.
    pub min_abs: f64,
    /// Fraction of checked coordinates that must pass.
    pub pass_fraction: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-3,
            min_abs: 1e-6,
            pass_fraction: 0.99,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    /// Coordinates whose stencil straddles a non-smooth point of the forward
    /// map; excluded from `checked`.
    pub nonsmooth: usize,
    pub nonsmooth_passed: usize,
    pub max_rel_error: f64,
    /// Relative error at the 99th percentile of checked coordinates.
    pub p99_rel_error: f64,
    #[serde(skip)]
    errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn fraction_passed(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    /// Pass fraction including the non-smooth coordinates.
    pub fn raw_fraction_passed(&self) -> f64 {
        let n = self.checked + self.nonsmooth;
        if n == 0 {
            1.0
        } else {
            (self.passed + self.nonsmooth_passed) as f64 / n as f64
        }
    }

    pub fn ok(&self, cfg: &GradCheckConfig) -> bool {
        self.fraction_passed() >= cfg.pass_fraction
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.passed += other.passed;
        self.nonsmooth += other.nonsmooth;
        self.nonsmooth_passed += other.nonsmooth_passed;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.errors.extend_from_slice(&other.errors);
        self.p99_rel_error = percentile(&self.errors, 0.99);
    }
}

fn percentile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let i = ((s.len() as f64 * q).ceil() as usize).clamp(1, s.len()) - 1;
    s[i]
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Central difference at step `h` together with the same at `h / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSample {
    pub full: f64,
    pub half: f64,
}

impl FdSample {
    pub fn exact(v: f64) -> Self {
        Self { full: v, half: v }
    }

    /// On a smooth stretch the two steps agree to `O(h^2)`; a kink inside
    /// the stencil makes them differ at `O(h)`.
    pub fn is_smooth(&self, rel_tol: f64) -> bool {
        relative_error(self.full, self.half) <= 0.5 * rel_tol
    }
}

pub fn fd_sample(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> FdSample {
    FdSample {
        full: central_difference(&f, x, i, h),
        half: central_difference(&f, x, i, 0.5 * h),
    }
}

/// Compares analytic derivatives with finite differences at step `h`.
pub fn compare(analytic: &[f64], numeric: &[FdSample], cfg: &GradCheckConfig) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (&a, s) in analytic.iter().zip(numeric) {
        let n = s.full;
        if n.abs() <= cfg.min_abs {
            continue;
        }
        let e = relative_error(a, n);
        if !s.is_smooth(cfg.rel_tol) {
            report.nonsmooth += 1;
            report.nonsmooth_passed += usize::from(e <= cfg.rel_tol);
            continue;
        }
        report.checked += 1;
        if e <= cfg.rel_tol {
            report.passed += 1;
        }
        report.max_rel_error = report.max_rel_error.max(e);
        report.errors.push(e);
    }
    report.p99_rel_error = percentile(&report.errors, 0.99);
    report
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference(f: &impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Random sketch with strokes spread over the canvas, for gradient tests.
pub fn random_sketch<R: Rng + ?Sized>(rng: &mut R, n: usize, w: usize, h: usize, width: f64) -> SketchParams {
    let (wf, hf) = (w as f64, h as f64);
    let strokes = (0..n)
        .map(|_| {
            let c = (rng.random_range(0.15..0.85) * wf, rng.random_range(0.15..0.85) * hf);
            let spread = 0.3 * wf.min(hf);
            let pts = std::array::from_fn(|_| {
                ControlPoint::new(
                    c.0 + rng.random_range(-spread..spread),
                    c.1 + rng.random_range(-spread..spread),
                )
            });
            Stroke::new(pts, rng.random_range(-1.5..1.5)).with_width(width)
        })
        .collect();
    SketchParams {
        strokes,
        canvas_w: w,
        canvas_h: h,
    }
}

pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    }
}

/// Rasterizer gradient check on one random sketch. Point coordinates use
/// step `h_point`, opacity logits `h_logit`.
pub fn check_raster(
    seed: u64,
    strokes: usize,
    size: usize,
    h_point: f64,
    h_logit: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_sketch(&mut rng, strokes, size, size, 1.5);
    let upstream = random_tensor(&mut rng, &[size, size, 3], -1.0, 1.0);
    let raster = Rasterizer::default();
    let analytic = raster.backward(&params, &upstream)?.to_flat();

    let x = params.to_flat();
    let objective = |flat: &[f64]| {
        let mut p = params.clone();
        p.set_flat(flat).expect("same layout");
        let img = raster.render(&p).expect("valid params");
        img.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum::<f64>()
    };
    let numeric: Vec<FdSample> = (0..x.len())
        .map(|i| {
            let h = if i % PARAMS_PER_STROKE == PARAMS_PER_STROKE - 1 { h_logit } else { h_point };
            fd_sample(objective, &x, i, h)
        })
        .collect();
    Ok(compare(&analytic, &numeric, cfg))
}

/// Augmentation gradient check on `samples` random source pixels.
pub fn check_augment(seed: u64, src: usize, out: usize, samples: usize, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let aug_cfg = AugmentConfig {
        p_perspective: 1.0,
        p_sharpness: 1.0,
        out_size: out,
        ..AugmentConfig::default()
    };
    let ap = sample_augment(&mut rng, &aug_cfg, src, src)?;
    let img = RasterImage::new(src, src, random_tensor(&mut rng, &[src, src, 3], 0.0, 1.0).data)?;
    let upstream = random_tensor(&mut rng, &[out, out, 3], -1.0, 1.0);
    let analytic = augment_backward(&img, &ap, &upstream)?;
    let objective = |flat: &[f64]| {
        let im = RasterImage {
            width: src,
            height: src,
            data: flat.to_vec(),
        };
        let o = apply_augment(&im, &ap).expect("valid");
        o.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum::<f64>()
    };
    let picks: Vec<usize> = (0..samples).map(|_| rng.random_range(0..img.data.len())).collect();
    let numeric: Vec<FdSample> = picks.iter().map(|&i| fd_sample(objective, &img.data, i, 1e-6)).collect();
    let analytic: Vec<f64> = picks.iter().map(|&i| analytic.data[i]).collect();
    Ok(compare(&analytic, &numeric, cfg))
}

/// JVSP gradient check with a random convolutional extractor.
pub fn check_jvsp(seed: u64, size: usize, samples: usize, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extractor = BuiltinExtractor::with_depth(seed, 3);
    let jcfg = JvspConfig::default();
    let sketch = RasterImage::new(size, size, random_tensor(&mut rng, &[size, size, 3], 0.0, 1.0).data)?;
    let guide = RasterImage::new(size, size, random_tensor(&mut rng, &[size, size, 3], 0.0, 1.0).data)?;
    let (_, grad) = jvsp_loss(&sketch, &guide, &extractor, &jcfg)?;
    let objective = |flat: &[f64]| {
        let im = RasterImage {
            width: size,
            height: size,
            data: flat.to_vec(),
        };
        jvsp_loss(&im, &guide, &extractor, &jcfg).expect("valid").0
    };
    let picks: Vec<usize> = (0..samples).map(|_| rng.random_range(0..sketch.data.len())).collect();
    let numeric: Vec<FdSample> = picks.iter().map(|&i| fd_sample(objective, &sketch.data, i, 1e-5)).collect();
    let analytic: Vec<f64> = picks.iter().map(|&i| grad.data[i]).collect();
    Ok(compare(&analytic, &numeric, cfg))
}
