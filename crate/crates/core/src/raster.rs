//! Differentiable stroke rasterizer.
//!
//! Each stroke is flattened to a polyline on a fixed parameter grid. A pixel
//! center at distance `d` from the polyline gets coverage
//! `1 - smoothstep(w/2 - a, w/2 + a, d)` where `w` is the stroke width and
//! `a` the anti-aliasing radius. Strokes are composited back to front with
//! the "over" operator onto an opaque white background, using effective
//! alpha `sigmoid(opacity_logit) * coverage`.
//!
//! [`Rasterizer::backward`] returns the exact gradient of
//! `sum(upstream * render(params))` with respect to every control point and
//! opacity logit. The distance to a polyline is a min over segments; the
//! gradient flows through the argmin segment.
//!
//! Work is split into fixed bands of rows. Forward pixels are independent;
//! backward partial sums are reduced in band order so results do not depend
//! on thread scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, invalid, Result};
use crate::geometry::{
    bernstein, flatten_points, grid_u, sigmoid, ControlPoint, SketchParams, DEFAULT_SEGMENTS,
    PARAMS_PER_STROKE,
};
use crate::tensor::{RasterImage, Tensor};

/// Rows per work band.
const BAND_ROWS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    /// Half-width of the anti-aliasing band in pixels.
    pub aa_radius: f64,
    /// Polyline segments per stroke.
    pub segments: usize,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            aa_radius: 1.0,
            segments: DEFAULT_SEGMENTS,
        }
    }
}

/// Gradient of a scalar with respect to one stroke's parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StrokeGrad {
    pub points: [[f64; 2]; 4],
    pub opacity_logit: f64,
}

/// Gradient with respect to a whole [`SketchParams`], one entry per stroke.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamGrad {
    pub strokes: Vec<StrokeGrad>,
}

impl ParamGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            strokes: vec![StrokeGrad::default(); n],
        }
    }

    /// Same layout as [`SketchParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.strokes.len() * PARAMS_PER_STROKE);
        for g in &self.strokes {
            for p in &g.points {
                out.extend_from_slice(p);
            }
            out.push(g.opacity_logit);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % PARAMS_PER_STROKE != 0 {
            return Err(invalid(format!(
                "flat gradient length {} is not a multiple of {PARAMS_PER_STROKE}",
                flat.len()
            )));
        }
        let strokes = flat
            .chunks_exact(PARAMS_PER_STROKE)
            .map(|c| StrokeGrad {
                points: [[c[0], c[1]], [c[2], c[3]], [c[4], c[5]], [c[6], c[7]]],
                opacity_logit: c[8],
            })
            .collect();
        Ok(Self { strokes })
    }

    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.strokes {
            for p in &mut g.points {
                p[0] *= s;
                p[1] *= s;
            }
            g.opacity_logit *= s;
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrad) -> Result<()> {
        if self.strokes.len() != other.strokes.len() {
            return Err(invalid("gradient stroke counts differ"));
        }
        for (a, b) in self.strokes.iter_mut().zip(&other.strokes) {
            for (p, q) in a.points.iter_mut().zip(&b.points) {
                p[0] += q[0];
                p[1] += q[1];
            }
            a.opacity_logit += b.opacity_logit;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Rasterizer {
    pub config: RasterConfig,
}

/// Renders with the default configuration.
pub fn render(params: &SketchParams) -> Result<RasterImage> {
    Rasterizer::default().render(params)
}

/// Gradient of `sum(upstream * render(params))` with the default configuration.
pub fn render_backward(params: &SketchParams, upstream: &Tensor) -> Result<ParamGrad> {
    Rasterizer::default().backward(params, upstream)
}

/// Renders only the first `first_k` strokes.
pub fn render_partial(params: &SketchParams, first_k: usize) -> Result<RasterImage> {
    Rasterizer::default().render_partial(params, first_k)
}

struct Prepared {
    verts: Vec<ControlPoint>,
    opacity: f64,
    sig_deriv: f64,
    inner: f64,
    outer: f64,
    color: [f64; 3],
    // inclusive pixel index ranges
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    visible: bool,
}

#[derive(Clone, Copy)]
struct Hit {
    stroke: usize,
    alpha: f64,
    coverage: f64,
    dcov_dd: f64,
    seg: usize,
    t: f64,
    // pixel center minus closest point, divided by distance
    nx: f64,
    ny: f64,
    has_normal: bool,
}

impl Rasterizer {
    pub fn new(config: RasterConfig) -> Self {
        Self { config }
    }

    fn check(&self, params: &SketchParams) -> Result<()> {
        params.validate()?;
        if self.config.segments == 0 {
            return Err(invalid("rasterizer needs at least one segment per stroke"));
        }
        if !(self.config.aa_radius > 0.0) {
            return Err(invalid("anti-aliasing radius must be positive"));
        }
        Ok(())
    }

    fn prepare(&self, params: &SketchParams) -> Vec<Prepared> {
        let a = self.config.aa_radius;
        let (w, h) = (params.canvas_w as f64, params.canvas_h as f64);
        params
            .strokes
            .iter()
            .map(|s| {
                let half = s.width / 2.0;
                let reach = half + a;
                let (mut minx, mut maxx, mut miny, mut maxy) =
                    (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
                for p in &s.points {
                    minx = minx.min(p.x);
                    maxx = maxx.max(p.x);
                    miny = miny.min(p.y);
                    maxy = maxy.max(p.y);
                }
                // pixel i has its center at i + 0.5
                let lo_x = (minx - reach - 0.5).ceil();
                let hi_x = (maxx + reach - 0.5).floor();
                let lo_y = (miny - reach - 0.5).ceil();
                let hi_y = (maxy + reach - 0.5).floor();
                let visible = hi_x >= 0.0 && hi_y >= 0.0 && lo_x < w && lo_y < h && lo_x <= hi_x && lo_y <= hi_y;
                let opacity = sigmoid(s.opacity_logit);
                Prepared {
                    verts: flatten_points(&s.points, self.config.segments),
                    opacity,
                    sig_deriv: opacity * (1.0 - opacity),
                    inner: half - a,
                    outer: half + a,
                    color: s.color,
                    x0: lo_x.max(0.0) as usize,
                    x1: hi_x.min(w - 1.0).max(0.0) as usize,
                    y0: lo_y.max(0.0) as usize,
                    y1: hi_y.min(h - 1.0).max(0.0) as usize,
                    visible,
                }
            })
            .collect()
    }

    pub fn render(&self, params: &SketchParams) -> Result<RasterImage> {
        self.check(params)?;
        let prepared = self.prepare(params);
        let (w, h) = (params.canvas_w, params.canvas_h);
        let mut img = RasterImage::white(w, h);
        img.data
            .par_chunks_mut(w * 3 * BAND_ROWS)
            .enumerate()
            .for_each(|(band, chunk)| {
                let y_start = band * BAND_ROWS;
                let rows = chunk.len() / (w * 3);
                let active = band_strokes(&prepared, y_start, y_start + rows - 1);
                for r in 0..rows {
                    let y = y_start + r;
                    for x in 0..w {
                        let px = &mut chunk[(r * w + x) * 3..(r * w + x) * 3 + 3];
                        for &si in &active {
                            let s = &prepared[si];
                            if x < s.x0 || x > s.x1 || y < s.y0 || y > s.y1 {
                                continue;
                            }
                            if let Some(hit) = hit_test(s, si, x, y) {
                                composite(px, hit.alpha, &s.color);
                            }
                        }
                        px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                    }
                }
            });
        Ok(img)
    }

    /// Untiled reference path: every stroke is tested against every pixel.
    pub fn render_reference(&self, params: &SketchParams) -> Result<RasterImage> {
        self.check(params)?;
        let prepared = self.prepare(params);
        let (w, h) = (params.canvas_w, params.canvas_h);
        let mut img = RasterImage::white(w, h);
        for y in 0..h {
            for x in 0..w {
                let i = img.index(x, y);
                let px = &mut img.data[i..i + 3];
                for (si, s) in prepared.iter().enumerate() {
                    if let Some(hit) = hit_test(s, si, x, y) {
                        composite(px, hit.alpha, &s.color);
                    }
                }
                px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            }
        }
        Ok(img)
    }

    pub fn render_partial(&self, params: &SketchParams, first_k: usize) -> Result<RasterImage> {
        if first_k > params.len() {
            return Err(invalid(format!(
                "prefix length {first_k} exceeds stroke count {}",
                params.len()
            )));
        }
        self.render(&params.truncated(first_k))
    }

    pub fn backward(&self, params: &SketchParams, upstream: &Tensor) -> Result<ParamGrad> {
        self.check(params)?;
        let (w, h) = (params.canvas_w, params.canvas_h);
        check_shape(&[h, w, 3], &upstream.shape)?;
        let prepared = self.prepare(params);
        let n = prepared.len();
        let k = self.config.segments;
        let weights: Vec<[f64; 4]> = (0..=k).map(|i| bernstein(grid_u(i, k))).collect();
        let bands = h.div_ceil(BAND_ROWS);

        let partials: Vec<Vec<f64>> = (0..bands)
            .into_par_iter()
            .map(|band| {
                let y_start = band * BAND_ROWS;
                let y_end = (y_start + BAND_ROWS).min(h) - 1;
                let active = band_strokes(&prepared, y_start, y_end);
                let mut acc = vec![0.0; n * PARAMS_PER_STROKE];
                let mut hits: Vec<Hit> = Vec::with_capacity(active.len());
                let mut before: Vec<[f64; 3]> = Vec::with_capacity(active.len());
                for y in y_start..=y_end {
                    for x in 0..w {
                        let ui = (y * w + x) * 3;
                        let g = [upstream.data[ui], upstream.data[ui + 1], upstream.data[ui + 2]];
                        if g == [0.0; 3] {
                            continue;
                        }
                        hits.clear();
                        before.clear();
                        let mut color = [1.0; 3];
                        for &si in &active {
                            let s = &prepared[si];
                            if x < s.x0 || x > s.x1 || y < s.y0 || y > s.y1 {
                                continue;
                            }
                            if let Some(hit) = hit_test(s, si, x, y) {
                                before.push(color);
                                composite(&mut color, hit.alpha, &s.color);
                                hits.push(hit);
                            }
                        }
                        // transmittance of everything composited after the current hit
                        let mut trans = 1.0;
                        for (hit, prev) in hits.iter().zip(&before).rev() {
                            let s = &prepared[hit.stroke];
                            let dl_dalpha = trans
                                * (g[0] * (s.color[0] - prev[0])
                                    + g[1] * (s.color[1] - prev[1])
                                    + g[2] * (s.color[2] - prev[2]));
                            trans *= 1.0 - hit.alpha;
                            let base = hit.stroke * PARAMS_PER_STROKE;
                            acc[base + 8] += dl_dalpha * hit.coverage * s.sig_deriv;
                            if !hit.has_normal || hit.dcov_dd == 0.0 {
                                continue;
                            }
                            let dl_dd = dl_dalpha * s.opacity * hit.dcov_dd;
                            // d = |P - Q|, Q = (1 - t) A + t B; t is stationary
                            let gx = -dl_dd * hit.nx;
                            let gy = -dl_dd * hit.ny;
                            for (vi, wv) in [(hit.seg, 1.0 - hit.t), (hit.seg + 1, hit.t)] {
                                if wv == 0.0 {
                                    continue;
                                }
                                let bw = &weights[vi];
                                for j in 0..4 {
                                    acc[base + 2 * j] += gx * wv * bw[j];
                                    acc[base + 2 * j + 1] += gy * wv * bw[j];
                                }
                            }
                        }
                    }
                }
                acc
            })
            .collect();

        let mut total = vec![0.0; n * PARAMS_PER_STROKE];
        for part in &partials {
            for (t, p) in total.iter_mut().zip(part) {
                *t += p;
            }
        }
        ParamGrad::from_flat(&total)
    }
}

fn band_strokes(prepared: &[Prepared], y_start: usize, y_end: usize) -> Vec<usize> {
    prepared
        .iter()
        .enumerate()
        .filter(|(_, s)| s.visible && s.y0 <= y_end && s.y1 >= y_start)
        .map(|(i, _)| i)
        .collect()
}

#[inline]
fn composite(px: &mut [f64], alpha: f64, color: &[f64; 3]) {
    for c in 0..3 {
        px[c] = alpha * color[c] + (1.0 - alpha) * px[c];
    }
}

#[inline]
fn hit_test(s: &Prepared, si: usize, x: usize, y: usize) -> Option<Hit> {
    let px = x as f64 + 0.5;
    let py = y as f64 + 0.5;
    let mut best = f64::INFINITY;
    let mut best_seg = 0;
    let mut best_t = 0.0;
    let mut best_q = (0.0, 0.0);
    for (i, seg) in s.verts.windows(2).enumerate() {
        let (ax, ay) = (seg[0].x, seg[0].y);
        let (dx, dy) = (seg[1].x - ax, seg[1].y - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let qx = ax + t * dx;
        let qy = ay + t * dy;
        let d2 = (px - qx) * (px - qx) + (py - qy) * (py - qy);
        if d2 < best {
            best = d2;
            best_seg = i;
            best_t = t;
            best_q = (qx, qy);
        }
    }
    let d = best.sqrt();
    if d >= s.outer {
        return None;
    }
    let span = s.outer - s.inner;
    let (coverage, dcov_dd) = if d <= s.inner {
        (1.0, 0.0)
    } else {
        let u = (d - s.inner) / span;
        (1.0 - u * u * (3.0 - 2.0 * u), -6.0 * u * (1.0 - u) / span)
    };
    let (nx, ny, has_normal) = if d > 0.0 {
        ((px - best_q.0) / d, (py - best_q.1) / d, true)
    } else {
        (0.0, 0.0, false)
    };
    Some(Hit {
        stroke: si,
        alpha: s.opacity * coverage,
        coverage,
        dcov_dd,
        seg: best_seg,
        t: best_t,
        nx,
        ny,
        has_normal,
    })
}
