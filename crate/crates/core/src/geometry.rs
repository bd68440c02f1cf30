//! Sketch parameterization: cubic Bézier strokes with an opacity logit.
//!
//! A sketch is an ordered list of strokes over a white canvas. The order is
//! the compositing order. Only control points and opacity logits are ever
//! optimized; width and color stay fixed for a run.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default stroke width in pixels at a 512 px canvas.
pub const DEFAULT_STROKE_WIDTH: f64 = 1.5;

/// Default flattening resolution (segments per stroke).
pub const DEFAULT_SEGMENTS: usize = 16;

/// Optimizable scalars per stroke: 4 points x 2 coords + 1 opacity logit.
pub const PARAMS_PER_STROKE: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlPoint {
    pub x: f64,
    pub y: f64,
}

impl ControlPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &ControlPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub points: [ControlPoint; 4],
    pub opacity_logit: f64,
    pub width: f64,
    pub color: [f64; 3],
}

impl Stroke {
    pub fn new(points: [ControlPoint; 4], opacity_logit: f64) -> Self {
        Self {
            points,
            opacity_logit,
            width: DEFAULT_STROKE_WIDTH,
            color: [0.0; 3],
        }
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width = width;
        self
    }

    pub fn with_color(mut self, color: [f64; 3]) -> Self {
        self.color = color;
        self
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.points.iter().all(ControlPoint::is_finite) || !self.opacity_logit.is_finite() {
            return Err(Error::NonFinite("stroke parameters".into()));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(invalid(format!("stroke width must be positive, got {}", self.width)));
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(invalid(format!("stroke color out of [0,1]: {:?}", self.color)));
        }
        Ok(())
    }

    /// Applies `f` to every control point.
    pub fn map_points(&self, f: impl Fn(ControlPoint) -> ControlPoint) -> Stroke {
        let mut s = self.clone();
        for p in &mut s.points {
            *p = f(*p);
        }
        s
    }
}

/// The optimizable sketch: strokes plus canvas size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchParams {
    pub strokes: Vec<Stroke>,
    pub canvas_w: usize,
    pub canvas_h: usize,
}

impl SketchParams {
    pub fn new(strokes: Vec<Stroke>, canvas_w: usize, canvas_h: usize) -> Result<Self> {
        let params = Self {
            strokes,
            canvas_w,
            canvas_h,
        };
        params.validate()?;
        Ok(params)
    }

    /// Checks canvas dims and stroke values. Empty stroke lists are allowed
    /// here (prefix renders and empty documents); optimization entry points
    /// require at least one stroke.
    pub fn validate(&self) -> Result<()> {
        if self.canvas_w == 0 || self.canvas_h == 0 {
            return Err(invalid(format!(
                "canvas dimensions must be positive, got {}x{}",
                self.canvas_w, self.canvas_h
            )));
        }
        self.strokes.iter().try_for_each(Stroke::validate)
    }

    pub fn len(&self) -> usize {
        self.strokes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strokes.is_empty()
    }

    pub fn truncated(&self, k: usize) -> SketchParams {
        SketchParams {
            strokes: self.strokes[..k.min(self.strokes.len())].to_vec(),
            canvas_w: self.canvas_w,
            canvas_h: self.canvas_h,
        }
    }

    /// Flattens the optimizable scalars, `PARAMS_PER_STROKE` per stroke:
    /// `x1 y1 x2 y2 x3 y3 x4 y4 logit`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.strokes.len() * PARAMS_PER_STROKE);
        for s in &self.strokes {
            for p in &s.points {
                out.push(p.x);
                out.push(p.y);
            }
            out.push(s.opacity_logit);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.strokes.len() * PARAMS_PER_STROKE {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                self.strokes.len() * PARAMS_PER_STROKE,
                flat.len()
            )));
        }
        for (s, chunk) in self.strokes.iter_mut().zip(flat.chunks_exact(PARAMS_PER_STROKE)) {
            for (j, p) in s.points.iter_mut().enumerate() {
                p.x = chunk[2 * j];
                p.y = chunk[2 * j + 1];
            }
            s.opacity_logit = chunk[8];
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] for `p` in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Cubic Bernstein weights at `u`.
#[inline]
pub fn bernstein(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [v * v * v, 3.0 * u * v * v, 3.0 * u * u * v, u * u * u]
}

#[inline]
fn eval_unchecked(points: &[ControlPoint; 4], u: f64) -> ControlPoint {
    let b = bernstein(u);
    ControlPoint {
        x: b[0] * points[0].x + b[1] * points[1].x + b[2] * points[2].x + b[3] * points[3].x,
        y: b[0] * points[0].y + b[1] * points[1].y + b[2] * points[2].y + b[3] * points[3].y,
    }
}

/// Evaluates the stroke's curve at parameter `u` in `[0, 1]`.
pub fn eval_bezier(stroke: &Stroke, u: f64) -> Result<ControlPoint> {
    if !(0.0..=1.0).contains(&u) {
        return Err(invalid(format!("curve parameter must be in [0,1], got {u}")));
    }
    Ok(eval_unchecked(&stroke.points, u))
}

/// Parameter value of vertex `i` on a `segments`-segment uniform grid.
#[inline]
pub fn grid_u(i: usize, segments: usize) -> f64 {
    i as f64 / segments as f64
}

/// Samples the curve at `u = i / segments` for `i = 0..=segments`.
///
/// The grid is fixed, so every vertex is a linear function of the control
/// points with weights `bernstein(grid_u(i, segments))`.
pub fn flatten(stroke: &Stroke, segments: usize) -> Result<Vec<ControlPoint>> {
    if segments == 0 {
        return Err(invalid("flatten needs at least one segment"));
    }
    Ok(flatten_points(&stroke.points, segments))
}

pub(crate) fn flatten_points(points: &[ControlPoint; 4], segments: usize) -> Vec<ControlPoint> {
    (0..=segments)
        .map(|i| eval_unchecked(points, grid_u(i, segments)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stroke(pts: [(f64, f64); 4]) -> Stroke {
        Stroke::new(pts.map(|(x, y)| ControlPoint::new(x, y)), 0.0)
    }

    // Recursive de Casteljau, independent of the Bernstein form.
    fn de_casteljau(pts: &[(f64, f64)], u: f64) -> (f64, f64) {
        if pts.len() == 1 {
            return pts[0];
        }
        let next: Vec<_> = pts
            .windows(2)
            .map(|w| ((1.0 - u) * w[0].0 + u * w[1].0, (1.0 - u) * w[0].1 + u * w[1].1))
            .collect();
        de_casteljau(&next, u)
    }

    #[test]
    fn degenerate_curve_is_constant() {
        let s = stroke([(3.5, -2.0); 4]);
        for u in [0.0, 0.3, 0.77, 1.0] {
            let p = eval_bezier(&s, u).unwrap();
            assert!((p.x - 3.5).abs() < 1e-15 && (p.y + 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_midpoint() {
        let s = stroke([(0.0, 0.0), (0.0, 0.0), (1.0, 1.0), (1.0, 1.0)]);
        let p = eval_bezier(&s, 0.5).unwrap();
        assert_eq!((p.x, p.y), (0.5, 0.5));
    }

    #[test]
    fn matches_de_casteljau() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (2.0, 1.0), (3.0, 1.0)];
        let s = stroke(pts);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut us: Vec<f64> = (0..10).map(|_| rng.random::<f64>()).collect();
        us.push(0.25);
        for u in us {
            let p = eval_bezier(&s, u).unwrap();
            let q = de_casteljau(&pts, u);
            assert!((p.x - q.0).abs() <= 1e-12 && (p.y - q.1).abs() <= 1e-12, "u={u}");
        }
    }

    #[test]
    fn rejects_out_of_range_parameter() {
        let s = stroke([(0.0, 0.0); 4]);
        assert!(eval_bezier(&s, -0.01).is_err());
        assert!(eval_bezier(&s, 1.01).is_err());
        assert!(eval_bezier(&s, f64::NAN).is_err());
    }

    #[test]
    fn flatten_straight_line_and_single_segment() {
        let s = stroke([(0.0, 0.0), (1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]);
        let poly = flatten(&s, 4).unwrap();
        assert_eq!(poly.len(), 5);
        for (i, p) in poly.iter().enumerate() {
            let expect = 3.0 * i as f64 / 4.0;
            assert!((p.x - expect).abs() < 1e-12);
            assert!((p.y - 2.0 * expect).abs() < 1e-12);
        }
        let ends = flatten(&s, 1).unwrap();
        assert_eq!(ends, vec![s.points[0], s.points[3]]);
        assert!(flatten(&s, 0).is_err());
    }

    #[test]
    fn sixteen_segments_stay_subpixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let base = (rng.random_range(0.0..400.0), rng.random_range(0.0..400.0));
            // keep the control polygon inside a 64 px diameter disc
            let pts: [(f64, f64); 4] = std::array::from_fn(|_| {
                let r = 32.0 * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                (base.0 + r * a.cos(), base.1 + r * a.sin())
            });
            let s = stroke(pts);
            let coarse = flatten(&s, 16).unwrap();
            let dense = flatten(&s, 256).unwrap();
            let dev = dense
                .iter()
                .map(|p| {
                    coarse
                        .windows(2)
                        .map(|w| point_segment_distance(*p, w[0], w[1]))
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max);
            assert!(dev < 0.5, "deviation {dev}");
        }
    }

    fn point_segment_distance(p: ControlPoint, a: ControlPoint, b: ControlPoint) -> f64 {
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p.x - a.x - t * dx).hypot(p.y - a.y - t * dy)
    }

    #[test]
    fn flat_layout_round_trips() {
        let mut p = SketchParams::new(
            vec![stroke([(1.0, 2.0), (3.0, 4.0), (5.0, 6.0), (7.0, 8.0)])],
            16,
            16,
        )
        .unwrap();
        p.strokes[0].opacity_logit = 0.25;
        let flat = p.to_flat();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 0.25]);
        let mut q = p.clone();
        q.set_flat(&flat).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&flat[..3]).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let s = stroke([(0.0, f64::NAN), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0)]);
        assert!(SketchParams::new(vec![s], 8, 8).is_err());
        assert!(SketchParams::new(vec![], 0, 8).is_err());
        let w = stroke([(0.0, 0.0); 4]).with_width(0.0);
        assert!(SketchParams::new(vec![w], 8, 8).is_err());
    }

    fn arb_points() -> impl Strategy<Value = [(f64, f64); 4]> {
        proptest::array::uniform4((-200.0..200.0f64, -200.0..200.0f64))
    }

    proptest! {
        #[test]
        fn endpoints_are_exact(pts in arb_points()) {
            let s = stroke(pts);
            let a = eval_bezier(&s, 0.0).unwrap();
            let b = eval_bezier(&s, 1.0).unwrap();
            prop_assert_eq!(a, s.points[0]);
            prop_assert_eq!(b, s.points[3]);
        }

        #[test]
        fn affine_equivariance(
            pts in arb_points(),
            m in proptest::array::uniform4(-3.0..3.0f64),
            t in proptest::array::uniform2(-50.0..50.0f64),
            u in 0.0..=1.0f64,
        ) {
            let map = |p: ControlPoint| ControlPoint::new(
                m[0] * p.x + m[1] * p.y + t[0],
                m[2] * p.x + m[3] * p.y + t[1],
            );
            let s = stroke(pts);
            let lhs = eval_bezier(&s.map_points(map), u).unwrap();
            let rhs = map(eval_bezier(&s, u).unwrap());
            prop_assert!((lhs.x - rhs.x).abs() <= 1e-10 && (lhs.y - rhs.y).abs() <= 1e-10);
        }

        #[test]
        fn flatten_matches_eval_bitwise(pts in arb_points(), k in 1usize..40) {
            let s = stroke(pts);
            let poly = flatten(&s, k).unwrap();
            for (i, p) in poly.iter().enumerate() {
                let q = eval_bezier(&s, grid_u(i, k)).unwrap();
                prop_assert_eq!(p.x.to_bits(), q.x.to_bits());
                prop_assert_eq!(p.y.to_bits(), q.y.to_bits());
            }
        }
    }
}
