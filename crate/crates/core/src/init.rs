//! Stroke initialization from fused attention maps, plus the uniform
//! baseline.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{logit, ControlPoint, SketchParams, Stroke};

/// Opacity assigned to freshly initialized strokes.
pub const INIT_OPACITY: f64 = 0.9;

/// Row-major non-negative map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let m = Self { width, height, data };
        m.validate()?;
        Ok(m)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, data }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.data.len() != self.width * self.height {
            return Err(invalid(format!(
                "attention map {}x{} has {} values",
                self.width,
                self.height,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("attention maps must be finite and non-negative"));
        }
        Ok(())
    }

    fn normalized(&self, what: &str) -> Result<Vec<f64>> {
        let sum: f64 = self.data.iter().sum();
        if !(sum > 0.0) {
            return Err(invalid(format!("{what} attention map is all zero")));
        }
        Ok(self.data.iter().map(|v| v / sum).collect())
    }
}

/// Attention maps for one prompt. `cross[i]` belongs to `token_labels[i]`;
/// index 0 is the text encoder's start token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionBundle {
    pub cross: Vec<AttentionMap>,
    pub self_mean: AttentionMap,
    pub token_labels: Vec<String>,
}

impl AttentionBundle {
    pub fn validate(&self) -> Result<()> {
        if self.cross.len() != self.token_labels.len() {
            return Err(invalid(format!(
                "{} cross-attention maps for {} tokens",
                self.cross.len(),
                self.token_labels.len()
            )));
        }
        self.self_mean.validate()?;
        self.cross.iter().try_for_each(AttentionMap::validate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    pub token_index: usize,
    /// Weight of the cross-attention map; `1 - lambda` goes to self-attention.
    pub lambda: f64,
    pub temperature: f64,
    /// Scatter radius for the trailing control points, as a fraction of the
    /// larger canvas side.
    pub radius_frac: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            token_index: 1,
            lambda: 0.5,
            temperature: 0.2,
            radius_frac: 0.05,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.token_index < 1 {
            return Err(invalid("init.token_index must be >= 1 (index 0 is the start token)"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid("init.lambda must be in [0,1]"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("init.temperature must be positive"));
        }
        if !(self.radius_frac >= 0.0 && self.radius_frac.is_finite()) {
            return Err(invalid("init.radius_frac must be non-negative"));
        }
        Ok(())
    }
}

/// Probability distribution over canvas pixels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub probs: Vec<f64>,
}

impl ProbMap {
    pub fn uniform(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// All mass on pixel `(x, y)`.
    pub fn point_mass(width: usize, height: usize, x: usize, y: usize) -> Self {
        let mut probs = vec![0.0; width * height];
        probs[y * width + x] = 1.0;
        Self { width, height, probs }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.probs.len() != self.width * self.height {
            return Err(invalid("probability map has inconsistent size"));
        }
        let sum: f64 = self.probs.iter().sum();
        if self.probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(invalid("probability map must be non-negative and sum to 1"));
        }
        Ok(())
    }
}

/// Blends the chosen token's cross-attention with the mean self-attention,
/// upsamples to the canvas and turns the result into a distribution.
///
/// Both maps are first normalized to sum 1. The blend is upsampled
/// bilinearly, divided by its maximum and passed through `softmax(F / T)`.
pub fn fuse_attention(bundle: &AttentionBundle, cfg: &InitConfig, canvas_w: usize, canvas_h: usize) -> Result<ProbMap> {
    cfg.validate()?;
    bundle.validate()?;
    if canvas_w == 0 || canvas_h == 0 {
        return Err(invalid("canvas must be non-empty"));
    }
    let cross = bundle.cross.get(cfg.token_index).ok_or_else(|| {
        invalid(format!(
            "token index {} out of range for {} tokens",
            cfg.token_index,
            bundle.cross.len()
        ))
    })?;
    let s = &bundle.self_mean;
    if (cross.width, cross.height) != (s.width, s.height) {
        return Err(invalid("cross- and self-attention maps differ in size"));
    }
    let lambda = cfg.lambda;
    let c = if lambda > 0.0 { cross.normalized("cross")? } else { vec![0.0; cross.data.len()] };
    let m = if lambda < 1.0 { s.normalized("self")? } else { vec![0.0; s.data.len()] };
    let fused = AttentionMap {
        width: s.width,
        height: s.height,
        data: c.iter().zip(&m).map(|(c, m)| lambda * c + (1.0 - lambda) * m).collect(),
    };
    let up = upsample_bilinear(&fused, canvas_w, canvas_h);
    let peak = up.iter().copied().fold(0.0, f64::max);
    let logits: Vec<f64> = up.iter().map(|v| v / peak / cfg.temperature).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(ProbMap {
        width: canvas_w,
        height: canvas_h,
        probs: exp.into_iter().map(|e| e / z).collect(),
    })
}

/// Half-pixel-centred bilinear resampling with edge clamping.
pub fn upsample_bilinear(map: &AttentionMap, out_w: usize, out_h: usize) -> Vec<f64> {
    let (w, h) = (map.width, map.height);
    let coord = |o: usize, n_out: usize, n_in: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, out_w, w);
            let v = |x: usize, y: usize| map.data[y * w + x];
            let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
            let bot = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Draws `n` strokes: the first control point from `dist` (with uniform
/// jitter inside the pixel), the other three uniformly in a disc around it.
pub fn sample_strokes<R: Rng + ?Sized>(
    dist: &ProbMap,
    n: usize,
    radius_frac: f64,
    stroke_width: f64,
    rng: &mut R,
) -> Result<SketchParams> {
    if n < 1 {
        return Err(invalid("need at least one stroke"));
    }
    dist.validate()?;
    let index = WeightedIndex::new(&dist.probs).map_err(|e| invalid(format!("bad distribution: {e}")))?;
    let radius = radius_frac * dist.width.max(dist.height) as f64;
    let strokes = (0..n)
        .map(|_| {
            let k = index.sample(rng);
            let (px, py) = ((k % dist.width) as f64, (k / dist.width) as f64);
            let first = ControlPoint::new(px + rng.random::<f64>(), py + rng.random::<f64>());
            scatter(first, radius, stroke_width, rng)
        })
        .collect();
    SketchParams::new(strokes, dist.width, dist.height)
}

/// Strokes whose first control point is uniform over the canvas.
pub fn random_init<R: Rng + ?Sized>(
    n: usize,
    canvas_w: usize,
    canvas_h: usize,
    radius_frac: f64,
    stroke_width: f64,
    rng: &mut R,
) -> Result<SketchParams> {
    if n < 1 || canvas_w == 0 || canvas_h == 0 {
        return Err(invalid("need at least one stroke on a non-empty canvas"));
    }
    let radius = radius_frac * canvas_w.max(canvas_h) as f64;
    let strokes = (0..n)
        .map(|_| {
            let first = ControlPoint::new(
                rng.random::<f64>() * canvas_w as f64,
                rng.random::<f64>() * canvas_h as f64,
            );
            scatter(first, radius, stroke_width, rng)
        })
        .collect();
    SketchParams::new(strokes, canvas_w, canvas_h)
}

fn scatter<R: Rng + ?Sized>(first: ControlPoint, radius: f64, width: f64, rng: &mut R) -> Stroke {
    let mut pts = [first; 4];
    for p in pts.iter_mut().skip(1) {
        let r = radius * rng.random::<f64>().sqrt();
        let a = std::f64::consts::TAU * rng.random::<f64>();
        *p = ControlPoint::new(first.x + r * a.cos(), first.y + r * a.sin());
    }
    Stroke::new(pts, logit(INIT_OPACITY)).with_width(width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle(seed: u64, side: usize, tokens: usize) -> AttentionBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut map = || AttentionMap::new(side, side, (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap();
        AttentionBundle {
            cross: (0..tokens).map(|_| map()).collect(),
            self_mean: map(),
            token_labels: (0..tokens).map(|i| format!("t{i}")).collect(),
        }
    }

    #[test]
    fn lambda_one_ignores_self_attention() {
        let b = bundle(1, 8, 3);
        let cfg = InitConfig {
            lambda: 1.0,
            ..InitConfig::default()
        };
        let mut other = b.clone();
        other.self_mean.data.iter_mut().for_each(|v| *v = *v * 3.0 + 0.5);
        assert_eq!(
            fuse_attention(&b, &cfg, 32, 32).unwrap(),
            fuse_attention(&other, &cfg, 32, 32).unwrap()
        );
    }

    #[test]
    fn lambda_zero_ignores_cross_attention() {
        let b = bundle(2, 8, 3);
        let cfg = InitConfig {
            lambda: 0.0,
            ..InitConfig::default()
        };
        let mut other = b.clone();
        other.cross[1].data.reverse();
        assert_eq!(
            fuse_attention(&b, &cfg, 24, 16).unwrap(),
            fuse_attention(&other, &cfg, 24, 16).unwrap()
        );
    }

    #[test]
    fn rescaling_inputs_does_not_matter() {
        let b = bundle(3, 8, 2);
        let mut scaled = b.clone();
        scaled.cross[1].data.iter_mut().for_each(|v| *v *= 7.3);
        scaled.self_mean.data.iter_mut().for_each(|v| *v *= 0.01);
        let p = fuse_attention(&b, &InitConfig::default(), 40, 40).unwrap();
        let q = fuse_attention(&scaled, &InitConfig::default(), 40, 40).unwrap();
        let worst = p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn start_token_and_out_of_range_are_rejected() {
        let b = bundle(4, 4, 3);
        let zero = InitConfig {
            token_index: 0,
            ..InitConfig::default()
        };
        assert!(fuse_attention(&b, &zero, 8, 8).is_err());
        let far = InitConfig {
            token_index: 3,
            ..InitConfig::default()
        };
        assert!(fuse_attention(&b, &far, 8, 8).is_err());
        let mut empty = b.clone();
        empty.cross[1].data.iter_mut().for_each(|v| *v = 0.0);
        assert!(fuse_attention(&empty, &InitConfig::default(), 8, 8).is_err());
    }

    #[test]
    fn concentrated_map_gives_concentrated_distribution() {
        let mut b = bundle(5, 16, 2);
        b.cross[1] = AttentionMap::from_fn(16, 16, |x, y| if (x, y) == (4, 12) { 1.0 } else { 0.0 });
        b.self_mean = b.cross[1].clone();
        let p = fuse_attention(&b, &InitConfig::default(), 64, 64).unwrap();
        let (arg, _) = p.probs.iter().enumerate().fold((0, 0.0), |m, (i, &v)| if v > m.1 { (i, v) } else { m });
        let (x, y) = (arg % 64, arg / 64);
        assert!((16..20).contains(&x) && (48..52).contains(&y), "peak at {x},{y}");
        assert!(p.probs[arg] > 50.0 / 4096.0);
    }

    #[test]
    fn point_mass_sampling_stays_in_pixel() {
        let dist = ProbMap::point_mass(32, 32, 10, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = sample_strokes(&dist, 50, 0.05, 1.5, &mut rng).unwrap();
        for st in &s.strokes {
            let p = st.points[0];
            assert!(p.distance(&ControlPoint::new(10.5, 20.5)) <= 1.0);
            assert!((st.opacity() - INIT_OPACITY).abs() < 1e-12);
        }
        assert!(sample_strokes(&dist, 0, 0.05, 1.5, &mut rng).is_err());
    }

    #[test]
    fn random_init_is_seeded() {
        let a = random_init(10, 64, 48, 0.05, 1.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_init(10, 64, 48, 0.05, 1.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn fused_distribution_is_positive_and_normalized(
            seed in 0u64..1000,
            side in 2usize..10,
            lambda in 0.0f64..=1.0,
            temperature in 0.05f64..2.0,
            w in 4usize..40,
            h in 4usize..40,
        ) {
            let b = bundle(seed, side, 3);
            let cfg = InitConfig { lambda, temperature, token_index: 2, ..InitConfig::default() };
            let p = fuse_attention(&b, &cfg, w, h).unwrap();
            let sum: f64 = p.probs.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(p.probs.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn scattered_points_stay_in_radius(seed in 0u64..1000, w in 8usize..200, h in 8usize..200, frac in 0.0f64..0.2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_init(20, w, h, frac, 1.5, &mut rng).unwrap();
            let r = frac * w.max(h) as f64;
            for st in &s.strokes {
                for p in &st.points[1..] {
                    prop_assert!(p.distance(&st.points[0]) <= r + 1e-12);
                }
            }
        }
    }
}
