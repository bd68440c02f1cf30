//! Discrete diffusion noise schedule, classifier-free guidance and the
//! closed-form toy noise predictor.
//!
//! Timesteps follow the latent-diffusion convention: `t` indexes
//! `0..num_steps` and `alpha_bar[t] = prod_{i <= t} (1 - beta_i)`, with betas
//! linear in square-root space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Schedule parameters exchanged with a critic server in `/info`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    #[serde(rename = "T")]
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            num_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

impl ScheduleParams {
    /// True when both schedules agree to within `tol` on every parameter.
    pub fn matches(&self, other: &ScheduleParams, tol: f64) -> bool {
        self.num_steps == other.num_steps
            && (self.beta_start - other.beta_start).abs() <= tol
            && (self.beta_end - other.beta_end).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(ScheduleParams::default()).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams {
            num_steps,
            beta_start,
            beta_end,
        } = params;
        if num_steps < 2 {
            return Err(invalid("schedule needs at least two steps"));
        }
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "schedule betas must satisfy 0 < start < end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let mut alpha_bar = Vec::with_capacity(num_steps);
        let mut prod = 1.0;
        for i in 0..num_steps {
            let r = s0 + (s1 - s0) * i as f64 / (num_steps - 1) as f64;
            prod *= 1.0 - r * r;
            alpha_bar.push(prod);
        }
        Ok(Self { params, alpha_bar })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn num_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            return Err(invalid(format!("timestep {t} outside 0..{}", self.num_steps())));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bar[t])
    }

    /// Signal scale `sqrt(alpha_bar_t)`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar(t)?.sqrt())
    }

    /// Noise scale `sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// `z_t = alpha_t * x + sigma_t * eps`.
    pub fn add_noise(&self, x: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        x.same_shape(eps)?;
        let (a, s) = (self.alpha(t)?, self.sigma(t)?);
        Ok(Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&eps.data).map(|(x, e)| a * x + s * e).collect(),
        })
    }

    /// Optimal noise prediction when the data distribution is a point mass
    /// at `target`: `(z_t - alpha_t * target) / sigma_t`.
    pub fn toy_predict_noise(&self, z_t: &Tensor, t: usize, target: &Tensor) -> Result<Tensor> {
        z_t.same_shape(target)?;
        let (a, s) = (self.alpha(t)?, self.sigma(t)?);
        if !(s > 0.0) {
            return Err(invalid(format!("noise scale is zero at timestep {t}")));
        }
        Ok(Tensor {
            shape: z_t.shape.clone(),
            data: z_t.data.iter().zip(&target.data).map(|(z, x)| (z - a * x) / s).collect(),
        })
    }
}

/// Classifier-free guidance: `(1 + w) * eps_cond - w * eps_uncond`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, guidance_scale: f64) -> Result<Tensor> {
    eps_cond.same_shape(eps_uncond)?;
    let w = guidance_scale;
    Ok(Tensor {
        shape: eps_cond.shape.clone(),
        data: eps_cond
            .data
            .iter()
            .zip(&eps_uncond.data)
            .map(|(c, u)| (1.0 + w) * c - w * u)
            .collect(),
    })
}

/// Draws training timesteps away from both ends of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimestepSampler {
    pub t_min_frac: f64,
    pub t_max_frac: f64,
}

impl Default for TimestepSampler {
    fn default() -> Self {
        Self {
            t_min_frac: 0.05,
            t_max_frac: 0.95,
        }
    }
}

impl TimestepSampler {
    /// Inclusive range of timesteps this sampler can return.
    pub fn bounds(&self, num_steps: usize) -> (usize, usize) {
        let n = num_steps as f64;
        let lo = (self.t_min_frac * n).ceil() as usize;
        let hi = ((self.t_max_frac * n).floor() as usize).min(num_steps - 1);
        (lo, hi)
    }

    /// `t = floor(u * T)` with `u ~ U(t_min_frac, t_max_frac)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, num_steps: usize) -> Result<usize> {
        if !(0.0 <= self.t_min_frac && self.t_min_frac < self.t_max_frac && self.t_max_frac <= 1.0) {
            return Err(invalid("timestep fractions must satisfy 0 <= min < max <= 1"));
        }
        let (lo, hi) = self.bounds(num_steps);
        if lo > hi {
            return Err(invalid("timestep range is empty"));
        }
        let u = self.t_min_frac + (self.t_max_frac - self.t_min_frac) * rng.random::<f64>();
        Ok(((u * num_steps as f64).floor() as usize).clamp(lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::new(vec![n], (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    // Independent oracle: betas listed explicitly, product taken in log space.
    fn sigma_oracle(t: usize) -> f64 {
        let (a, b) = (0.00085f64.sqrt(), 0.012f64.sqrt());
        let log_ab: f64 = (0..=t)
            .map(|i| {
                let beta = (a + (b - a) * (i as f64) / 999.0).powi(2);
                (1.0 - beta).ln()
            })
            .sum();
        (1.0 - log_ab.exp()).sqrt()
    }

    #[test]
    fn schedule_identities_hold_everywhere() {
        let s = NoiseSchedule::default();
        for t in 0..s.num_steps() {
            let (a, g) = (s.alpha(t).unwrap(), s.sigma(t).unwrap());
            assert!((a * a + g * g - 1.0).abs() <= 1e-12);
            if t > 0 {
                assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
            }
        }
        assert!(s.alpha(0).unwrap() > 0.999);
        assert!(s.alpha(1000).is_err());
    }

    #[test]
    fn add_noise_without_noise_scales_signal() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, 32);
        let z = s.add_noise(&x, 400, &Tensor::zeros(&[32])).unwrap();
        let a = s.alpha(400).unwrap();
        assert!(z.data.iter().zip(&x.data).all(|(z, x)| *z == a * x));
    }

    #[test]
    fn add_noise_near_zero_stays_close() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, 64);
        let e = randn(&mut rng, 64);
        let z = s.add_noise(&x, 1, &e).unwrap();
        let diff = z.data.iter().zip(&x.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let (a, g) = (s.alpha(1).unwrap(), s.sigma(1).unwrap());
        assert!(diff <= (1.0 - a) * x.max_abs() + g * e.max_abs() + 1e-15);
        assert!(g < 0.05);
    }

    #[test]
    fn pure_noise_norm_matches_oracle() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = randn(&mut rng, 128);
        let z = s.add_noise(&Tensor::zeros(&[128]), 500, &e).unwrap();
        let expect = sigma_oracle(500) * e.l2_norm();
        assert!((z.l2_norm() - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn cfg_examples() {
        let one = Tensor::filled(&[5], 1.0);
        let zero = Tensor::zeros(&[5]);
        assert_eq!(cfg_combine(&one, &zero, 100.0).unwrap(), Tensor::filled(&[5], 101.0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = randn(&mut rng, 8);
        let u = randn(&mut rng, 8);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), c);
        for w in [0.0, 7.5, 100.0] {
            let same = cfg_combine(&c, &c, w).unwrap();
            assert!(same.data.iter().zip(&c.data).all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + w)));
        }
        assert!(cfg_combine(&c, &Tensor::zeros(&[7]), 1.0).is_err());
    }

    #[test]
    fn toy_predictor_inverts_noising() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 50);
        let e = randn(&mut rng, 50);
        for t in [0, 50, 500, 999] {
            let z = s.add_noise(&x, t, &e).unwrap();
            let pred = s.toy_predict_noise(&z, t, &x).unwrap();
            let err = pred.data.iter().zip(&e.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-9, "t={t} err={err}");
            let clean = s.add_noise(&x, t, &Tensor::zeros(&[50])).unwrap();
            assert!(s.toy_predict_noise(&clean, t, &x).unwrap().max_abs() < 1e-12);
        }
        // reconstruction identity on an arbitrary z
        let z = randn(&mut rng, 50);
        let pred = s.toy_predict_noise(&z, 300, &x).unwrap();
        let (a, g) = (s.alpha(300).unwrap(), s.sigma(300).unwrap());
        for i in 0..50 {
            assert!((g * pred.data[i] + a * x.data[i] - z.data[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn timesteps_stay_in_band() {
        let sampler = TimestepSampler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(sampler.bounds(1000), (50, 950));
        let mut seen = (usize::MAX, 0);
        for _ in 0..20_000 {
            let t = sampler.sample(&mut rng, 1000).unwrap();
            assert!((50..=950).contains(&t));
            seen = (seen.0.min(t), seen.1.max(t));
        }
        assert!(seen.0 < 60 && seen.1 > 940);
    }

    #[test]
    fn bad_schedules_rejected() {
        let bad = ScheduleParams {
            beta_end: 0.0001,
            ..ScheduleParams::default()
        };
        assert!(NoiseSchedule::new(bad).is_err());
    }

    proptest! {
        #[test]
        fn cfg_is_affine(
            c in proptest::collection::vec(-5.0..5.0f64, 6),
            d in proptest::collection::vec(-5.0..5.0f64, 6),
            u in proptest::collection::vec(-5.0..5.0f64, 6),
            w in 0.0..150.0f64,
            k in -3.0..3.0f64,
        ) {
            let t = |v: &Vec<f64>| Tensor::new(vec![6], v.clone()).unwrap();
            // f(c + k d, u) = f(c, u) + k (1 + w) d
            let mixed: Vec<f64> = c.iter().zip(&d).map(|(a, b)| a + k * b).collect();
            let lhs = cfg_combine(&t(&mixed), &t(&u), w).unwrap();
            let base = cfg_combine(&t(&c), &t(&u), w).unwrap();
            for i in 0..6 {
                let rhs = base.data[i] + k * (1.0 + w) * d[i];
                prop_assert!((lhs.data[i] - rhs).abs() <= 1e-9 * (1.0 + w) * 10.0);
            }
        }
    }
}
