#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strokeopt::augment::AugmentConfig;
use strokeopt::geometry::{logit, ControlPoint, SketchParams, Stroke};
use strokeopt::guidance::AsdsConfig;
use strokeopt::pipeline::{InitMode, Mode, RunConfig};

/// Ground-truth sketch the toy runs try to recover: `n` opaque black strokes
/// clustered in the middle of a `side`-pixel square.
pub fn hidden_sketch(seed: u64, n: usize, side: usize, width: f64) -> SketchParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let s = side as f64;
    let strokes = (0..n)
        .map(|_| {
            let c = (rng.random_range(0.2..0.8) * s, rng.random_range(0.2..0.8) * s);
            let pts = std::array::from_fn(|_| {
                ControlPoint::new(
                    c.0 + rng.random_range(-0.2..0.2) * s,
                    c.1 + rng.random_range(-0.2..0.2) * s,
                )
            });
            Stroke::new(pts, logit(0.9)).with_width(width)
        })
        .collect();
    SketchParams::new(strokes, side, side).unwrap()
}

/// Score-distillation-only run against a toy critic, with identity
/// augmentation (the toy critic is not augmentation-invariant).
pub fn toy_run(seed: u64, side: usize, n_strokes: usize, iters: usize, init: InitMode) -> RunConfig {
    RunConfig {
        prompt: "toy sketch".into(),
        seed,
        n_strokes,
        canvas_width: side,
        canvas_height: side,
        stroke_width: 2.0,
        mode: Mode::AsdsOnly,
        init,
        iters_a: 0,
        iters_b: iters,
        asds: AsdsConfig {
            augment: AugmentConfig::identity(),
            ..AsdsConfig::default()
        },
        ..RunConfig::default()
    }
}
