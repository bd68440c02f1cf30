//! Recover a hidden sketch with score distillation against a toy critic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokeopt::augment::AugmentConfig;
use strokeopt::critic::ToyCritic;
use strokeopt::gradcheck::random_sketch;
use strokeopt::guidance::AsdsConfig;
use strokeopt::pipeline::{InitMode, Mode, RunConfig, Synthesizer};
use strokeopt::render;

fn main() -> strokeopt::Result<()> {
    let hidden = random_sketch(&mut ChaCha8Rng::seed_from_u64(1), 8, 64, 64, 2.0);
    let target = render(&hidden)?;
    let critic = ToyCritic::with_resolution(target.clone(), 64)?;
    let cfg = RunConfig {
        n_strokes: 24,
        canvas_width: 64,
        canvas_height: 64,
        stroke_width: 2.0,
        mode: Mode::AsdsOnly,
        init: InitMode::Random,
        iters_b: 150,
        asds: AsdsConfig {
            augment: AugmentConfig::identity(),
            ..AsdsConfig::default()
        },
        ..RunConfig::default()
    };
    let mut s = Synthesizer::new(cfg, &critic)?.with_reference(target.clone())?;
    while let Some(rec) = s.step()? {
        if rec.iteration % 25 == 0 {
            println!("iter {:3}  mse {:.5}", rec.iteration, rec.reference_mse.unwrap_or(f64::NAN));
        }
    }
    println!("final mse {:.5}", render(s.params())?.mse(&target)?);
    Ok(())
}
