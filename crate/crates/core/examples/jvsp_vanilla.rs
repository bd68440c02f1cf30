//! Fit strokes to a guide image with the perceptual loss alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokeopt::critic::ToyCritic;
use strokeopt::gradcheck::random_sketch;
use strokeopt::perceptual::{jvsp_loss, JvspConfig};
use strokeopt::pipeline::{InitMode, Mode, RunConfig, Stage, Synthesizer};
use strokeopt::render;

fn main() -> strokeopt::Result<()> {
    let guide = render(&random_sketch(&mut ChaCha8Rng::seed_from_u64(3), 10, 64, 64, 2.0))?;
    let critic = ToyCritic::with_resolution(guide.clone(), 64)?;
    let blank = strokeopt::RasterImage::white(64, 64);
    let (loss, grad) = jvsp_loss(&blank, &guide, &critic, &JvspConfig::default())?;
    println!("blank canvas: loss {loss:.4}, |d loss / d pixels| {:.4}", grad.l2_norm());

    let cfg = RunConfig {
        n_strokes: 20,
        canvas_width: 64,
        canvas_height: 64,
        mode: Mode::Vanilla,
        init: InitMode::Random,
        iters_a: 200,
        ..RunConfig::default()
    };
    let (_, report) = Synthesizer::new(cfg, &critic)?.run().map_err(|e| e.source)?;
    let losses = report.stage_losses(Stage::Perceptual);
    for k in (0..losses.len()).step_by(40) {
        println!("iter {k:3}  loss {:.4}", losses[k]);
    }
    Ok(())
}
