//! Fuse attention maps into an initialization distribution and draw strokes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokeopt::critic::{Critic, ToyCritic};
use strokeopt::geometry::{ControlPoint, SketchParams, Stroke};
use strokeopt::init::{fuse_attention, sample_strokes, InitConfig};
use strokeopt::render;

fn main() -> strokeopt::Result<()> {
    // target: a single stroke in the lower-right quarter
    let mark = Stroke::new(
        [
            ControlPoint::new(70.0, 70.0),
            ControlPoint::new(90.0, 60.0),
            ControlPoint::new(100.0, 100.0),
            ControlPoint::new(120.0, 110.0),
        ],
        4.0,
    )
    .with_width(4.0);
    let target = render(&SketchParams::new(vec![mark], 128, 128)?)?;
    let critic = ToyCritic::with_resolution(target, 128)?;
    let bundle = critic.attention("a mark", 0)?;
    println!("tokens {:?}", bundle.token_labels);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for lambda in [0.0, 0.5, 1.0] {
        let cfg = InitConfig {
            lambda,
            ..InitConfig::default()
        };
        let dist = fuse_attention(&bundle, &cfg, 128, 128)?;
        let strokes = sample_strokes(&dist, 200, cfg.radius_frac, 1.5, &mut rng)?;
        let in_quarter = strokes.strokes.iter().filter(|s| s.points[0].x >= 64.0 && s.points[0].y >= 64.0).count();
        println!("lambda {lambda}: {in_quarter}/200 strokes start in the target quarter");
    }
    Ok(())
}
