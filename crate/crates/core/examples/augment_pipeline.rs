//! Apply random perspective/crop/sharpness views to a render and pull a
//! gradient back through one of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokeopt::augment::{sample_augment, AugmentConfig, AugmentPlan};
use strokeopt::gradcheck::random_sketch;
use strokeopt::io::save_png;
use strokeopt::{render, Tensor};

fn main() -> strokeopt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = render(&random_sketch(&mut rng, 10, 96, 96, 2.0))?;
    let cfg = AugmentConfig {
        out_size: 128,
        ..AugmentConfig::default()
    };
    for i in 0..3 {
        let ap = sample_augment(&mut rng, &cfg, img.width, img.height)?;
        let plan = AugmentPlan::new(&ap)?;
        let fwd = plan.forward(&img)?;
        let upstream = Tensor::filled(&fwd.image.shape(), 1.0);
        let grad = plan.backward(&fwd, &upstream)?;
        println!(
            "view {i}: flags {:?}, crop {:.1}x{:.1}, |grad| {:.2}",
            ap.apply_flags,
            ap.crop_rect.w,
            ap.crop_rect.h,
            grad.l2_norm()
        );
        save_png(&fwd.image, std::env::temp_dir().join(format!("augment_view_{i}.png")))?;
    }
    Ok(())
}
