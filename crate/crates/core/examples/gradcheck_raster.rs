//! Compare rasterizer gradients with finite differences on a few sketches.

use strokeopt::cli::RASTER_FD_STEP;
use strokeopt::gradcheck::{check_raster, GradCheckConfig, GradCheckReport};

fn main() -> strokeopt::Result<()> {
    let cfg = GradCheckConfig::default();
    let mut total = GradCheckReport::default();
    for seed in 0..5 {
        let r = check_raster(seed, 8, 64, RASTER_FD_STEP, RASTER_FD_STEP, &cfg)?;
        println!(
            "seed {seed}: {}/{} within {:.0e}, {} near kinks",
            r.passed, r.checked, cfg.rel_tol, r.nonsmooth
        );
        total.merge(&r);
    }
    println!(
        "overall {:.2}% (p99 rel. error {:.2e})",
        100.0 * total.fraction_passed(),
        total.p99_rel_error
    );
    Ok(())
}
