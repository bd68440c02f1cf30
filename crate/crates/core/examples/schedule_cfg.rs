//! Inspect the noise schedule and classifier-free guidance.

use strokeopt::schedule::{cfg_combine, NoiseSchedule};
use strokeopt::Tensor;

fn main() -> strokeopt::Result<()> {
    let s = NoiseSchedule::default();
    for t in [0, 50, 250, 500, 750, 950, 999] {
        println!("t={t:4}  alpha={:.5}  sigma={:.5}", s.alpha(t)?, s.sigma(t)?);
    }
    let cond = Tensor::new(vec![3], vec![0.5, -0.25, 1.0])?;
    let uncond = Tensor::new(vec![3], vec![0.4, -0.25, 0.0])?;
    for w in [0.0, 7.5, 100.0] {
        println!("w={w:5}: {:?}", cfg_combine(&cond, &uncond, w)?.data);
    }
    Ok(())
}
