//! Export a sketch to SVG, read it back and compare renders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strokeopt::gradcheck::random_sketch;
use strokeopt::render;
use strokeopt::svg::{export_svg, import_svg};

fn main() -> strokeopt::Result<()> {
    let sketch = random_sketch(&mut ChaCha8Rng::seed_from_u64(9), 5, 80, 60, 2.0);
    let text = export_svg(&sketch);
    println!("{text}");
    let back = import_svg(&text)?;
    let gap = render(&sketch)?.max_abs_diff(&render(&back)?)?;
    println!("{} strokes read back, max pixel difference {gap:.2e}", back.len());

    match import_svg("<svg width=\"8\" height=\"8\"><path d=\"M 0 0 L 4 4\"/></svg>") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
