//! Render a hand-made two-stroke sketch and a prefix of it to PNG.

use strokeopt::geometry::{logit, ControlPoint, SketchParams, Stroke};
use strokeopt::io::save_png;
use strokeopt::{render, render_partial};

fn main() -> strokeopt::Result<()> {
    let wave = Stroke::new(
        [
            ControlPoint::new(8.0, 48.0),
            ControlPoint::new(24.0, 8.0),
            ControlPoint::new(40.0, 88.0),
            ControlPoint::new(56.0, 48.0),
        ],
        logit(0.9),
    )
    .with_width(3.0);
    let arc = Stroke::new(
        [
            ControlPoint::new(10.0, 10.0),
            ControlPoint::new(60.0, 0.0),
            ControlPoint::new(60.0, 60.0),
            ControlPoint::new(10.0, 54.0),
        ],
        logit(0.5),
    )
    .with_width(1.5)
    .with_color([0.8, 0.1, 0.1]);
    let sketch = SketchParams::new(vec![wave, arc], 64, 64)?;

    let full = render(&sketch)?;
    let first = render_partial(&sketch, 1)?;
    let ink = full.data.iter().filter(|v| **v < 0.99).count();
    println!("{}x{} canvas, {ink} inked channel values", full.width, full.height);

    let dir = std::env::temp_dir();
    save_png(&full, dir.join("render_basics.png"))?;
    save_png(&first, dir.join("render_basics_first.png"))?;
    println!("wrote {}", dir.join("render_basics.png").display());
    Ok(())
}
