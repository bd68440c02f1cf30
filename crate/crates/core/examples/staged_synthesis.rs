//! Full two-stage run (perceptual, then distillation) with checkpointing
//! and drawing-process frames.

use strokeopt::critic::{Critic, ToyCritic};
use strokeopt::geometry::{ControlPoint, SketchParams, Stroke};
use strokeopt::io::{save_png, write_svg};
use strokeopt::pipeline::{emit_process_frames, Checkpoint, RunConfig, Synthesizer};
use strokeopt::{render, Rasterizer};

fn main() -> strokeopt::Result<()> {
    let ring: Vec<Stroke> = (0..6)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 6.0;
            let p = |r: f64, da: f64| ControlPoint::new(48.0 + r * (a + da).cos(), 48.0 + r * (a + da).sin());
            Stroke::new([p(30.0, 0.0), p(34.0, 0.3), p(34.0, 0.7), p(30.0, 1.0)], 3.0).with_width(2.5)
        })
        .collect();
    let critic = ToyCritic::with_resolution(render(&SketchParams::new(ring, 96, 96)?)?, 96)?;
    let cfg = RunConfig {
        prompt: "a ring".into(),
        n_strokes: 16,
        canvas_width: 96,
        canvas_height: 96,
        iters_a: 60,
        iters_b: 60,
        frames_every: 20,
        ..RunConfig::default()
    };
    println!("critic input {}px", critic.info()?.input_resolution);

    let mut s = Synthesizer::new(cfg, &critic)?;
    for _ in 0..70 {
        s.step()?;
    }
    // round-trip the state through JSON and finish from there
    let json = s.checkpoint().to_json()?;
    let resumed = Synthesizer::resume(Checkpoint::from_json(&json)?, &critic)?;
    println!("checkpoint at {:?}, {} bytes", resumed.stage(), json.len());
    let (params, report) = resumed.run().map_err(|e| e.source)?;

    let dir = std::env::temp_dir().join("staged_synthesis");
    std::fs::create_dir_all(&dir)?;
    write_svg(&params, dir.join("final.svg"))?;
    let mut history: Vec<SketchParams> = report.snapshots.iter().map(|(_, p)| p.clone()).collect();
    history.push(params);
    for f in emit_process_frames(&history, 4, &Rasterizer::default())? {
        save_png(&f.image, dir.join(format!("{}.png", f.label)))?;
    }
    println!("{} iterations, output in {}", report.records.len(), dir.display());
    Ok(())
}
