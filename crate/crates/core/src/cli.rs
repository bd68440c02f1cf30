//! Command-line interface. [`run`] parses arguments, executes a subcommand
//! and returns the process exit code: 0 on success, 1 on runtime failure,
//! 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::augment::{resize, AugmentConfig};
use crate::config;
use crate::critic::{Critic, ToyCritic};
use crate::critic_client::HttpCritic;
use crate::error::Error;
use crate::gradcheck::{check_augment, check_jvsp, check_raster, GradCheckConfig, GradCheckReport};
use crate::io::{load_png, read_svg, save_png, write_svg};
use crate::pipeline::{emit_process_frames, initialize, Checkpoint, InitMode, Mode, RunConfig, Synthesizer};
use crate::raster::Rasterizer;
use crate::tensor::RasterImage;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Step sizes of the rasterizer finite-difference suite.
pub const RASTER_FD_STEP: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "strokeopt", version, about = "Vector sketch synthesis with Bezier strokes")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a sketch for a prompt.
    Synthesize(SynthesizeArgs),
    /// Fit strokes to a target image with the toy critic.
    Vectorize(VectorizeArgs),
    /// Rasterize an SVG sketch to PNG.
    Render(RenderArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Score SVG sketches against their prompts with a remote critic.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Vanilla,
    AsdsOnly,
    Staged,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Vanilla => Mode::Vanilla,
            ModeArg::AsdsOnly => Mode::AsdsOnly,
            ModeArg::Staged => Mode::Staged,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Attention,
    Random,
}

#[derive(Debug, Args)]
pub struct CriticArgs {
    /// Base URL of a critic server.
    #[arg(long, conflicts_with = "toy_target")]
    pub critic_url: Option<String>,
    /// Use the analytic toy critic with this target image.
    #[arg(long)]
    pub toy_target: Option<PathBuf>,
    /// Input resolution of the toy critic.
    #[arg(long, default_value_t = 512)]
    pub toy_resolution: usize,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub critic: CriticArgs,
    #[arg(long)]
    pub prompt: Option<String>,
    /// Prompt token whose cross-attention seeds the strokes (0 is the start token).
    #[arg(long)]
    pub token_index: Option<usize>,
    #[arg(long)]
    pub n_strokes: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cross- vs self-attention blend.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub guidance_scale: Option<f64>,
    #[arg(long)]
    pub iters_a: Option<usize>,
    #[arg(long)]
    pub iters_b: Option<usize>,
    /// Stroke width in pixels.
    #[arg(long)]
    pub width: Option<f64>,
    /// Snapshot every N iterations (0 disables).
    #[arg(long)]
    pub frames_every: Option<usize>,
    /// Square canvas side.
    #[arg(long)]
    pub canvas: Option<usize>,
    /// Config file (JSON or key=value), applied under the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct VectorizeArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub n_strokes: usize,
    #[arg(long, default_value_t = 300)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.0)]
    pub width: f64,
    #[arg(long, default_value_t = 512)]
    pub toy_resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub frames_every: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub svg: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random sketches for the rasterizer suite.
    #[arg(long, default_value_t = 50)]
    pub sketches: usize,
    #[arg(long, default_value_t = 8)]
    pub strokes: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Sampled coordinates per augmentation / perceptual trial.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub svg_dir: PathBuf,
    /// One prompt per line, matched to the SVGs in sorted order, or
    /// `name.svg<TAB>prompt` lines.
    #[arg(long)]
    pub prompts_file: PathBuf,
    #[arg(long)]
    pub critic_url: String,
    /// Write the report as JSON here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<crate::error::CriticError> for Failure {
    fn from(e: crate::error::CriticError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    let result = match cli.command {
        Command::Synthesize(a) => synthesize(a),
        Command::Vectorize(a) => vectorize(a),
        Command::Render(a) => render(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}

enum CriticHandle {
    Toy(ToyCritic),
    Http(HttpCritic),
}

impl CriticHandle {
    fn as_dyn(&self) -> &dyn Critic {
        match self {
            CriticHandle::Toy(c) => c,
            CriticHandle::Http(c) => c,
        }
    }
}

fn open_critic(args: &CriticArgs) -> CliResult<(CriticHandle, Value)> {
    match (&args.critic_url, &args.toy_target) {
        (Some(url), None) => {
            let c = HttpCritic::connect(url)?;
            let desc = json!({"kind": "http", "url": url, "info": c.cached_info()});
            Ok((CriticHandle::Http(c), desc))
        }
        (None, Some(path)) => {
            let target = load_png(path)?;
            let c = ToyCritic::with_resolution(target, args.toy_resolution)?;
            let desc = json!({"kind": "toy", "target": path, "resolution": args.toy_resolution});
            Ok((CriticHandle::Toy(c), desc))
        }
        _ => Err(Failure::Usage("a critic is required: pass --critic-url or --toy-target".into())),
    }
}

fn flag_layer(a: &SynthesizeArgs) -> CliResult<Vec<(String, Value)>> {
    let mut kv: Vec<(String, Value)> = Vec::new();
    let mut put = |k: &str, v: Value| kv.push((k.to_string(), v));
    if let Some(v) = &a.prompt {
        put("prompt", json!(v));
    }
    if let Some(v) = a.token_index {
        put("init_cfg.token_index", json!(v));
    }
    if let Some(v) = a.n_strokes {
        put("n_strokes", json!(v));
    }
    if let Some(v) = a.mode {
        put("mode", serde_json::to_value(Mode::from(v)).expect("enum serializes"));
    }
    if let Some(v) = a.init {
        let m = match v {
            InitArg::Attention => InitMode::Attention,
            InitArg::Random => InitMode::Random,
        };
        put("init", serde_json::to_value(m).expect("enum serializes"));
    }
    if let Some(v) = a.seed {
        put("seed", json!(v));
    }
    if let Some(v) = a.lambda {
        put("init_cfg.lambda", json!(v));
    }
    if let Some(v) = a.guidance_scale {
        put("asds.guidance_scale", json!(v));
    }
    if let Some(v) = a.iters_a {
        put("iters_a", json!(v));
    }
    if let Some(v) = a.iters_b {
        put("iters_b", json!(v));
    }
    if let Some(v) = a.width {
        put("stroke_width", json!(v));
    }
    if let Some(v) = a.frames_every {
        put("frames_every", json!(v));
    }
    if let Some(v) = a.canvas {
        put("canvas_width", json!(v));
        put("canvas_height", json!(v));
    }
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        put(k.trim(), config::parse_value(v));
    }
    Ok(kv)
}

fn resolve_config(a: &SynthesizeArgs) -> CliResult<RunConfig> {
    let mut layers = Vec::new();
    if let Some(path) = &a.config {
        layers.push(config::load_file(path).map_err(|e| Failure::Usage(e.to_string()))?);
    }
    layers.push(flag_layer(a)?);
    config::resolve(&layers).map_err(|e| Failure::Usage(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

fn write_manifest(out_dir: &Path, command: &str, cfg: &RunConfig, critic: &Value, extra: Value) -> CliResult {
    let manifest = json!({
        "tool": "strokeopt",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg,
        "critic": critic,
        "extra": extra,
    });
    write_json(&out_dir.join("manifest.json"), &manifest)
}

fn write_sketch(out_dir: &Path, stem: &str, raster: &Rasterizer, params: &crate::geometry::SketchParams) -> CliResult {
    write_svg(params, out_dir.join(format!("{stem}.svg")))?;
    save_png(&raster.render(params)?, out_dir.join(format!("{stem}.png")))?;
    Ok(())
}

/// Runs the optimization loop and writes every artifact of a run.
fn run_and_write(mut synth: Synthesizer<'_>, out_dir: &Path) -> CliResult {
    let raster = Rasterizer::new(synth.config().raster);
    let total = synth.config().iters_a + synth.config().iters_b;
    let started = Instant::now();
    while !synth.is_done() {
        match synth.step() {
            Ok(Some(rec)) => {
                let n = synth.report().records.len();
                if n % 50 == 0 || n == total {
                    log::info!("{n}/{total} {:?} loss {:.5e}", rec.stage, rec.loss);
                }
            }
            Ok(None) => break,
            Err(e) => {
                let path = out_dir.join("checkpoint.json");
                fs::write(&path, synth.checkpoint().to_json()?).map_err(Error::from)?;
                return Err(Failure::Runtime(format!(
                    "{e} (state saved to {}; rerun with --resume)",
                    path.display()
                )));
            }
        }
    }
    if let Some(g) = synth.guide() {
        save_png(g, out_dir.join("guide.png"))?;
    }
    fs::write(out_dir.join("checkpoint.json"), synth.checkpoint().to_json()?).map_err(Error::from)?;
    let (params, report) = synth.finish();
    write_sketch(out_dir, "final", &raster, &params)?;
    write_json(&out_dir.join("losses.json"), &report.records)?;

    if !report.snapshots.is_empty() {
        let frames_dir = out_dir.join("frames");
        fs::create_dir_all(&frames_dir).map_err(Error::from)?;
        let mut history: Vec<_> = report.snapshots.iter().map(|(_, p)| p.clone()).collect();
        history.push(params.clone());
        for f in emit_process_frames(&history, 1, &raster)? {
            save_png(&f.image, frames_dir.join(format!("{}.png", f.label)))?;
        }
    }
    println!(
        "{} iterations in {:.1}s; wrote {}",
        report.records.len(),
        started.elapsed().as_secs_f64(),
        out_dir.join("final.svg").display()
    );
    Ok(())
}

fn synthesize(a: SynthesizeArgs) -> CliResult {
    let (critic, desc) = open_critic(&a.critic)?;
    fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    if let Some(path) = &a.resume {
        let text = fs::read_to_string(path).map_err(Error::from)?;
        let cp = Checkpoint::from_json(&text)?;
        write_manifest(&a.out_dir, "synthesize", &cp.config, &desc, json!({"resumed_from": path}))?;
        let synth = Synthesizer::resume(cp, critic.as_dyn())?;
        return run_and_write(synth, &a.out_dir);
    }
    let cfg = resolve_config(&a)?;
    write_manifest(&a.out_dir, "synthesize", &cfg, &desc, Value::Null)?;
    let init = initialize(&cfg, critic.as_dyn())?;
    write_sketch(&a.out_dir, "init", &Rasterizer::new(cfg.raster), &init)?;
    let synth = Synthesizer::from_params(cfg, critic.as_dyn(), init)?;
    run_and_write(synth, &a.out_dir)
}

fn vectorize(a: VectorizeArgs) -> CliResult {
    let target = load_png(&a.target)?;
    let critic = ToyCritic::with_resolution(target.clone(), a.toy_resolution)?;
    let mut cfg = RunConfig {
        prompt: "target".into(),
        seed: a.seed,
        n_strokes: a.n_strokes,
        canvas_width: target.width,
        canvas_height: target.height,
        stroke_width: a.width,
        mode: Mode::AsdsOnly,
        init: InitMode::Random,
        iters_a: 0,
        iters_b: a.iters,
        frames_every: a.frames_every,
        ..RunConfig::default()
    };
    cfg.asds.augment = AugmentConfig::identity();
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    fs::create_dir_all(&a.out_dir).map_err(Error::from)?;
    let desc = json!({"kind": "toy", "target": a.target, "resolution": a.toy_resolution});
    write_manifest(&a.out_dir, "vectorize", &cfg, &desc, Value::Null)?;
    let init = initialize(&cfg, &critic)?;
    let raster = Rasterizer::new(cfg.raster);
    write_sketch(&a.out_dir, "init", &raster, &init)?;
    let init_mse = raster.render(&init)?.mse(&target)?;
    let synth = Synthesizer::from_params(cfg, &critic, init)?.with_reference(target.clone())?;
    run_and_write(synth, &a.out_dir)?;
    let fin = read_svg(a.out_dir.join("final.svg"))?;
    let final_mse = raster.render(&fin)?.mse(&target)?;
    println!(
        "mse {init_mse:.6} -> {final_mse:.6} ({:.1}% of initial)",
        100.0 * final_mse / init_mse
    );
    Ok(())
}

fn render(a: RenderArgs) -> CliResult {
    let params = read_svg(&a.svg)?;
    save_png(&Rasterizer::default().render(&params)?, &a.out)?;
    Ok(())
}

fn report_line(name: &str, r: &GradCheckReport, cfg: &GradCheckConfig) -> bool {
    let ok = r.ok(cfg);
    println!(
        "{name:<8} checked {:>6} passed {:>6} ({:.4}) nonsmooth {:>4} max_rel_error {:.3e} p99 {:.3e} {}",
        r.checked,
        r.passed,
        r.fraction_passed(),
        r.nonsmooth,
        r.max_rel_error,
        r.p99_rel_error,
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

fn gradcheck(a: GradcheckArgs) -> CliResult {
    let cfg = GradCheckConfig::default();
    let mut raster = GradCheckReport::default();
    for i in 0..a.sketches as u64 {
        raster.merge(&check_raster(a.seed + i, a.strokes, a.size, RASTER_FD_STEP, RASTER_FD_STEP, &cfg)?);
    }
    let mut augment = GradCheckReport::default();
    let mut jvsp = GradCheckReport::default();
    for i in 0..4 {
        augment.merge(&check_augment(a.seed + i, 32, 48, a.samples, &cfg)?);
        jvsp.merge(&check_jvsp(a.seed + i, 32, a.samples, &cfg)?);
    }
    let all = [
        report_line("raster", &raster, &cfg),
        report_line("augment", &augment, &cfg),
        report_line("jvsp", &jvsp, &cfg),
    ];
    let worst = [&raster, &augment, &jvsp].iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    println!("max rel. error {worst:.3e}");
    if all.iter().all(|&ok| ok) {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

#[derive(Debug, Serialize)]
struct EvalRow {
    file: String,
    prompt: String,
    clip_text_cosine: f64,
    aesthetic: f64,
}

fn pair_prompts(dir: &Path, prompts: &str) -> CliResult<Vec<(PathBuf, String)>> {
    let mut svgs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Error::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "svg"))
        .collect();
    svgs.sort();
    let lines: Vec<&str> = prompts.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.iter().all(|l| l.contains('\t')) && !lines.is_empty() {
        return Ok(lines
            .iter()
            .map(|l| {
                let (f, p) = l.split_once('\t').expect("checked");
                (dir.join(f.trim()), p.trim().to_string())
            })
            .collect());
    }
    if lines.len() != svgs.len() {
        return Err(Failure::Usage(format!(
            "{} prompts for {} SVG files in {}",
            lines.len(),
            svgs.len(),
            dir.display()
        )));
    }
    Ok(svgs.into_iter().zip(lines.into_iter().map(String::from)).collect())
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let prompts = fs::read_to_string(&a.prompts_file).map_err(Error::from)?;
    let pairs = pair_prompts(&a.svg_dir, &prompts)?;
    let critic = HttpCritic::connect(&a.critic_url)?;
    let res = critic.cached_info().input_resolution;
    let raster = Rasterizer::default();
    let mut rows = Vec::new();
    for (path, prompt) in pairs {
        let params = read_svg(&path)?;
        let img: RasterImage = resize(&raster.render(&params)?, res, res)?;
        let s = critic.score(&img, &prompt)?;
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        println!("{file}\t{:.4}\t{:.4}\t{prompt}", s.clip_text_cosine, s.aesthetic);
        rows.push(EvalRow {
            file,
            prompt,
            clip_text_cosine: s.clip_text_cosine,
            aesthetic: s.aesthetic,
        });
    }
    if rows.is_empty() {
        return Err(Failure::Usage("no sketches to evaluate".into()));
    }
    let n = rows.len() as f64;
    let mean_cos = rows.iter().map(|r| r.clip_text_cosine).sum::<f64>() / n;
    let mean_aes = rows.iter().map(|r| r.aesthetic).sum::<f64>() / n;
    println!("mean clip_text_cosine {mean_cos:.4}  mean aesthetic {mean_aes:.4}  (n = {})", rows.len());
    if let Some(out) = &a.out {
        write_json(
            out,
            &json!({"rows": rows, "mean_clip_text_cosine": mean_cos, "mean_aesthetic": mean_aes}),
        )?;
    }
    Ok(())
}
