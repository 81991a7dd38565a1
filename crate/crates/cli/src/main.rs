//! `msplat`: generate scenes, train, evaluate, render and run studies.

mod config;
mod fail;
mod study;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msplat_core::checkpoint;
use msplat_core::events::write_jsonl;
use msplat_core::sh::MAX_DEGREE;
use msplat_core::train::evaluate;
use msplat_core::{
    generate, load_manifest, render, BandSet, Camera, ColorMode, Flags, GaussianCloud, SceneManifest, SceneSpec,
    Split, Strategy,
};
use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;

use config::{Preset, RunConfig};
use fail::{Fail, FailExt};

#[derive(Parser)]
#[command(name = "msplat", version, about = "Multi-spectral Gaussian splatting trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    GenScene(GenSceneArgs),
    /// Train one strategy on a manifest.
    Train(TrainArgs),
    /// Evaluate checkpoints against a manifest.
    Eval(EvalArgs),
    /// Render a checkpoint from a manifest view or a camera file.
    Render(RenderArgs),
    /// Train every ablation variant and tabulate the results.
    Ablate(StudyArgs),
    /// Train Joint-Optimized on RGB plus each subset of spectral bands.
    Subsets(StudyArgs),
}

#[derive(Args)]
struct GenSceneArgs {
    #[arg(long)]
    out: PathBuf,
    /// Scene spec file (TOML or JSON); flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    mode: Option<ColorMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    primitives: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    bands: Option<String>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run config (TOML or JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Comma separated, e.g. `RGB,NIR`.
    #[arg(long)]
    bands: Option<String>,
    /// Comma separated subset of specdelay, extadc, msad, sig.
    #[arg(long)]
    flags: Option<String>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Log geometry checksums around every optimizer step.
    #[arg(long)]
    log_checksums: bool,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint file, or a directory of `.mspl` files. Repeatable.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    /// Print primitive counts per model instead of metrics.
    #[arg(long)]
    counts: bool,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, requires = "view")]
    manifest: Option<PathBuf>,
    /// Camera pose of this manifest view.
    #[arg(long, conflicts_with = "camera")]
    view: Option<usize>,
    /// Camera JSON file: fx, fy, cx, cy, width, height, rotation (9, row
    /// major, world to camera), translation (3).
    #[arg(long)]
    camera: Option<PathBuf>,
    #[arg(long, default_value_t = MAX_DEGREE)]
    degree: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
pub(crate) struct StudyArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Base run config handed to every run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma separated rows, e.g. `separate,split,joint,joint-optimized` or
    /// `joint+sig+specdelay`. Subsets take `;` separated band lists.
    #[arg(long)]
    pub variants: Option<String>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent training processes.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub overwrite: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(fail::EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = init_threads().and_then(|_| match cli.command {
        Command::GenScene(a) => gen_scene(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render_cmd(a),
        Command::Ablate(a) => study::ablate(a),
        Command::Subsets(a) => study::subsets(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn init_threads() -> Result<(), Fail> {
    if let Ok(v) = std::env::var("MSPLAT_THREADS") {
        let n: usize = v.parse().config("MSPLAT_THREADS")?;
        if n == 0 {
            return Err(Fail::config("MSPLAT_THREADS must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .config("thread pool")?;
    }
    Ok(())
}

/// Creates `dir` and refuses to clobber any of `outputs` unless allowed.
pub(crate) fn prepare_out(dir: &Path, outputs: &[&str], overwrite: bool) -> Result<(), Fail> {
    for name in outputs {
        let p = dir.join(name);
        if p.exists() {
            if !overwrite {
                return Err(Fail::config(format!("{} exists; pass --overwrite to replace it", p.display())));
            }
            if p.is_dir() {
                fs::remove_dir_all(&p)?;
            } else {
                fs::remove_file(&p)?;
            }
        }
    }
    fs::create_dir_all(dir).data(format!("cannot create {}", dir.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Fail> {
    fs::write(path, bytes).data(format!("cannot write {}", path.display()))
}

fn gen_scene(a: GenSceneArgs) -> Result<(), Fail> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = fs::read_to_string(p).config(format!("cannot read {}", p.display()))?;
            if p.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).config(format!("bad scene spec {}", p.display()))?
            } else {
                toml::from_str(&text).config(format!("bad scene spec {}", p.display()))?
            }
        }
        None => SceneSpec::default(),
    };
    if let Some(v) = a.mode {
        spec.mode = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.primitives {
        spec.primitive_count = v;
    }
    if let Some(v) = a.cameras {
        spec.camera_count = v;
    }
    if let Some(v) = a.size {
        spec.image_size = v;
    }
    if let Some(v) = &a.bands {
        spec.bands = BandSet::parse_list(v)?;
    }
    let scene = generate(&spec)?;
    prepare_out(&a.out, &["manifest.json", "images", "truth.mspl", "scene.json"], a.overwrite)?;
    scene.manifest.save(&a.out)?;
    checkpoint::save(&scene.truth, &a.out.join("truth.mspl"))?;
    let mut s = serde_json::to_string_pretty(&spec).expect("spec serializes");
    s.push('\n');
    write(&a.out.join("scene.json"), s)?;
    eprintln!("wrote {} views to {}", scene.manifest.views.len(), a.out.display());
    Ok(())
}

fn resolve_run(a: &TrainArgs) -> Result<RunConfig, Fail> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = a.preset {
        (rc.strategy, rc.flags) = p.resolve();
    }
    if let Some(s) = a.strategy {
        rc.strategy = s;
    }
    if let Some(f) = &a.flags {
        rc.flags = Flags::parse_list(f)?;
    }
    if let Some(b) = &a.bands {
        rc.bands = Some(BandSet::parse_list(b)?);
    }
    if let Some(s) = a.scale {
        rc.schedule_scale = s;
    }
    if let Some(s) = a.seed {
        rc.seed = s;
    }
    if a.log_checksums {
        rc.log_checksums = true;
    }
    if let Some(m) = &a.manifest {
        rc.manifest = Some(m.clone());
    }
    if let Some(o) = &a.out {
        rc.output_dir = Some(o.clone());
    }
    Ok(rc)
}

const TRAIN_OUTPUTS: [&str; 4] = ["config.resolved.json", "metrics.json", "events.jsonl", "checkpoints"];

fn train(a: TrainArgs) -> Result<(), Fail> {
    let mut rc = resolve_run(&a)?;
    let manifest_path = rc.manifest.clone().ok_or_else(|| Fail::config("no manifest given"))?;
    let out = rc.output_dir.clone().ok_or_else(|| Fail::config("no output directory given"))?;
    let manifest = load_manifest(&manifest_path)?;
    rc.bands = Some(rc.bands.clone().unwrap_or_else(|| manifest.bands.clone()));
    rc.manifest = Some(fs::canonicalize(&manifest_path)?);
    let cfg = rc.train_config(&manifest.bands)?;
    prepare_out(&out, &TRAIN_OUTPUTS, a.overwrite)?;
    rc.output_dir = Some(fs::canonicalize(&out)?);
    write(&out.join("config.resolved.json"), rc.to_json())?;

    let outcome = msplat_core::run(&manifest, &cfg)?;
    let mut log = Vec::new();
    write_jsonl(&outcome.events, &mut log)?;
    write(&out.join("events.jsonl"), log)?;
    write(&out.join("metrics.json"), outcome.metrics.to_json()?)?;
    let dir = out.join("checkpoints");
    fs::create_dir_all(&dir)?;
    for m in &outcome.models {
        checkpoint::save(m, &dir.join(format!("{}.mspl", m.bands().label())))?;
    }
    eprintln!(
        "{}: All PSNR {:.3} dB, SSIM {:.4}",
        outcome.metrics.label, outcome.metrics.all.psnr, outcome.metrics.all.ssim
    );
    Ok(())
}

fn load_checkpoints(paths: &[PathBuf]) -> Result<Vec<GaussianCloud>, Fail> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "mspl"))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(Fail::data(format!("no checkpoints in {}", p.display())));
            }
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    files.iter().map(|f| Ok(checkpoint::load(f)?)).collect()
}

fn eval(a: EvalArgs) -> Result<(), Fail> {
    let manifest = load_manifest(&a.manifest)?;
    let models = load_checkpoints(&a.checkpoint)?;
    if a.counts {
        for m in &models {
            println!("{}\t{}", m.bands().label(), m.len());
        }
        return Ok(());
    }
    let bands: Vec<_> = manifest
        .bands
        .iter()
        .filter(|b| models.iter().any(|m| m.bands().contains(*b)))
        .collect();
    let bands = BandSet::new(&bands).map_err(|_| Fail::data("checkpoints share no band with the manifest"))?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let metrics = evaluate(&manifest, &models, &bands, split, "eval")?;
    let json = metrics.to_json()?;
    match &a.out {
        Some(path) => {
            if path.exists() && !a.overwrite {
                return Err(Fail::config(format!("{} exists; pass --overwrite to replace it", path.display())));
            }
            write(path, json)
        }
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: [f64; 9],
    translation: [f64; 3],
}

fn pose(a: &RenderArgs, manifest: Option<&SceneManifest>) -> Result<Camera, Fail> {
    if let (Some(k), Some(m)) = (a.view, manifest) {
        return m
            .views
            .get(k)
            .map(|v| v.camera.clone())
            .ok_or_else(|| Fail::config(format!("view {k} out of range ({} views)", m.views.len())));
    }
    let path = a.camera.as_ref().ok_or_else(|| Fail::config("pass --view with --manifest, or --camera"))?;
    let text = fs::read_to_string(path).data(format!("cannot read {}", path.display()))?;
    let c: CameraFile = serde_json::from_str(&text).data(format!("bad camera file {}", path.display()))?;
    Ok(Camera::new(
        c.fx,
        c.fy,
        c.cx,
        c.cy,
        Matrix3::from_row_slice(&c.rotation),
        Vector3::from(c.translation),
        c.width,
        c.height,
        msplat_core::Band::Rgb,
    )?)
}

fn render_cmd(a: RenderArgs) -> Result<(), Fail> {
    if a.degree > MAX_DEGREE {
        return Err(Fail::config(format!("degree must be at most {MAX_DEGREE}")));
    }
    let cloud = checkpoint::load(&a.checkpoint)?;
    let manifest = a.manifest.as_deref().map(load_manifest).transpose()?;
    let cam = pose(&a, manifest.as_ref())?;
    let names: Vec<String> = cloud
        .bands()
        .iter()
        .map(|b| format!("{}.png", b.name().to_ascii_lowercase()))
        .collect();
    let names_ref: Vec<&str> = names.iter().map(String::as_str).collect();
    prepare_out(&a.out, &names_ref, a.overwrite)?;
    for (band, name) in cloud.bands().iter().zip(&names) {
        let img = render(&cloud, &cam.with_band(band), a.degree).clamped();
        img.save_png(&a.out.join(name))?;
    }
    Ok(())
}
