//! `lnr` — layered video decomposition and retiming from the command line.
//!
//! Six commands cover the pipeline: `synth` writes a synthetic dataset,
//! `decompose` fits the layered model to it, `render` and `retime` turn a
//! checkpoint back into frames, `eval` scores a prediction directory, and
//! `align` time-warps one motion signal onto another.
//!
//! Exit codes: 0 on success, 2 for usage or validation problems, 3 for
//! runtime failures (divergence, camera-tracking failure). Every command
//! echoes its effective parameters into `run.json` in the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Array3};
use serde_json::json;

use lnr_core::camera::{is_static, retime_transform, track_camera, CameraMode, Homography};
use lnr_core::compose::{detail_transfer, over_composite, LayerSet};
use lnr_core::dataio::{
    frame_name, layer_dir, load_dataset, read_rgb_png, read_rgba_png, validate_dataset,
    write_rgb_png, write_rgba_png, Dataset,
};
use lnr_core::eval::{alpha_iou_frames, psnr_frames, Db, EvalReport, RegionCurve};
use lnr_core::retime::{align_signals, apply_edit, CowParams, EditScript, MotionSignal};
use lnr_core::synth::{export_dataset, generate_scene, load_regions, preset, PRESETS};
use lnr_core::texture::UvMap;
use lnr_core::trainer::{
    background_geometry, load_checkpoint, read_metrics, render_frame_eval, render_frame_refined,
    train, train_refiner, Model, TrainConfig, TrainSession,
};
use lnr_core::CoreError;

#[derive(Parser)]
#[command(name = "lnr", version, about = "Layered video decomposition and retiming")]
struct Cli {
    /// Accepted for script compatibility; every command is deterministic
    /// regardless.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset from a named preset.
    Synth(SynthArgs),
    /// Fit the layered model to a dataset (checkpoint + metrics.csv).
    Decompose(DecomposeArgs),
    /// Render the learned decomposition back into frames.
    Render(RenderArgs),
    /// Apply a retiming edit script to the learned layers.
    Retime(RetimeArgs),
    /// Score a prediction directory against ground truth.
    Eval(EvalArgs),
    /// Align two motion-signal CSVs by Correlation Optimized Warping.
    Align(AlignArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Preset name (see `--help` for the list).
    preset: String,
    /// Output dataset directory.
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CameraModeArg {
    /// Ignore homographies; treat the camera as fixed.
    Static,
    /// Track every frame against the first.
    Reference,
    /// Track consecutive pairs and chain.
    Consecutive,
    /// Require homographies.json in the dataset.
    File,
}

#[derive(Args)]
struct DecomposeArgs {
    dataset: PathBuf,
    /// Output directory for checkpoint, metrics, and config echo.
    #[arg(long)]
    out: PathBuf,
    /// Training configuration JSON; missing fields take the desk defaults
    /// and a missing resolution follows the dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_interval: Option<usize>,
    /// How camera motion is obtained; default: homographies.json when
    /// present, otherwise static.
    #[arg(long, value_enum)]
    camera_mode: Option<CameraModeArg>,
    /// Continue from this output directory's checkpoint.
    #[arg(long)]
    resume: bool,
    /// Run the refiner stage after (or on top of) the base checkpoint.
    #[arg(long)]
    refine: bool,
    /// Progress lines on stderr.
    #[arg(long)]
    progress: bool,
}

#[derive(Args)]
struct RenderArgs {
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-layer RGBA sequences (background first).
    #[arg(long)]
    dump_layers: bool,
    /// Render through the refiner (checkpoint must contain one).
    #[arg(long)]
    refined: bool,
    /// Skip detail transfer and composite the raw layers.
    #[arg(long)]
    raw: bool,
    #[arg(long, value_enum)]
    camera_mode: Option<CameraModeArg>,
}

#[derive(Args)]
struct RetimeArgs {
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Edit script JSON.
    #[arg(long)]
    edit: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    refined: bool,
    /// Skip detail transfer and retime the raw layers.
    #[arg(long)]
    raw: bool,
    #[arg(long, value_enum)]
    camera_mode: Option<CameraModeArg>,
}

#[derive(Args)]
struct EvalArgs {
    /// Prediction directory (a render/retime output, or a dataset).
    pred: PathBuf,
    /// Ground-truth directory (usually a dataset).
    gt: PathBuf,
    /// Report path; defaults to `eval_report.json` inside `pred`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    /// Reference signal CSV (one value per line; optional header).
    reference: PathBuf,
    /// Target signal CSV to be warped onto the reference.
    target: PathBuf,
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    slack: Option<usize>,
    /// Warp JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<CoreError>() {
                Some(CoreError::Diverged { .. }) | Some(CoreError::TrackingFailed { .. }) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Decompose(a) => cmd_decompose(a),
        Cmd::Render(a) => cmd_render(a),
        Cmd::Retime(a) => cmd_retime(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Align(a) => cmd_align(a),
    }
}

fn write_run_echo(dir: &Path, value: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "inf".into()
    }
}

// ---------------------------------------------------------------------------
// synth

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let Some(spec) = preset(&a.preset, a.seed) else {
        bail!(
            "unknown preset {:?}; available presets: {}",
            a.preset,
            PRESETS.join(", ")
        );
    };
    let scene = generate_scene(&spec)?;
    export_dataset(&scene, &a.out)?;
    write_run_echo(
        &a.out,
        json!({ "command": "synth", "preset": a.preset, "seed": a.seed }),
    )?;
    println!(
        "wrote {} ({} frames, {} layers, {}x{})",
        a.out.display(),
        scene.dataset.n_frames(),
        scene.dataset.n_layers(),
        spec.width,
        spec.height
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// camera-mode plumbing shared by decompose/render/retime

fn apply_camera_mode(
    ds: &mut Dataset,
    mode: Option<CameraModeArg>,
    echo_dir: Option<&Path>,
) -> Result<()> {
    match mode {
        None => {}
        Some(CameraModeArg::Static) => ds.homographies = None,
        Some(CameraModeArg::File) => {
            if ds.homographies.is_none() {
                bail!("--camera-mode file needs homographies.json in the dataset");
            }
        }
        Some(m @ (CameraModeArg::Reference | CameraModeArg::Consecutive)) => {
            let mode = if m == CameraModeArg::Reference {
                CameraMode::Reference
            } else {
                CameraMode::Consecutive
            };
            let homos = track_camera(&ds.clip, mode)?;
            let rows: Vec<[[f64; 3]; 3]> = homos.iter().map(Homography::rows).collect();
            if let Some(dir) = echo_dir {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("homographies.json"), serde_json::to_string(&rows)?)?;
            }
            ds.homographies = Some(rows);
        }
    }
    Ok(())
}

fn camera_mode_name(mode: Option<CameraModeArg>) -> &'static str {
    match mode {
        None => "auto",
        Some(CameraModeArg::Static) => "static",
        Some(CameraModeArg::Reference) => "reference",
        Some(CameraModeArg::Consecutive) => "consecutive",
        Some(CameraModeArg::File) => "file",
    }
}

// ---------------------------------------------------------------------------
// decompose

fn load_train_config(a: &DecomposeArgs, ds: &Dataset) -> Result<TrainConfig> {
    let (mut cfg, explicit_resolution) = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).context("config is not valid JSON")?;
            let explicit = value.get("resolution").is_some();
            let cfg: TrainConfig =
                serde_json::from_value(value).context("config does not match the schema")?;
            (cfg, explicit)
        }
        None => (TrainConfig::default(), false),
    };
    if !explicit_resolution {
        cfg.resolution = ds.resolution();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(i) = a.eval_interval {
        cfg.eval_interval = i;
    }
    Ok(cfg)
}

fn load_valid_dataset(dir: &Path) -> Result<Dataset> {
    let ds = load_dataset(dir)?;
    let findings = validate_dataset(&ds);
    if !findings.is_empty() {
        for f in &findings {
            eprintln!("dataset: {f}");
        }
        bail!("dataset {} failed validation ({} findings)", dir.display(), findings.len());
    }
    Ok(ds)
}

fn cmd_decompose(a: DecomposeArgs) -> Result<()> {
    let mut ds = load_valid_dataset(&a.dataset)?;
    apply_camera_mode(&mut ds, a.camera_mode, Some(&a.out))?;
    let cfg = load_train_config(&a, &ds)?;
    write_run_echo(
        &a.out,
        json!({
            "command": "decompose",
            "dataset": a.dataset,
            "camera_mode": camera_mode_name(a.camera_mode),
            "resume": a.resume,
            "refine": a.refine,
            "config": cfg,
        }),
    )?;

    let regions = load_regions(&a.dataset).ok();
    let ckpt_path = a.out.join("checkpoint.lnr");
    if !(a.refine && !a.resume && ckpt_path.exists()) {
        let session = TrainSession {
            out_dir: &a.out,
            regions: regions.as_ref(),
            resume: a.resume,
            progress: a.progress,
        };
        let ckpt = train(&ds, &cfg, &session)?;
        println!(
            "trained {} epochs (bootstrap epoch {}): {}",
            ckpt.state.epoch,
            ckpt.state.e_b.map_or("none".into(), |e| e.to_string()),
            ckpt_path.display()
        );
    }
    if a.refine {
        let ckpt = train_refiner(&ds, &ckpt_path, &cfg, &a.out)?;
        println!("refined {} epochs: {}", cfg.refiner_epochs, ckpt_path.display());
        drop(ckpt);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// render / retime shared plumbing

struct LoadedModel {
    model: Model,
    bg_uvs: Vec<UvMap>,
}

fn load_model_for(ds: &Dataset, checkpoint: &Path) -> Result<LoadedModel> {
    let ckpt = load_checkpoint(checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let (bg_uvs, _) = background_geometry(ds)?;
    Ok(LoadedModel { model: ckpt.model, bg_uvs })
}

/// Learned per-frame decompositions, detail-transferred unless `raw`.
fn learned_layer_sets(
    lm: &LoadedModel,
    ds: &Dataset,
    refined: bool,
    raw: bool,
) -> Result<Vec<LayerSet>> {
    let mut sets = Vec::with_capacity(ds.n_frames());
    for t in 0..ds.n_frames() {
        let set = if refined {
            render_frame_refined(&lm.model, ds, &lm.bg_uvs, t)?
        } else {
            render_frame_eval(&lm.model, ds, &lm.bg_uvs, t)?
        };
        let set = if raw {
            set
        } else {
            detail_transfer(&set, ds.order.frame(t), ds.clip.frame(t))?
        };
        sets.push(set);
    }
    Ok(sets)
}

fn write_frames(dir: &Path, frames: &[Array3<f32>]) -> Result<()> {
    let fdir = dir.join("frames");
    fs::create_dir_all(&fdir)?;
    for (t0, f) in frames.iter().enumerate() {
        write_rgb_png(&fdir.join(frame_name(t0 + 1)), f)?;
    }
    Ok(())
}

fn write_layer_dumps(dir: &Path, sets: &[LayerSet]) -> Result<()> {
    let n = sets[0].n_layers();
    let (h, w) = sets[0].resolution();
    let opaque = Array2::from_elem((h, w), 1.0f32);
    for i in 0..=n {
        fs::create_dir_all(dir.join("layers").join(layer_dir(i)))?;
    }
    for (t0, set) in sets.iter().enumerate() {
        let name = frame_name(t0 + 1);
        write_rgba_png(
            &dir.join("layers").join(layer_dir(0)).join(&name),
            &set.background,
            &opaque,
        )?;
        for (i, layer) in set.layers.iter().enumerate() {
            write_rgba_png(
                &dir.join("layers").join(layer_dir(i + 1)).join(&name),
                &layer.color,
                &layer.alpha,
            )?;
        }
    }
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let mut ds = load_valid_dataset(&a.dataset)?;
    apply_camera_mode(&mut ds, a.camera_mode, Some(&a.out))?;
    let lm = load_model_for(&ds, &a.checkpoint)?;
    let sets = learned_layer_sets(&lm, &ds, a.refined, a.raw)?;

    let mut frames = Vec::with_capacity(sets.len());
    for (t, set) in sets.iter().enumerate() {
        let (mut rgb, _) = over_composite(set, ds.order.frame(t))?;
        rgb.mapv_inplace(|v| v.clamp(0.0, 1.0));
        frames.push(rgb);
    }
    write_frames(&a.out, &frames)?;
    if a.dump_layers {
        write_layer_dumps(&a.out, &sets)?;
    }
    let psnr = psnr_frames(&frames, ds.clip.frames());
    write_run_echo(
        &a.out,
        json!({
            "command": "render",
            "dataset": a.dataset,
            "checkpoint": a.checkpoint,
            "refined": a.refined,
            "raw": a.raw,
            "dump_layers": a.dump_layers,
            "reconstruction_psnr": Db(psnr),
        }),
    )?;
    println!("reconstruction PSNR: {} dB", fmt_db(psnr));
    Ok(())
}

fn cmd_retime(a: RetimeArgs) -> Result<()> {
    let mut ds = load_valid_dataset(&a.dataset)?;
    apply_camera_mode(&mut ds, a.camera_mode, Some(&a.out))?;
    let script = EditScript::from_json(
        &fs::read_to_string(&a.edit)
            .with_context(|| format!("cannot read edit script {}", a.edit.display()))?,
    )
    .context("edit script does not match the schema")?;
    let lm = load_model_for(&ds, &a.checkpoint)?;
    let sets = learned_layer_sets(&lm, &ds, a.refined, a.raw)?;
    let result = apply_edit(&sets, &ds.order, &script)?;

    let moving = match &ds.homographies {
        Some(rows) => {
            let homos: Vec<Homography> = rows
                .iter()
                .map(|r| Homography::from_rows(*r))
                .collect::<Result<_, _>>()?;
            (!is_static(&homos, 1e-9)).then_some(homos)
        }
        None => None,
    };
    let frames: Vec<Array3<f32>> = match moving {
        None => result.clip.frames().to_vec(),
        // A moving camera: every layer pulled from another frame is
        // re-registered into the output frame before compositing.
        Some(homos) => {
            let mut out = Vec::with_capacity(result.layers.len());
            for (t0, set) in result.layers.iter().enumerate() {
                let mut warped = set.clone();
                for (j, layer) in set.layers.iter().enumerate() {
                    let src = result.sources[t0][j];
                    if src != t0 + 1 {
                        warped.layers[j] = retime_transform(layer, src, t0 + 1, &homos)?;
                    }
                }
                let (mut rgb, _) = over_composite(&warped, result.order.frame(t0))?;
                rgb.mapv_inplace(|v| v.clamp(0.0, 1.0));
                out.push(rgb);
            }
            out
        }
    };
    write_frames(&a.out, &frames)?;
    write_run_echo(
        &a.out,
        json!({
            "command": "retime",
            "dataset": a.dataset,
            "checkpoint": a.checkpoint,
            "refined": a.refined,
            "raw": a.raw,
            "edit": script,
        }),
    )?;
    println!("retimed {} frames into {}", frames.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn read_frame_dir(dir: &Path) -> Result<Vec<Array3<f32>>> {
    let fdir = dir.join("frames");
    if !fdir.is_dir() {
        bail!("{} has no frames/ directory", dir.display());
    }
    let mut names: Vec<String> = fs::read_dir(&fdir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("{} has no frames", fdir.display());
    }
    names
        .iter()
        .map(|n| Ok(read_rgb_png(&fdir.join(n))?))
        .collect()
}

/// Per-layer alpha sequences from `layers/` (render dumps) or `gt_layers/`
/// (datasets), skipping the background layer.
fn read_layer_alphas(dir: &Path) -> Result<Option<Vec<Vec<Array2<f32>>>>> {
    let root = ["layers", "gt_layers"]
        .iter()
        .map(|d| dir.join(d))
        .find(|p| p.is_dir());
    let Some(root) = root else {
        return Ok(None);
    };
    let mut layers = Vec::new();
    for i in 1.. {
        let ldir = root.join(layer_dir(i));
        if !ldir.is_dir() {
            break;
        }
        let mut alphas = Vec::new();
        for t in 1.. {
            let path = ldir.join(frame_name(t));
            if !path.exists() {
                break;
            }
            let (_, alpha) = read_rgba_png(&path)?;
            alphas.push(alpha);
        }
        layers.push(alphas);
    }
    Ok((!layers.is_empty()).then_some(layers))
}

fn region_curves_from_metrics(dir: &Path) -> Result<Vec<RegionCurve>> {
    let path = dir.join("metrics.csv");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let metrics = read_metrics(&path)?;
    Ok(metrics
        .region_names
        .iter()
        .enumerate()
        .map(|(i, name)| RegionCurve {
            name: name.clone(),
            values: metrics
                .rows
                .iter()
                .filter_map(|r| r.regions[i].map(Db))
                .collect(),
        })
        .collect())
}

fn pred_is_retime(dir: &Path) -> bool {
    fs::read_to_string(dir.join("run.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v.get("command").and_then(|c| c.as_str()).map(|c| c == "retime"))
        .unwrap_or(false)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let pred = read_frame_dir(&a.pred)?;
    let gt = read_frame_dir(&a.gt)?;
    if pred.len() != gt.len() {
        bail!("frame count mismatch: {} predicted vs {} ground truth", pred.len(), gt.len());
    }
    let recon = psnr_frames(&pred, &gt);

    let mut layer_iou = Vec::new();
    if let (Some(pl), Some(gl)) = (read_layer_alphas(&a.pred)?, read_layer_alphas(&a.gt)?) {
        if pl.len() != gl.len() {
            bail!("layer count mismatch: {} predicted vs {} ground truth", pl.len(), gl.len());
        }
        for (p, g) in pl.iter().zip(gl.iter()) {
            layer_iou.push(alpha_iou_frames(p, g));
        }
    }

    let report = EvalReport {
        layer_iou,
        recon_psnr: Db(recon),
        region_curves: region_curves_from_metrics(&a.pred)?,
        retimed_psnr: pred_is_retime(&a.pred).then_some(Db(recon)),
    };

    println!("reconstruction PSNR: {} dB", fmt_db(recon));
    for (i, iou) in report.layer_iou.iter().enumerate() {
        println!("layer {:02} alpha IoU: {:.4}", i + 1, iou);
    }
    for curve in &report.region_curves {
        let last = curve.values.last().map_or("-".into(), |v| fmt_db(v.0));
        println!("region {}: {} points, last {} dB", curve.name, curve.values.len(), last);
    }
    if let Some(r) = &report.retimed_psnr {
        println!("retimed PSNR: {} dB", fmt_db(r.0));
    }

    let out = a.out.unwrap_or_else(|| a.pred.join("eval_report.json"));
    fs::write(&out, report.to_json()?)?;
    println!("report: {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// align

/// One value per line; a `,`-separated line contributes its last field, and
/// a single leading non-numeric line is treated as a header.
fn read_signal_csv(path: &Path) -> Result<MotionSignal> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read signal {}", path.display()))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cell = line.rsplit(',').next().unwrap().trim();
        match cell.parse::<f64>() {
            Ok(v) => values.push(v),
            Err(_) if i == 0 => {}
            Err(_) => bail!("{}:{}: not a number: {cell:?}", path.display(), i + 1),
        }
    }
    if values.is_empty() {
        bail!("{} holds no samples", path.display());
    }
    Ok(MotionSignal { values })
}

fn cmd_align(a: AlignArgs) -> Result<()> {
    let reference = read_signal_csv(&a.reference)?;
    let target = read_signal_csv(&a.target)?;
    let defaults = CowParams::default_for(reference.len());
    let params = CowParams {
        segments: a.segments.unwrap_or(defaults.segments),
        slack: a.slack.unwrap_or(defaults.slack),
    };
    let warp = align_signals(&reference, &target, params)?;
    let out_json = serde_json::to_string_pretty(&json!({
        "map": warp.map(),
        "k_source": warp.k_source(),
        "segments": params.segments,
        "slack": params.slack,
    }))?;
    match &a.out {
        Some(path) => {
            fs::write(path, out_json)?;
            println!("aligned {} frames onto {}: {}", warp.len(), reference.len(), path.display());
        }
        None => println!("{out_json}"),
    }
    Ok(())
}
