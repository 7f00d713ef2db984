use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{Matrix4, Vector3};
use serde::Deserialize;

use mtgs::camera::{CameraFrame, Intrinsics};
use mtgs::io::formats::{write_atomic, write_depth, write_depth_png16, write_pfm, write_png_rgb};
use mtgs::io::synth::{synth_scene, write_synth, SynthConfig};
use mtgs::io::{load_checkpoint, load_scene};
use mtgs::raster::{render, RasterConfig};
use mtgs::scene::ViewRequest;
use mtgs::train::eval::{appearance_for, evaluate_traversals, EvalOptions};
use mtgs::train::{TrainConfig, Trainer};
use mtgs::Error;

/// Multi-traversal Gaussian splatting.
#[derive(Parser)]
#[command(name = "mtgs", version, about)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "MTGS_WORKERS")]
    workers: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-traversal street scene.
    Synth(SynthArgs),
    /// Initialize from LiDAR and train.
    Train(TrainArgs),
    /// Render frames from a checkpoint.
    Render(RenderArgs),
    /// Score held-out traversals.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Training traversals (1 to 3).
    #[arg(long, default_value_t = 3)]
    traversals: usize,
    #[arg(long, default_value_t = 25)]
    frames: usize,
    #[arg(long, default_value_t = 160)]
    width: usize,
    #[arg(long, default_value_t = 120)]
    height: usize,
    /// Skip the held-out lane.
    #[arg(long)]
    no_held_out: bool,
    /// Same lighting and color for every traversal.
    #[arg(long)]
    no_appearance_shift: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene manifest.
    #[arg(long)]
    scene: PathBuf,
    /// Run directory (log, checkpoints, resolved config).
    #[arg(long)]
    out: PathBuf,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, `dotted.key=value` (TOML value syntax); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Scale warmups and density control to the step count.
    #[arg(long)]
    scale_schedule: bool,
    /// Training traversal ids (comma-separated); default all non-held-out.
    #[arg(long, value_delimiter = ',')]
    traversals: Vec<u32>,
    /// Baseline: one shared appearance node and no transient nodes.
    #[arg(long)]
    single_traversal: bool,
    /// Treat boxed objects as background.
    #[arg(long)]
    no_transient: bool,
    /// One shared appearance node (transients kept).
    #[arg(long)]
    no_appearance: bool,
    #[arg(long)]
    no_normal_loss: bool,
    /// Disables both the LiDAR depth and the depth NCC terms.
    #[arg(long)]
    no_depth_loss: bool,
    /// Align image exposure to LiDAR colors before training.
    #[arg(long)]
    exposure_align: bool,
    /// Continue from a checkpoint of an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene manifest providing the cameras.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Free trajectory JSON instead of manifest frames.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Only frames of these traversals (comma-separated).
    #[arg(long, value_delimiter = ',')]
    traversals: Vec<u32>,
    /// Force this appearance node.
    #[arg(long)]
    traversal: Option<u32>,
    /// Shift every camera this many meters to its right.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    lateral_offset: f64,
    /// Include the transients of the rendered traversal.
    #[arg(long)]
    with_transients: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Traversals to score; default the held-out ones.
    #[arg(long, value_delimiter = ',')]
    traversals: Vec<u32>,
    /// Force this appearance node.
    #[arg(long)]
    traversal: Option<u32>,
    /// Ignore transient masks.
    #[arg(long)]
    no_masks: bool,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
}

/// Failure with its exit code: 1 for user errors, 2 for internal ones.
struct Failure(u8, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Contract(_) | Error::NonFinite(_) => 2,
            _ => 1,
        };
        Failure(code, e.to_string())
    }
}

fn user(msg: impl Into<String>) -> Failure {
    Failure(1, msg.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let r = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Render(a) => cmd_render(a),
        Cmd::Eval(a) => cmd_eval(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        seed: a.seed,
        width: a.width,
        height: a.height,
        traversals: a.traversals,
        held_out: !a.no_held_out,
        frames_per_traversal: a.frames,
        appearance_shifts: !a.no_appearance_shift,
        ..SynthConfig::default()
    };
    let scene = synth_scene(&cfg)?;
    let manifest = write_synth(&a.out, &scene)?;
    println!("{}", manifest.display());
    Ok(())
}

/// Sets `dotted.key` in a TOML table, creating intermediate tables.
fn apply_override(root: &mut toml::Table, arg: &str) -> Result<(), Failure> {
    let (key, raw) = arg.split_once('=').ok_or_else(|| user(format!("override `{arg}` is not KEY=VALUE")))?;
    let value: toml::Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .map(|mut t| t.remove("v").expect("parsed key"))
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| user(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut table: toml::Table = match &a.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| user(format!("{}: {e}", p.display())))?
            .parse()
            .map_err(|e| user(format!("{}: {e}", p.display())))?,
        None => toml::Table::new(),
    };
    for o in &a.overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg = TrainConfig::from_toml(&table.to_string())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg = if a.scale_schedule { cfg.scaled_to(n) } else { TrainConfig { steps: n, ..cfg } };
    }
    if !a.traversals.is_empty() {
        cfg.traversals = a.traversals.clone();
    }
    cfg.single_traversal |= a.single_traversal;
    cfg.no_transient |= a.no_transient;
    cfg.no_appearance |= a.no_appearance;
    cfg.exposure_align |= a.exposure_align;
    if a.no_normal_loss {
        cfg.weights.normal = 0.0;
    }
    if a.no_depth_loss {
        cfg.weights.depth = 0.0;
        cfg.weights.ncc = 0.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let data = load_scene(&a.scene)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let t = Trainer::resume(&data, load_checkpoint(p)?)?;
            if a.config.is_some() || !a.overrides.is_empty() {
                log::warn!("resuming uses the checkpoint's config; --config and --set are ignored");
            }
            t
        }
        None => Trainer::new(&data, train_config(&a)?)?,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| user(format!("{}: {e}", a.out.display())))?;
    write_atomic(&a.out.join("config.toml"), trainer.config.to_toml()?.as_bytes())?;
    trainer.run(Some(&a.out))?;
    let last = trainer.history.last().map_or(f64::NAN, |l| l.loss.total);
    println!("{} (step {}, loss {last})", a.out.join("final.ckpt").display(), trainer.step);
    Ok(())
}

#[derive(Deserialize)]
struct Trajectory {
    width: usize,
    height: usize,
    /// `[fx, fy, cx, cy]`.
    intrinsics: [f64; 4],
    poses: Vec<TrajectoryPose>,
}

#[derive(Deserialize)]
struct TrajectoryPose {
    timestamp: f64,
    /// Row-major world-to-camera.
    world_to_camera: [[f64; 4]; 4],
}

/// Cameras to render plus the traversal each came from (if any).
fn render_cameras(a: &RenderArgs) -> Result<Vec<(CameraFrame<f64>, Option<u32>)>, Failure> {
    if let Some(p) = &a.trajectory {
        let text = std::fs::read_to_string(p).map_err(|e| user(format!("{}: {e}", p.display())))?;
        let t: Trajectory = serde_json::from_str(&text).map_err(|e| user(format!("{}: {e}", p.display())))?;
        let [fx, fy, cx, cy] = t.intrinsics;
        return Ok(t
            .poses
            .iter()
            .enumerate()
            .map(|(i, pose)| {
                let m = Matrix4::from_fn(|r, c| pose.world_to_camera[r][c]);
                (CameraFrame::new(i, u32::MAX, pose.timestamp, t.width, t.height, Intrinsics { fx, fy, cx, cy }, m), None)
            })
            .collect());
    }
    let scene = a.scene.as_ref().ok_or_else(|| user("render needs --scene or --trajectory"))?;
    let data = load_scene(scene)?;
    Ok(data
        .traversals
        .iter()
        .filter(|t| a.traversals.is_empty() || a.traversals.contains(&t.id))
        .flat_map(|t| t.frames.iter().map(move |f| (f.camera.clone(), Some(t.id))))
        .collect())
}

/// Moves the camera center along its own x axis.
fn shift_right(cam: &mut CameraFrame<f64>, meters: f64) {
    if meters != 0.0 {
        let mut t = cam.world_to_camera.fixed_view_mut::<3, 1>(0, 3);
        t -= Vector3::new(meters, 0.0, 0.0);
    }
}

fn cmd_render(a: RenderArgs) -> Result<(), Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let graph = ck.graph;
    let cams = render_cameras(&a)?;
    let raster = RasterConfig::default();
    let queries: Vec<[f64; 3]> = cams.iter().map(|(c, _)| c.base_extrinsic().center().into()).collect();
    let fallback = match a.traversal {
        Some(t) if !graph.appearance.contains_key(&t) => return Err(Error::MissingAppearance(t).into()),
        Some(t) => t,
        None => graph.select_appearance(&queries)?,
    };
    for (mut cam, trav) in cams {
        shift_right(&mut cam, a.lateral_offset);
        let app = match (a.traversal, trav) {
            (None, Some(t)) if graph.appearance.contains_key(&t) => t,
            _ => fallback,
        };
        let transients = trav.filter(|_| a.with_transients);
        let req = ViewRequest {
            appearance: app,
            transients,
            time: cam.timestamp,
        };
        let cam32 = cam.cast::<f32>();
        let out = render(&graph, &req, &cam32, &raster)?.output;
        let (w, h) = (out.width, out.height);
        let stem = a.out.join(format!("f{:05}", cam.frame_id));
        write_png_rgb(&stem.with_extension("png"), w, h, &out.color)?;
        write_depth(&stem.with_extension("mdep"), w, h, &out.depth)?;
        write_depth_png16(&path_with_suffix(&stem, "_depth.png"), w, h, &out.depth)?;
        write_pfm(&path_with_suffix(&stem, "_normal.pfm"), w, h, &out.normal)?;
    }
    println!("{}", a.out.display());
    Ok(())
}

fn path_with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = load_scene(&a.scene)?;
    let ids = if a.traversals.is_empty() { data.held_out_ids() } else { a.traversals.clone() };
    if ids.is_empty() {
        return Err(user("no traversals to evaluate (scene has no held-out traversal; pass --traversals)"));
    }
    let opts = EvalOptions {
        appearance: a.traversal,
        use_masks: !a.no_masks,
        ..EvalOptions::default()
    };
    for &id in &ids {
        appearance_for(&ck.graph, &data, id, &opts)?;
    }
    let report = evaluate_traversals(&ck.graph, &data, &ids, &opts)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure(2, e.to_string()))?;
    write_atomic(&a.out, json.as_bytes())?;
    print!("{}", report.table());
    Ok(())
}
