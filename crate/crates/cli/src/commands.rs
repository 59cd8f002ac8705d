use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use dfkflow::metrics::{divergence_metric, resimulate_with, velocity_errors, ResimReport, ResimSummary, FrameScore};
use dfkflow::render2d::write_ppm;
use dfkflow::scenes::{generate_analytic, generate_plume_with, CloudSpec, PlumeOptions};
use dfkflow::sliding_window::{latest_checkpoint, reconstruct};
use dfkflow::{
    AnalyticField, DfkField, GaussianCloud, OrthoCamera, RunConfig, SceneBundle, TimeVaryingField, VelocityField, ViewAxis,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{self, Flat};
use crate::viz::velocity_slices;
use crate::{CliError, GenerateArgs, MetricsArgs, ReconstructArgs, RenderVelocityArgs, ResimArgs};

pub const LOCK_FILE: &str = ".dfkflow.lock";
pub const CONFIG_FILE: &str = "config.json";

/// Exclusive writer marker on an output directory, removed on drop.
pub struct OutputLock(PathBuf);

impl OutputLock {
    pub fn acquire(dir: &Path, flag: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{flag}: cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Validation(format!(
                "{flag}: {} is locked by another writer (delete {} if no run is active)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Io(format!("cannot create {}: {e}", path.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).expect("json");
    text.push('\n');
    write_text(path, &text)
}

fn load_scene(dir: &Path) -> Result<SceneBundle, CliError> {
    SceneBundle::load(dir).map_err(|e| CliError::Validation(format!("--scene: cannot load {}: {e}", dir.display())))
}

fn read_config_file(path: Option<&PathBuf>) -> Result<Option<Flat>, CliError> {
    path.map(|p| config::read_flat(p)).transpose()
}

fn push<T: Serialize>(out: &mut Vec<(&'static str, &'static str, Value)>, key: &'static str, flag: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, flag, serde_json::to_value(v).expect("json")));
    }
}

// ---------------------------------------------------------------- generate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    /// `plume`, `abc` or `taylor-green`.
    pub kind: String,
    pub seed: u64,
    pub frames: usize,
    pub gaussians: usize,
    pub nodes: usize,
    pub image_size: usize,
    pub eval_resolution: usize,
    pub max_speed: f64,
    pub frame_dt: f64,
    pub inflow: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub frequency: f64,
    /// Comma-separated view axes of analytic scenes.
    pub cameras: String,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let p = PlumeOptions::default();
        GenerateConfig {
            kind: "plume".into(),
            seed: p.seed,
            frames: p.n_frames,
            gaussians: p.n_gaussians,
            nodes: p.node_resolution,
            image_size: p.image_size,
            eval_resolution: p.eval_resolution,
            max_speed: p.max_speed,
            frame_dt: p.frame_dt,
            inflow: p.inflow_per_frame,
            a: 0.1,
            b: 0.1,
            c: 0.1,
            frequency: std::f64::consts::TAU,
            cameras: "+Z,+X".into(),
        }
    }
}

const GENERATE_FLAGS: &[(&str, &str)] = &[
    ("kind", "--kind"),
    ("frames", "--frames"),
    ("gaussians", "--gaussians"),
    ("nodes", "--nodes"),
    ("image_size", "--image-size"),
    ("eval_resolution", "--eval-resolution"),
    ("max_speed", "--max-speed"),
    ("frame_dt", "--frame-dt"),
    ("frequency", "--frequency"),
    ("cameras", "--cameras"),
    ("camera", "--cameras"),
];

pub fn generate_config(args: &GenerateArgs) -> Result<GenerateConfig, CliError> {
    let mut o = Vec::new();
    push(&mut o, "kind", "--kind", &args.kind);
    push(&mut o, "seed", "--seed", &args.seed);
    push(&mut o, "frames", "--frames", &args.frames);
    push(&mut o, "gaussians", "--gaussians", &args.gaussians);
    push(&mut o, "nodes", "--nodes", &args.nodes);
    push(&mut o, "image_size", "--image-size", &args.image_size);
    push(&mut o, "eval_resolution", "--eval-resolution", &args.eval_resolution);
    push(&mut o, "max_speed", "--max-speed", &args.max_speed);
    push(&mut o, "frame_dt", "--frame-dt", &args.frame_dt);
    push(&mut o, "inflow", "--inflow", &args.inflow);
    push(&mut o, "a", "--a", &args.a);
    push(&mut o, "b", "--b", &args.b);
    push(&mut o, "c", "--c", &args.c);
    push(&mut o, "frequency", "--frequency", &args.frequency);
    push(&mut o, "cameras", "--cameras", &args.cameras);
    config::merge(&GenerateConfig::default(), read_config_file(args.config.as_ref())?.as_ref(), &o)
}

fn parse_cameras(list: &str, size: usize) -> Result<Vec<OrthoCamera>, CliError> {
    list.split(',')
        .map(|s| {
            let axis = ViewAxis::parse(s.trim()).map_err(|e| CliError::Validation(format!("--cameras: {e}")))?;
            OrthoCamera::new(axis, size, size, [0.0, 0.0, 1.0, 1.0]).map_err(|e| CliError::Validation(format!("--image-size: {e}")))
        })
        .collect()
}

pub fn build_scene(cfg: &GenerateConfig) -> Result<SceneBundle, CliError> {
    let validation = |e: dfkflow::Error| CliError::from_core(e, GENERATE_FLAGS);
    match cfg.kind.as_str() {
        "plume" => {
            let opts = PlumeOptions {
                seed: cfg.seed,
                n_frames: cfg.frames,
                n_gaussians: cfg.gaussians,
                node_resolution: cfg.nodes,
                image_size: cfg.image_size,
                eval_resolution: cfg.eval_resolution,
                max_speed: cfg.max_speed,
                frame_dt: cfg.frame_dt,
                inflow_per_frame: cfg.inflow,
                ..PlumeOptions::default()
            };
            opts.validate().map_err(validation)?;
            generate_plume_with(&opts).map_err(validation)
        }
        "abc" | "taylor-green" => {
            let field = if cfg.kind == "abc" {
                AnalyticField::abc(cfg.a, cfg.b, cfg.c, cfg.frequency)
            } else {
                AnalyticField::taylor_green(cfg.a, cfg.frequency)
            };
            let cloud = CloudSpec { center: [0.5; 3], spread: 0.12, ..CloudSpec::plume(cfg.gaussians) };
            let cameras = parse_cameras(&cfg.cameras, cfg.image_size)?;
            generate_analytic(field, &cloud, cameras, cfg.frames, cfg.seed).map_err(validation)
        }
        other => Err(CliError::Validation(format!("--kind: expected plume, abc or taylor-green, got {other:?}"))),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    let cfg = generate_config(args)?;
    let bundle = build_scene(&cfg)?;
    let _lock = OutputLock::acquire(&args.out, "--out")?;
    bundle.save(&args.out).map_err(CliError::from)?;
    config::write_flat(&args.out.join(CONFIG_FILE), &cfg)
}

// ---------------------------------------------------------------- reconstruct

const RECONSTRUCT_FLAGS: &[(&str, &str)] = &[
    ("window_size", "--window-size"),
    ("lambda_ssim", "--lambda-ssim"),
    ("gamma", "--gamma"),
    ("lambda_aniso", "--lambda-aniso"),
    ("lambda_reg", "--lambda-reg"),
    ("lambda_vor", "--lambda-vor"),
    ("substeps", "--substeps"),
    ("resolution", "--nodes"),
    ("overlap", "--overlap"),
    ("warmup", "--warmup-iterations"),
    ("sliding", "--sliding-iterations"),
    ("frame0", "--frame0-iterations"),
    ("lr_weights", "--lr-weights-start"),
    ("lr_attributes", "--lr-attributes"),
    ("lr_positions", "--lr-positions"),
    ("velocity_scale", "--velocity-scale"),
    ("collocation", "--collocation-samples"),
    ("fd_step", "--fd-step-fraction"),
    ("gaussians", "--gaussians"),
];

pub fn reconstruct_config(args: &ReconstructArgs) -> Result<RunConfig, CliError> {
    let mut o = Vec::new();
    if let Some(dir) = &args.resume {
        if let Some(out) = &args.out {
            if out != dir {
                return Err(CliError::Validation(format!("--resume: {} differs from --out {}", dir.display(), out.display())));
            }
        }
        o.push(("out", "--resume", json!(dir)));
    }
    push(&mut o, "scene", "--scene", &args.scene);
    push(&mut o, "out", "--out", &args.out);
    push(&mut o, "window_size", "--window-size", &args.window_size);
    push(&mut o, "loss.gamma", "--gamma", &args.gamma);
    push(&mut o, "loss.lambda_ssim", "--lambda-ssim", &args.lambda_ssim);
    push(&mut o, "loss.lambda_aniso", "--lambda-aniso", &args.lambda_aniso);
    push(&mut o, "loss.lambda_reg", "--lambda-reg", &args.lambda_reg);
    push(&mut o, "loss.lambda_vor", "--lambda-vor", &args.lambda_vor);
    push(&mut o, "advection.substeps_per_frame", "--substeps", &args.substeps);
    push(&mut o, "advection.scheme", "--scheme", &args.scheme);
    push(&mut o, "lattice.resolution", "--nodes", &args.nodes.map(|n| [n; 3]));
    push(&mut o, "lattice.overlap", "--overlap", &args.overlap);
    push(&mut o, "warmup_iterations", "--warmup-iterations", &args.warmup_iterations);
    push(&mut o, "sliding_iterations", "--sliding-iterations", &args.sliding_iterations);
    push(&mut o, "frame0_iterations", "--frame0-iterations", &args.frame0_iterations);
    push(&mut o, "lr_weights_start", "--lr-weights-start", &args.lr_weights_start);
    push(&mut o, "lr_weights_end", "--lr-weights-end", &args.lr_weights_end);
    push(&mut o, "lr_attributes", "--lr-attributes", &args.lr_attributes);
    push(&mut o, "lr_positions", "--lr-positions", &args.lr_positions);
    push(&mut o, "velocity_scale", "--velocity-scale", &args.velocity_scale);
    push(&mut o, "collocation_samples", "--collocation-samples", &args.collocation_samples);
    push(&mut o, "fd_step_fraction", "--fd-step-fraction", &args.fd_step_fraction);
    push(&mut o, "gaussians", "--gaussians", &args.gaussians);
    push(&mut o, "seed", "--seed", &args.seed);

    // A resumed run starts from its own echoed config.
    let mut file = match &args.resume {
        Some(dir) => Some(config::read_flat(&dir.join(CONFIG_FILE)).map_err(|e| CliError::Validation(format!("--resume: {e}")))?),
        None => None,
    };
    if let Some(extra) = read_config_file(args.config.as_ref())? {
        file.get_or_insert_with(Flat::new).extend(extra);
    }
    let cfg: RunConfig = config::merge(&RunConfig::default(), file.as_ref(), &o)?;
    if cfg.scene.as_os_str().is_empty() {
        return Err(CliError::Validation("--scene is required".into()));
    }
    if cfg.out.as_os_str().is_empty() {
        return Err(CliError::Validation("--out is required".into()));
    }
    cfg.validate().map_err(|e| CliError::from_core(e, RECONSTRUCT_FLAGS))?;
    Ok(cfg)
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<(), CliError> {
    let cfg = reconstruct_config(args)?;
    let resume = args.resume.is_some();
    let bundle = load_scene(&cfg.scene)?;
    let problem = bundle.problem();
    let out = cfg.out.clone();
    let _lock = OutputLock::acquire(&out, "--out")?;
    let checkpoints = out.join("checkpoints");
    if !resume && latest_checkpoint(&checkpoints).is_some() {
        return Err(CliError::Validation(format!("--out: {} already holds a run; pass --resume to continue it", out.display())));
    }
    config::write_flat(&out.join(CONFIG_FILE), &cfg)?;
    let rec = reconstruct(&problem, &cfg, Some(&checkpoints), resume).map_err(CliError::from)?;

    rec.field.save_dir(&out.join("field")).map_err(CliError::from)?;
    rec.cloud0.save(&out.join("cloud0.gcl")).map_err(CliError::from)?;
    rec.final_anchor.save(&out.join("final_anchor.gcl")).map_err(CliError::from)?;
    write_text(&out.join("log.csv"), &dfkflow::sliding_window::log_csv(&rec.log))?;
    let final_objective = rec.log.last().map(|r| r.objective);
    write_json(
        &out.join("summary.json"),
        &json!({
            "window_size": rec.window_size,
            "frames": problem.observations.frame_count(),
            "windows": latest_checkpoint(&checkpoints).map(|i| i + 1).unwrap_or(0),
            "resumed_windows": rec.resumed_windows,
            "iterations": rec.log.len(),
            "final_objective": final_objective,
            "discounts": cfg.loss.discounts(rec.window_size),
            "slides": rec.slides,
        }),
    )
}

// ---------------------------------------------------------------- resim

#[derive(Clone, Debug, Serialize)]
struct ResimEcho<'a> {
    scene: &'a Path,
    source: String,
    peak: Option<f64>,
    frames: bool,
    pgm: bool,
}

/// Frame-0 cloud and per-frame fields a re-simulation advects with.
enum Source {
    Gt,
    Field(TimeVaryingField, GaussianCloud),
}

fn load_run(dir: &Path) -> Result<(TimeVaryingField, GaussianCloud), CliError> {
    let field = TimeVaryingField::load_dir(&dir.join("field")).map_err(|e| CliError::Validation(format!("--run: {e}")))?;
    let cloud = GaussianCloud::load(&dir.join("cloud0.gcl")).map_err(|e| CliError::Validation(format!("--run: {e}")))?;
    Ok((field, cloud))
}

fn run_advection(dir: Option<&Path>, bundle: &SceneBundle) -> dfkflow::AdvectionConfig {
    dir.and_then(|d| config::read_flat(&d.join(CONFIG_FILE)).ok())
        .and_then(|flat| config::merge(&RunConfig::default(), Some(&flat), &[]).ok())
        .map(|c| c.advection)
        .unwrap_or(bundle.manifest.advection)
}

pub fn resim_report(bundle: &SceneBundle, args: &ResimArgs) -> Result<ResimReport, CliError> {
    let source = match (&args.run, args.gt) {
        (Some(dir), false) => {
            let (f, c) = load_run(dir)?;
            Source::Field(f, c)
        }
        (None, true) => Source::Gt,
        _ => return Err(CliError::Validation("--run: pass exactly one of --run or --gt".into())),
    };
    let inflow = bundle.inflow();
    let (frames, cloud0, dt, adv): (Vec<&dyn VelocityField>, &GaussianCloud, f64, _) = match &source {
        Source::Gt => (bundle.gt_field.frames(), &bundle.gt_cloud_t0, bundle.frame_dt(), bundle.manifest.advection),
        Source::Field(f, c) => (
            f.frames.iter().map(|x| x as &dyn VelocityField).collect(),
            c,
            f.frame_dt,
            run_advection(args.run.as_deref(), bundle),
        ),
    };
    resimulate_with(cloud0, &frames, dt, &bundle.observations, &adv, inflow, args.peak).map_err(CliError::from)
}

pub fn cmd_resim(args: &ResimArgs) -> Result<(), CliError> {
    let bundle = load_scene(&args.scene)?;
    let report = resim_report(&bundle, args)?;
    let _lock = OutputLock::acquire(&args.out, "--out")?;
    let source = match &args.run {
        Some(d) => d.display().to_string(),
        None => "gt".to_string(),
    };
    let echo = ResimEcho { scene: &args.scene, source, peak: args.peak, frames: args.frames, pgm: args.pgm };
    config::write_flat(&args.out.join(CONFIG_FILE), &echo)?;
    write_text(&args.out.join("resim.csv"), &report.to_csv())?;
    write_json(&args.out.join("resim.json"), &resim_json(&report.summary, &report.rows))?;
    if args.frames || args.pgm {
        let dir = args.out.join("frames");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        for (f, row) in report.renders.iter().enumerate() {
            for (c, img) in row.iter().enumerate() {
                let stem = dir.join(format!("frame_{f:03}_cam{c}"));
                if args.frames {
                    img.write_pfm(&stem.with_extension("pfm")).map_err(CliError::from)?;
                }
                if args.pgm {
                    img.write_pgm(&stem.with_extension("pgm"), report.summary.peak).map_err(CliError::from)?;
                }
            }
        }
    }
    Ok(())
}

fn resim_json(summary: &ResimSummary, rows: &[FrameScore]) -> Value {
    let n_frames = summary.frames;
    let per_frame: Vec<Value> = (0..n_frames)
        .map(|f| {
            let r: Vec<&FrameScore> = rows.iter().filter(|r| r.frame == f).collect();
            let m = r.len() as f64;
            json!({
                "frame": f,
                "psnr": r.iter().map(|r| r.psnr).sum::<f64>() / m,
                "ssim": r.iter().map(|r| r.ssim).sum::<f64>() / m,
            })
        })
        .collect();
    json!({ "summary": summary, "per_frame": per_frame })
}

// ---------------------------------------------------------------- metrics

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FrameMetrics {
    pub frame: usize,
    pub div: f64,
    pub div_normalized: f64,
    pub mse_v: f64,
    pub cos_v: f64,
    pub mask_cells: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub source: String,
    pub div: f64,
    /// `div` divided by mean speed over domain size.
    pub div_normalized: f64,
    pub mse_v: f64,
    pub cos_v: f64,
    /// Mean squared GT speed over the masked cells.
    pub mean_gt_speed_sq: f64,
    pub grid_resolution: [usize; 3],
    pub fd_step: f64,
    pub frames: Vec<FrameMetrics>,
}

struct Zero;

impl VelocityField for Zero {
    fn velocity(&self, _: &dfkflow::Vec3) -> dfkflow::Vec3 {
        dfkflow::Vec3::zeros()
    }
    fn jacobian(&self, _: &dfkflow::Vec3) -> dfkflow::Mat3 {
        dfkflow::Mat3::zeros()
    }
}

pub fn metrics_report(bundle: &SceneBundle, args: &MetricsArgs) -> Result<MetricsReport, CliError> {
    let chosen = [args.run.is_some(), args.field.is_some(), args.gt, args.zero].iter().filter(|b| **b).count();
    if chosen != 1 {
        return Err(CliError::Validation("--run: pass exactly one of --run, --field, --gt or --zero".into()));
    }
    let loaded = match (&args.run, &args.field) {
        (Some(dir), _) => Some(load_run(dir)?.0),
        (_, Some(dir)) => Some(TimeVaryingField::load_dir(dir).map_err(|e| CliError::Validation(format!("--field: {e}")))?),
        _ => None,
    };
    let zero = Zero;
    let frames: Vec<&dyn VelocityField> = match &loaded {
        Some(f) => f.frames.iter().map(|x| x as &dyn VelocityField).collect(),
        None if args.gt => bundle.gt_field.frames(),
        None => vec![&zero as &dyn VelocityField; bundle.eval_grids.len()],
    };
    let source = match (&args.run, &args.field) {
        (Some(d), _) | (_, Some(d)) => d.display().to_string(),
        _ if args.gt => "gt".into(),
        _ => "zero".into(),
    };
    let domain = bundle.domain();
    let fd_step = args.fd_step_fraction * domain.diagonal();
    if !(fd_step.is_finite() && fd_step > 0.0) {
        return Err(CliError::Validation(format!("--fd-step-fraction: must be positive, got {}", args.fd_step_fraction)));
    }
    let n = frames.len().min(bundle.eval_grids.len());
    if n == 0 {
        return Err(CliError::Validation("--field: no field frames to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(n);
    let mut gt_sq = 0.0;
    for (k, (field, grid)) in frames.iter().zip(&bundle.eval_grids).take(n).enumerate() {
        let div = divergence_metric(*field, grid, fd_step).map_err(CliError::from)?;
        let speed = (0..grid.len()).map(|i| field.velocity(&grid.center(i)).norm()).sum::<f64>() / grid.len() as f64;
        let div_normalized = if speed > 0.0 { div / (speed / domain.size()) } else { 0.0 };
        let err = velocity_errors(*field, grid).map_err(CliError::from)?;
        let masked: Vec<f64> =
            grid.density.iter().zip(&grid.velocity).filter(|(d, _)| **d > 0.0).map(|(_, v)| v.norm_squared()).collect();
        gt_sq += masked.iter().sum::<f64>() / masked.len().max(1) as f64;
        rows.push(FrameMetrics { frame: k, div, div_normalized, mse_v: err.mse_v, cos_v: err.cos_v, mask_cells: err.cells });
    }
    let m = n as f64;
    let mean = |f: fn(&FrameMetrics) -> f64| rows.iter().map(f).sum::<f64>() / m;
    Ok(MetricsReport {
        source,
        div: mean(|r| r.div),
        div_normalized: mean(|r| r.div_normalized),
        mse_v: mean(|r| r.mse_v),
        cos_v: mean(|r| r.cos_v),
        mean_gt_speed_sq: gt_sq / m,
        grid_resolution: bundle.eval_grids[0].resolution,
        fd_step,
        frames: rows,
    })
}

pub fn cmd_metrics(args: &MetricsArgs) -> Result<(), CliError> {
    let bundle = load_scene(&args.scene)?;
    let report = metrics_report(&bundle, args)?;
    let _lock = OutputLock::acquire(&args.out, "--out")?;
    let echo = json!({
        "scene": args.scene,
        "source": report.source,
        "fd_step_fraction": args.fd_step_fraction,
    });
    config::write_flat(&args.out.join(CONFIG_FILE), &echo)?;
    write_json(&args.out.join("metrics.json"), &serde_json::to_value(&report).expect("json"))
}

// ---------------------------------------------------------------- render-velocity

pub fn cmd_render_velocity(args: &RenderVelocityArgs) -> Result<(), CliError> {
    if args.size < 4 {
        return Err(CliError::Validation(format!("--size: must be at least 4, got {}", args.size)));
    }
    let field = if args.field.is_dir() {
        let tv = TimeVaryingField::load_dir(&args.field).map_err(|e| CliError::Validation(format!("--field: {e}")))?;
        if args.frame >= tv.len() {
            return Err(CliError::Validation(format!("--frame: {} out of range, field has {} frames", args.frame, tv.len())));
        }
        tv.frames[args.frame].clone()
    } else {
        DfkField::load(&args.field).map_err(|e| CliError::Validation(format!("--field: {e}")))?
    };
    let img = velocity_slices(&field, &field.layout.domain, args.size);
    write_ppm(&args.out, img.width, img.height, &img.rgb).map_err(CliError::from)
}
