//! The `conecal` command line: generate, refine-poses, calibrate, analyze.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{corner_error_scatter, distortion_field, distortion_vs_inverse_depth};
use crate::calibrate::{
    optimize_amplitudes, perfect_cone_rays, refine_pose, rmse, rmse_pinhole, ObservationSet, RmseReport,
};
use crate::error::{invalid, Error, Result};
use crate::geometry::RbfSurface;
use crate::io::{
    self, AnalysisSummary, CurveSummary, ErroredRayRecord, FitFile, FitStatus, GroundTruthFile,
    RefinedPoseRecord, RefinedPosesFile, RunConfig, ScatterRow, SurfaceRecord,
};
use crate::raytrace::SceneParams;
use crate::synth::generate_dataset;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_IO: i32 = 5;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::OutOfRange(_) | Error::Json { .. } => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGED,
        Error::Io { .. } => EXIT_IO,
        Error::SingularSurface(_)
        | Error::RayFailure(_)
        | Error::Ray { .. }
        | Error::UnusableData(_)
        | Error::Unprojectable { .. }
        | Error::InfeasibleSampler { .. }
        | Error::Csv { .. } => EXIT_DATA,
    }
}

/// `NxM` grid size, rows first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected ROWSxCOLS, got `{s}`"))?;
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad grid size `{t}`: {e}"));
        let g = Grid {
            rows: parse(r)?,
            cols: parse(c)?,
        };
        if g.rows < 1 || g.cols < 1 {
            return Err("grid sizes must be at least 1".into());
        }
        Ok(g)
    }
}

#[derive(Parser, Debug)]
#[command(name = "conecal", version, about = "Calibrate cameras behind conical refractive covers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Default)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub images: Option<usize>,
    /// Generating RBF grid.
    #[arg(long)]
    pub grid: Option<Grid>,
    /// Mean amplitude in meters.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Pixel noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct RefinePosesArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub observations: PathBuf,
    /// Maximum iterations per image.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub observations: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub rate: Option<f64>,
    /// Fitting RBF grid.
    #[arg(long)]
    pub grid: Option<Grid>,
    /// Refine poses under the perfect cone before fitting.
    #[arg(long)]
    pub refine_poses: bool,
}

#[derive(Args, Clone, Debug, Default)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Fit result written by `calibrate`.
    #[arg(long)]
    pub surface: Option<PathBuf>,
    /// Observations for the corner residual scatter.
    #[arg(long)]
    pub observations: Option<PathBuf>,
    #[arg(long)]
    pub depth: Option<f64>,
    #[arg(long)]
    pub inv_depth_min: Option<f64>,
    #[arg(long)]
    pub inv_depth_max: Option<f64>,
    #[arg(long)]
    pub stride: Option<u32>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize an observation set and its ground truth.
    Generate(GenerateArgs),
    /// Refine board poses under the perfect cone model.
    RefinePoses(RefinePosesArgs),
    /// Fit RBF amplitudes to observed corners.
    Calibrate(CalibrateArgs),
    /// Distortion field, inverse-depth curves and corner residuals.
    Analyze(AnalyzeArgs),
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(stdout, "{text}");
            } else {
                let _ = write!(stderr, "{text}");
            }
            return code;
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a, stdout),
        Command::RefinePoses(a) => cmd_refine_poses(a, stdout),
        Command::Calibrate(a) => cmd_calibrate(a, stdout),
        Command::Analyze(a) => cmd_analyze(a, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => io::read_json::<RunConfig>(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|source| Error::Io {
        context: "writing to stdout".into(),
        source,
    })
}

fn base_scene(cfg: &RunConfig, obs: &ObservationSet, surface: RbfSurface) -> Result<SceneParams> {
    let scene = SceneParams {
        intrinsics: cfg.intrinsics()?,
        cone: cfg.cone.to_geometry()?,
        surface,
        poses: obs.initial_poses(),
    };
    scene.validate()?;
    Ok(scene)
}

pub fn cmd_generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let g = &mut cfg.generate;
    if let Some(n) = args.images {
        g.n_images = n;
    }
    if let Some(grid) = args.grid {
        g.rows = grid.rows;
        g.cols = grid.cols;
    }
    if let Some(mu) = args.mu {
        g.mu_a_m = mu;
        g.sigma_a_m = None;
    }
    if let Some(noise) = args.noise {
        g.noise_px = noise;
    }
    let synth = cfg.synth_config()?;
    let ds = generate_dataset(&synth)?;
    let dir = &args.common.out;
    io::write_observations(&dir.join("observations.json"), &ds.observations)?;
    io::write_json(
        &dir.join("ground_truth.json"),
        &GroundTruthFile::new(&ds.truth, ds.seed, synth.noise_px)?,
    )?;
    let pin = rmse_pinhole(&ds.truth.intrinsics, &ds.truth.poses, &ds.observations)?;
    say(
        out,
        &format!(
            "generated {} images, {} corners (seed {})\npinhole RMSE: {pin:.4} cm",
            ds.observations.images.len(),
            ds.observations.corner_count(),
            ds.seed
        ),
    )
}

pub fn cmd_refine_poses(args: &RefinePosesArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let obs = io::read_observations(&args.observations)?;
    let intr = cfg.intrinsics()?;
    let cone = cfg.cone.to_geometry()?;
    let iterations = args.steps.unwrap_or(cfg.calibrate.pose_iterations);
    let mut records = Vec::with_capacity(obs.images.len());
    let mut poses = Vec::with_capacity(obs.images.len());
    for (k, img) in obs.images.iter().enumerate() {
        let (rays, _) = perfect_cone_rays(&intr, &cone, img);
        match refine_pose(&rays, k, &img.initial_pose, iterations) {
            Ok(r) => {
                records.push(RefinedPoseRecord {
                    index: img.index,
                    error: None,
                    pose: (&r.pose).into(),
                    loss_before_m2: r.loss_before,
                    loss_after_m2: r.loss_after,
                    iterations: r.iterations,
                });
                poses.push(r.pose);
            }
            Err(e) => {
                records.push(RefinedPoseRecord {
                    index: img.index,
                    error: Some(e.to_string()),
                    pose: (&img.initial_pose).into(),
                    loss_before_m2: f64::NAN,
                    loss_after_m2: f64::NAN,
                    iterations: 0,
                });
                poses.push(img.initial_pose);
            }
        }
    }
    let dir = &args.common.out;
    io::write_json(&dir.join("refined_poses.json"), &RefinedPosesFile { images: records.clone() })?;
    io::write_observations(&dir.join("observations_refined.json"), &obs.with_initial_poses(&poses))?;
    for r in &records {
        let line = match &r.error {
            None => format!(
                "image {}: loss {:.6e} -> {:.6e} m^2 ({} iterations)",
                r.index, r.loss_before_m2, r.loss_after_m2, r.iterations
            ),
            Some(e) => format!("image {}: refinement failed: {e}", r.index),
        };
        say(out, &line)?;
    }
    Ok(())
}

pub fn cmd_calibrate(args: &CalibrateArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let c = &mut cfg.calibrate;
    if let Some(s) = args.steps {
        c.steps = Some(s);
    }
    if let Some(r) = args.rate {
        c.learning_rate = r;
    }
    if let Some(g) = args.grid {
        c.rows = g.rows;
        c.cols = g.cols;
    }
    if args.refine_poses {
        c.refine_poses = true;
    }
    let c = cfg.calibrate;
    let mut obs = io::read_observations(&args.observations)?;
    let opts = c.options(obs.synthetic, cfg.seed);
    opts.validate()?;
    let patch = cfg.patch.to_patch()?;
    let zero = RbfSurface::new(patch, c.rows, c.cols, c.beta, vec![0.0; c.rows * c.cols])?;
    let mut scene = base_scene(&cfg, &obs, zero)?;
    if c.refine_poses {
        for (k, img) in obs.images.iter().enumerate() {
            let (rays, _) = perfect_cone_rays(&scene.intrinsics, &scene.cone, img);
            if let Ok(r) = refine_pose(&rays, k, &img.initial_pose, c.pose_iterations) {
                scene.poses[k] = r.pose;
            }
        }
        obs = obs.with_initial_poses(&scene.poses);
    }
    let initial = rmse_pinhole(&scene.intrinsics, &scene.poses, &obs)?;
    let dir = &args.common.out;
    let write_fit = |status, surface: &RbfSurface, final_cm, history: Vec<f64>, steps, errored: Vec<_>| {
        let fit = FitFile {
            status,
            seed: cfg.seed,
            options: opts,
            surface: SurfaceRecord::from(surface),
            report: RmseReport::new(initial, final_cm),
            steps_taken: steps,
            loss_history_m2: history,
            errored_rays: errored,
        };
        io::write_json(&dir.join("fit.json"), &fit).map(|_| fit)
    };
    match optimize_amplitudes(&scene, &obs, &opts) {
        Ok(fit) => {
            let final_cm = rmse(&scene.with_surface(fit.surface.clone()), &obs)?;
            let errored = fit.errored.iter().map(ErroredRayRecord::from).collect();
            let written = write_fit(
                FitStatus::Converged,
                &fit.surface,
                final_cm,
                fit.history,
                fit.steps_taken,
                errored,
            )?;
            let table = format!("{}\n", written.report);
            io::write_text(&dir.join("report.txt"), &table)?;
            say(out, table.trim_end())?;
            if !written.errored_rays.is_empty() {
                say(out, &format!("{} corners excluded", written.errored_rays.len()))?;
            }
            Ok(())
        }
        Err(Error::Divergence {
            iteration,
            last_stable,
        }) => {
            let surface = scene.surface.with_amplitudes(last_stable.clone())?;
            let final_cm = rmse(&scene.with_surface(surface.clone()), &obs).unwrap_or(f64::NAN);
            write_fit(FitStatus::Diverged, &surface, final_cm, Vec::new(), iteration, Vec::new())?;
            Err(Error::Divergence {
                iteration,
                last_stable,
            })
        }
        Err(e) => Err(e),
    }
}

fn read_fitted_surface(path: Option<&Path>) -> Result<RbfSurface> {
    let path = path.ok_or_else(|| invalid("analyze needs --surface <fit.json> from `calibrate`"))?;
    io::read_json::<FitFile>(path)?.surface.to_surface()
}

pub fn cmd_analyze(args: &AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let a = &mut cfg.analyze;
    if let Some(d) = args.depth {
        a.depth_m = d;
    }
    if let Some(v) = args.inv_depth_min {
        a.inv_depth_range_per_m[0] = v;
    }
    if let Some(v) = args.inv_depth_max {
        a.inv_depth_range_per_m[1] = v;
    }
    if let Some(s) = args.stride {
        a.stride_px = s;
    }
    let a = cfg.analyze.clone();
    let surface = read_fitted_surface(args.surface.as_deref())?;
    let obs = args.observations.as_deref().map(io::read_observations).transpose()?;
    let mut scene = SceneParams {
        intrinsics: cfg.intrinsics()?,
        cone: cfg.cone.to_geometry()?,
        surface,
        poses: Vec::new(),
    };
    scene.validate()?;
    let dir = &args.common.out;

    let field = distortion_field(&scene, a.stride_px, a.depth_m)?;
    io::write_csv(&dir.join("distortion_field.csv"), &io::field_rows(&field))?;
    let curves = a
        .probe_pixels
        .iter()
        .map(|&p| distortion_vs_inverse_depth(&scene, p, a.inv_depth_range_per_m, a.curve_samples))
        .collect::<Result<Vec<_>>>()?;
    io::write_csv(&dir.join("depth_curves.csv"), &io::curve_rows(&curves))?;

    let mut summary = AnalysisSummary {
        depth_m: a.depth_m,
        stride_px: a.stride_px,
        field_samples: field.samples().count(),
        field_errored: field.errored_count(),
        max_norm_px: field.samples().map(|s| s.norm()).fold(0.0, f64::max),
        curves: curves
            .iter()
            .map(|c| CurveSummary {
                px: c.pixel[0],
                py: c.pixel[1],
                fit: c.fit,
            })
            .collect(),
        scatter_rmse_cm: None,
        per_image_mean_residual_m: Vec::new(),
    };
    if let Some(obs) = &obs {
        scene.poses = obs.initial_poses();
        let scatter = corner_error_scatter(&scene, obs)?;
        let rows: Vec<ScatterRow> = scatter.residuals.iter().map(ScatterRow::from).collect();
        io::write_csv(&dir.join("corner_scatter.csv"), &rows)?;
        summary.scatter_rmse_cm = Some(scatter.rmse_cm);
        summary.per_image_mean_residual_m = scatter.per_image_mean.clone();
    }
    io::write_json(&dir.join("analysis.json"), &summary)?;

    say(
        out,
        &format!(
            "field: {} samples, {} errored, max |dp| {:.3} px at {} m",
            summary.field_samples, summary.field_errored, summary.max_norm_px, a.depth_m
        ),
    )?;
    for c in &summary.curves {
        say(
            out,
            &format!(
                "pixel ({}, {}): slope {:.4} px*m, intercept {:.4} px, R^2 {:.6}",
                c.px, c.py, c.fit.slope, c.fit.intercept, c.fit.r_squared
            ),
        )?;
    }
    if let Some(r) = summary.scatter_rmse_cm {
        say(out, &format!("corner RMSE: {r:.4} cm"))?;
    }
    Ok(())
}
