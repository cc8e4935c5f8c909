//! File formats: scene configuration, observation sets, ground truth,
//! fitted results, and the analysis CSV tables.
//!
//! Every document uses explicit unit suffixes (`_m`, `_rad`, `_px`) except
//! the observation file, whose field names follow the established corner
//! list layout.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::analysis::{CornerResidual, DepthCurve, DistortionField, DistortionSample, LinearFit};
use crate::calibrate::{
    CornerObservation, ErroredRay, ImageObservations, ObservationSet, OptimizerOptions, RmseReport, StepRule,
};
use crate::error::{invalid, Error, RayFailure, Result, Stage};
use crate::geometry::{ConeGeometry, RbfPatch, RbfSurface};
use crate::linalg::{Mat3, Vec3};
use crate::raytrace::{corner_local, BoardPose, CameraIntrinsics, SceneParams};
use crate::synth::PoseSampler;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        context: format!("reading {}", path.display()),
        source,
    })?;
    parse_json(&text, &format!("parsing {}", path.display()))
}

pub fn parse_json<T: DeserializeOwned>(text: &str, context: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|source| Error::Json {
        context: context.into(),
        source,
    })
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: "serializing".into(),
        source,
    })?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_string(value)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            context: format!("creating {}", dir.display()),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| Error::Io {
        context: format!("writing {}", path.display()),
        source,
    })
}

// ---------------------------------------------------------------------------
// scene configuration

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub fx_px: f64,
    pub fy_px: f64,
    pub cx_px: f64,
    pub cy_px: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl From<CameraIntrinsics> for CameraConfig {
    fn from(c: CameraIntrinsics) -> Self {
        Self {
            fx_px: c.fx,
            fy_px: c.fy,
            cx_px: c.cx,
            cy_px: c.cy,
            width_px: c.width,
            height_px: c.height,
        }
    }
}

impl From<CameraConfig> for CameraIntrinsics {
    fn from(c: CameraConfig) -> Self {
        Self {
            fx: c.fx_px,
            fy: c.fy_px,
            cx: c.cx_px,
            cy: c.cy_px,
            width: c.width_px,
            height: c.height_px,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConeConfig {
    pub apex_m: [f64; 3],
    pub half_angle_rad: f64,
    pub height_m: f64,
    pub radial_thickness_m: f64,
    pub eta_inside: f64,
    #[serde(default = "eta_air")]
    pub eta_outside: f64,
}

fn eta_air() -> f64 {
    1.0
}

impl From<ConeGeometry> for ConeConfig {
    fn from(c: ConeGeometry) -> Self {
        Self {
            apex_m: c.apex.to_array(),
            half_angle_rad: c.half_angle,
            height_m: c.height,
            radial_thickness_m: c.radial_thickness,
            eta_inside: c.eta_inside,
            eta_outside: c.eta_outside,
        }
    }
}

impl ConeConfig {
    pub fn to_geometry(&self) -> Result<ConeGeometry> {
        let g = ConeGeometry {
            apex: Vec3::from_array(self.apex_m),
            half_angle: self.half_angle_rad,
            height: self.height_m,
            radial_thickness: self.radial_thickness_m,
            eta_inside: self.eta_inside,
            eta_outside: self.eta_outside,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub s1_min_m: f64,
    pub s1_max_m: f64,
    pub s2_min_rad: f64,
    pub s2_max_rad: f64,
}

impl From<RbfPatch> for PatchConfig {
    fn from(p: RbfPatch) -> Self {
        Self {
            s1_min_m: p.s1_min_m,
            s1_max_m: p.s1_max_m,
            s2_min_rad: p.s2_min_rad,
            s2_max_rad: p.s2_max_rad,
        }
    }
}

impl PatchConfig {
    pub fn to_patch(&self) -> Result<RbfPatch> {
        RbfPatch::new([self.s1_min_m, self.s1_max_m], [self.s2_min_rad, self.s2_max_rad])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_images: usize,
    pub rows: usize,
    pub cols: usize,
    pub beta: Option<f64>,
    pub mu_a_m: f64,
    /// Defaults to a quarter of the mean.
    pub sigma_a_m: Option<f64>,
    pub noise_px: f64,
    pub depth_range_m: [f64; 2],
    pub lateral_fraction: f64,
    pub max_rotation_rad: f64,
    pub square_size_m: f64,
    pub corners_per_side: u32,
    pub margin_px: f64,
    pub max_attempts: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let s = PoseSampler::default();
        Self {
            n_images: 10,
            rows: 4,
            cols: 4,
            beta: None,
            mu_a_m: 1e-5,
            sigma_a_m: None,
            noise_px: 0.0,
            depth_range_m: s.depth_range_m,
            lateral_fraction: s.lateral_fraction,
            max_rotation_rad: s.max_rotation_rad,
            square_size_m: s.square_size_m,
            corners_per_side: s.corners_per_side,
            margin_px: s.margin_px,
            max_attempts: s.max_attempts,
        }
    }
}

impl GenerateConfig {
    pub fn sampler(&self, seed: u64) -> PoseSampler {
        PoseSampler {
            depth_range_m: self.depth_range_m,
            lateral_fraction: self.lateral_fraction,
            max_rotation_rad: self.max_rotation_rad,
            square_size_m: self.square_size_m,
            corners_per_side: self.corners_per_side,
            margin_px: self.margin_px,
            max_attempts: self.max_attempts,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub rows: usize,
    pub cols: usize,
    pub beta: Option<f64>,
    /// `None` picks 500 for synthetic observations and 1000 otherwise.
    pub steps: Option<usize>,
    pub learning_rate: f64,
    pub final_rate_fraction: f64,
    pub rule: StepRule,
    pub tolerance: f64,
    /// Refine poses under the perfect cone before fitting.
    pub refine_poses: bool,
    pub pose_iterations: usize,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        let o = OptimizerOptions::default();
        Self {
            rows: 8,
            cols: 8,
            beta: None,
            steps: None,
            learning_rate: o.learning_rate,
            final_rate_fraction: o.final_rate_fraction,
            rule: o.rule,
            tolerance: o.tolerance,
            refine_poses: false,
            pose_iterations: 100,
        }
    }
}

impl CalibrateConfig {
    pub fn options(&self, synthetic: bool, seed: u64) -> OptimizerOptions {
        OptimizerOptions {
            steps: self.steps.unwrap_or(if synthetic { 500 } else { 1000 }),
            rule: self.rule,
            learning_rate: self.learning_rate,
            final_rate_fraction: self.final_rate_fraction,
            tolerance: self.tolerance,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub depth_m: f64,
    pub stride_px: u32,
    pub inv_depth_range_per_m: [f64; 2],
    pub curve_samples: usize,
    pub probe_pixels: Vec<[f64; 2]>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            depth_m: 1.0,
            stride_px: 64,
            inv_depth_range_per_m: crate::analysis::DEFAULT_INV_DEPTH_RANGE,
            curve_samples: 20,
            probe_pixels: vec![[820.0, 1232.0], [410.0, 1232.0]],
        }
    }
}

/// The single configuration document read by every subcommand.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub camera: CameraConfig,
    pub cone: ConeConfig,
    pub patch: PatchConfig,
    pub generate: GenerateConfig,
    pub calibrate: CalibrateConfig,
    pub analyze: AnalyzeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            camera: CameraIntrinsics::default().into(),
            cone: ConeGeometry::default().into(),
            patch: RbfPatch::default().into(),
            generate: GenerateConfig::default(),
            calibrate: CalibrateConfig::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let c: CameraIntrinsics = self.camera.into();
        c.validate()?;
        Ok(c)
    }

    pub fn synth_config(&self) -> Result<crate::synth::SynthConfig> {
        let g = &self.generate;
        Ok(crate::synth::SynthConfig {
            intrinsics: self.intrinsics()?,
            cone: self.cone.to_geometry()?,
            patch: self.patch.to_patch()?,
            rows: g.rows,
            cols: g.cols,
            beta: g.beta,
            mu_a_m: g.mu_a_m,
            sigma_a_m: g.sigma_a_m.unwrap_or(g.mu_a_m / 4.0),
            n_images: g.n_images,
            sampler: g.sampler(self.seed),
            noise_px: g.noise_px,
            seed: self.seed,
        })
    }
}

// ---------------------------------------------------------------------------
// observations

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    /// Row-major 3x3; takes precedence over `axis_angle` when both are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_angle: Option<[f64; 3]>,
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn from_rotation(r: &Mat3, t: Vec3) -> Self {
        Self {
            rotation: Some(r.to_row_major()),
            axis_angle: None,
            translation: t.to_array(),
        }
    }

    pub fn to_pose(&self, square_size: f64, corners_per_side: u32) -> Result<BoardPose> {
        let rotation = match (self.rotation, self.axis_angle) {
            (Some(r), _) => Mat3::from_row_major(r),
            (None, Some(w)) => Mat3::from_axis_angle(Vec3::from_array(w)),
            (None, None) => return Err(invalid("pose needs `rotation` or `axis_angle`")),
        };
        BoardPose::new(rotation, Vec3::from_array(self.translation), square_size, corners_per_side)
    }
}

impl From<&BoardPose> for PoseRecord {
    fn from(p: &BoardPose) -> Self {
        Self::from_rotation(&p.rotation, p.translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoardRecord {
    /// Meters.
    pub square_size: f64,
    pub corners_per_side: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CornerRecord {
    pub i: u32,
    pub j: u32,
    pub px: f64,
    pub py: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub index: usize,
    pub initial_pose: PoseRecord,
    pub corners: Vec<CornerRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationFile {
    pub board: BoardRecord,
    #[serde(default)]
    pub synthetic: bool,
    pub images: Vec<ImageRecord>,
}

impl From<&ObservationSet> for ObservationFile {
    fn from(o: &ObservationSet) -> Self {
        Self {
            board: BoardRecord {
                square_size: o.square_size,
                corners_per_side: o.corners_per_side,
            },
            synthetic: o.synthetic,
            images: o
                .images
                .iter()
                .map(|img| ImageRecord {
                    index: img.index,
                    initial_pose: (&img.initial_pose).into(),
                    corners: img
                        .corners
                        .iter()
                        .map(|c| CornerRecord {
                            i: c.grid.0,
                            j: c.grid.1,
                            px: c.pixel[0],
                            py: c.pixel[1],
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl ObservationFile {
    /// Images are renumbered by position; `index` is only checked for
    /// uniqueness.
    pub fn to_observations(&self) -> Result<ObservationSet> {
        let BoardRecord {
            square_size,
            corners_per_side,
        } = self.board;
        let mut seen = std::collections::BTreeSet::new();
        let mut images = Vec::with_capacity(self.images.len());
        for (k, img) in self.images.iter().enumerate() {
            if !seen.insert(img.index) {
                return Err(invalid(format!("duplicate image index {}", img.index)));
            }
            let pose = img
                .initial_pose
                .to_pose(square_size, corners_per_side)
                .map_err(|e| invalid(format!("image {}: {e}", img.index)))?;
            let corners = img
                .corners
                .iter()
                .map(|c| CornerObservation {
                    image: k,
                    grid: (c.i, c.j),
                    pixel: [c.px, c.py],
                    board_local: corner_local(square_size, corners_per_side, c.i, c.j),
                })
                .collect();
            images.push(ImageObservations {
                index: img.index,
                initial_pose: pose,
                corners,
            });
        }
        let set = ObservationSet {
            square_size,
            corners_per_side,
            images,
            synthetic: self.synthetic,
        };
        set.validate()?;
        Ok(set)
    }
}

pub fn read_observations(path: &Path) -> Result<ObservationSet> {
    read_json::<ObservationFile>(path)?.to_observations()
}

pub fn parse_observations(text: &str) -> Result<ObservationSet> {
    parse_json::<ObservationFile>(text, "parsing observations")?.to_observations()
}

pub fn write_observations(path: &Path, obs: &ObservationSet) -> Result<()> {
    write_json(path, &ObservationFile::from(obs))
}

// ---------------------------------------------------------------------------
// surfaces, ground truth and fits

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceRecord {
    pub patch: PatchConfig,
    pub rows: usize,
    pub cols: usize,
    /// Normalized patch units squared.
    pub beta: f64,
    /// Row-major, rows along s1.
    pub amplitudes_m: Vec<f64>,
}

impl From<&RbfSurface> for SurfaceRecord {
    fn from(s: &RbfSurface) -> Self {
        Self {
            patch: (*s.patch()).into(),
            rows: s.rows(),
            cols: s.cols(),
            beta: s.beta(),
            amplitudes_m: s.amplitudes().to_vec(),
        }
    }
}

impl SurfaceRecord {
    pub fn to_surface(&self) -> Result<RbfSurface> {
        RbfSurface::new(
            self.patch.to_patch()?,
            self.rows,
            self.cols,
            Some(self.beta),
            self.amplitudes_m.clone(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthFile {
    pub seed: u64,
    pub camera: CameraConfig,
    pub cone: ConeConfig,
    pub surface: SurfaceRecord,
    pub board: BoardRecord,
    pub poses: Vec<PoseRecord>,
    pub noise_px: f64,
}

impl GroundTruthFile {
    pub fn new(truth: &SceneParams, seed: u64, noise_px: f64) -> Result<Self> {
        let first = truth.poses.first().ok_or_else(|| invalid("ground truth without poses"))?;
        Ok(Self {
            seed,
            camera: truth.intrinsics.into(),
            cone: truth.cone.into(),
            surface: (&truth.surface).into(),
            board: BoardRecord {
                square_size: first.square_size,
                corners_per_side: first.corners_per_side,
            },
            poses: truth.poses.iter().map(PoseRecord::from).collect(),
            noise_px,
        })
    }

    pub fn to_scene(&self) -> Result<SceneParams> {
        let scene = SceneParams {
            intrinsics: self.camera.into(),
            cone: self.cone.to_geometry()?,
            surface: self.surface.to_surface()?,
            poses: self
                .poses
                .iter()
                .map(|p| p.to_pose(self.board.square_size, self.board.corners_per_side))
                .collect::<Result<_>>()?,
        };
        scene.validate()?;
        Ok(scene)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErroredRayRecord {
    pub image: usize,
    pub i: u32,
    pub j: u32,
    pub stage: Stage,
    pub failure: RayFailure,
}

impl From<&ErroredRay> for ErroredRayRecord {
    fn from(e: &ErroredRay) -> Self {
        Self {
            image: e.image,
            i: e.grid.0,
            j: e.grid.1,
            stage: e.stage,
            failure: e.failure,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// The surface is the last iterate with a finite loss.
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub status: FitStatus,
    pub seed: u64,
    pub options: OptimizerOptions,
    pub surface: SurfaceRecord,
    pub report: RmseReport,
    pub steps_taken: usize,
    pub loss_history_m2: Vec<f64>,
    pub errored_rays: Vec<ErroredRayRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinedPoseRecord {
    pub index: usize,
    /// Present when refinement failed; the initial pose is kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub pose: PoseRecord,
    pub loss_before_m2: f64,
    pub loss_after_m2: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinedPosesFile {
    pub images: Vec<RefinedPoseRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSummary {
    pub px: f64,
    pub py: f64,
    pub fit: LinearFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSummary {
    pub depth_m: f64,
    pub stride_px: u32,
    pub field_samples: usize,
    pub field_errored: usize,
    pub max_norm_px: f64,
    pub curves: Vec<CurveSummary>,
    /// Absent when no observations were supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scatter_rmse_cm: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_image_mean_residual_m: Vec<[f64; 2]>,
}

// ---------------------------------------------------------------------------
// CSV tables

/// One distortion sample; errored pixels carry NaN vectors and the failure
/// in `status`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionRow {
    pub px: f64,
    pub py: f64,
    pub dpx: f64,
    pub dpy: f64,
    pub norm: f64,
    pub depth: f64,
    pub status: String,
}

impl DistortionRow {
    pub fn ok(s: &DistortionSample) -> Self {
        Self {
            px: s.pixel[0],
            py: s.pixel[1],
            dpx: s.delta[0],
            dpy: s.delta[1],
            norm: s.norm(),
            depth: s.depth_m,
            status: "ok".into(),
        }
    }
}

pub fn field_rows(field: &DistortionField) -> Vec<DistortionRow> {
    field
        .entries
        .iter()
        .map(|e| match &e.outcome {
            Ok(s) => DistortionRow::ok(s),
            Err(t) => DistortionRow {
                px: e.pixel[0],
                py: e.pixel[1],
                dpx: f64::NAN,
                dpy: f64::NAN,
                norm: f64::NAN,
                depth: field.depth_m,
                status: format!("{}:{}", stage_name(t.stage), failure_name(t.failure)),
            },
        })
        .collect()
}

pub fn curve_rows(curves: &[DepthCurve]) -> Vec<DistortionRow> {
    curves.iter().flat_map(|c| c.samples.iter().map(DistortionRow::ok)).collect()
}

fn stage_name(s: Stage) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

fn failure_name(f: RayFailure) -> String {
    serde_json::to_value(f).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub image: usize,
    pub i: u32,
    pub j: u32,
    pub rx_m: f64,
    pub ry_m: f64,
}

impl From<&CornerResidual> for ScatterRow {
    fn from(r: &CornerResidual) -> Self {
        Self {
            image: r.image,
            i: r.grid.0,
            j: r.grid.1,
            rx_m: r.residual[0],
            ry_m: r.residual[1],
        }
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        context: path.display().to_string(),
        source,
    }
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err(Path::new("<memory>")))?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| invalid(e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_text(path, &csv_string(rows)?)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(csv_err(path))
}
