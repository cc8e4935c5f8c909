//! C interface to `conecal`.
//!
//! Every fallible function returns a [`ConecalStatus`]. On failure the
//! message is kept per thread and can be read with
//! [`conecal_last_error_message`]. Strings returned through `char **` out
//! parameters are owned by the caller and must be released with
//! [`conecal_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use conecal::analysis::distortion_vector;
use conecal::calibrate::{optimize_amplitudes, rmse, rmse_pinhole, OptimizerOptions, RmseReport};
use conecal::io::{
    parse_json, parse_observations, to_json_string, ErroredRayRecord, FitFile, FitStatus, GroundTruthFile,
    SurfaceRecord,
};
use conecal::synth::project_corner;
use conecal::{Error, SceneParams};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConecalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    OutOfRange = 4,
    Json = 5,
    SingularSurface = 6,
    RayFailure = 7,
    UnusableData = 8,
    Diverged = 9,
    Unprojectable = 10,
    Io = 11,
    Panic = 12,
}

impl From<&Error> for ConecalStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::InfeasibleSampler { .. } => ConecalStatus::InvalidConfig,
            Error::OutOfRange(_) => ConecalStatus::OutOfRange,
            Error::Json { .. } => ConecalStatus::Json,
            Error::SingularSurface(_) => ConecalStatus::SingularSurface,
            Error::RayFailure(_) | Error::Ray { .. } => ConecalStatus::RayFailure,
            Error::UnusableData(_) => ConecalStatus::UnusableData,
            Error::Divergence { .. } => ConecalStatus::Diverged,
            Error::Unprojectable { .. } => ConecalStatus::Unprojectable,
            Error::Io { .. } | Error::Csv { .. } => ConecalStatus::Io,
        }
    }
}

/// Scene: camera, cone, RBF surface and board poses.
pub struct ConecalScene {
    params: SceneParams,
}

/// Exit ray of the cover, in camera coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConecalRay {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(ConecalStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ConecalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ConecalStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            ConecalStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ConecalStatus::NullPointer, format!("{what} is null"))
}

unsafe fn scene_ref<'a>(scene: *const ConecalScene) -> Result<&'a SceneParams, Fail> {
    scene.as_ref().map(|s| &s.params).ok_or_else(|| null("scene"))
}

unsafe fn text<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(ConecalStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

fn to_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(ConecalStatus::Json, "output contains a NUL byte".into()))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn conecal_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn conecal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a scene from a ground-truth JSON document as written by
/// `conecal generate`.
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn conecal_scene_from_json(json: *const c_char, out: *mut *mut ConecalScene) -> ConecalStatus {
    guard(|| {
        let doc: GroundTruthFile = parse_json(text(json, "json")?, "parsing scene")?;
        let params = doc.to_scene()?;
        write_out(out, Box::into_raw(Box::new(ConecalScene { params })))
    })
}

/// # Safety
/// `scene` must come from [`conecal_scene_from_json`] and not be used
/// afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn conecal_scene_free(scene: *mut ConecalScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Number of board poses in the scene, 0 for null.
///
/// # Safety
/// `scene` must be null or a live scene handle.
#[no_mangle]
pub unsafe extern "C" fn conecal_scene_pose_count(scene: *const ConecalScene) -> usize {
    scene.as_ref().map_or(0, |s| s.params.poses.len())
}

/// Traces pixel `(px, py)` through both cover surfaces.
///
/// # Safety
/// `scene` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn conecal_trace(
    scene: *const ConecalScene,
    px: f64,
    py: f64,
    out: *mut ConecalRay,
) -> ConecalStatus {
    guard(|| {
        let ray = scene_ref(scene)?.trace_through_cover([px, py])?;
        write_out(
            out,
            ConecalRay {
                origin: ray.origin.to_array(),
                direction: ray.direction.to_array(),
            },
        )
    })
}

/// Board-local point in meters hit by pixel `(px, py)` for pose `image`.
///
/// # Safety
/// `scene` must be a live handle and `out` must point to two doubles.
#[no_mangle]
pub unsafe extern "C" fn conecal_raycast(
    scene: *const ConecalScene,
    image: usize,
    px: f64,
    py: f64,
    out: *mut f64,
) -> ConecalStatus {
    guard(|| {
        let b = scene_ref(scene)?.raycast(image, [px, py])?;
        write_out(out.cast::<[f64; 2]>(), b)
    })
}

/// Pixel offset from `(px, py)` to the pinhole projection of the point its
/// ray reaches at camera depth `depth_m`.
///
/// # Safety
/// `scene` must be a live handle and `out` must point to two doubles.
#[no_mangle]
pub unsafe extern "C" fn conecal_distortion_vector(
    scene: *const ConecalScene,
    px: f64,
    py: f64,
    depth_m: f64,
    out: *mut f64,
) -> ConecalStatus {
    guard(|| {
        let s = distortion_vector(scene_ref(scene)?, [px, py], depth_m)?;
        write_out(out.cast::<[f64; 2]>(), s.delta)
    })
}

/// Distorted pixel of board-local point `(x, y)` of pose `image`.
///
/// # Safety
/// `scene` must be a live handle and `out` must point to two doubles.
#[no_mangle]
pub unsafe extern "C" fn conecal_project_corner(
    scene: *const ConecalScene,
    image: usize,
    x: f64,
    y: f64,
    out: *mut f64,
) -> ConecalStatus {
    guard(|| {
        let params = scene_ref(scene)?;
        if image >= params.poses.len() {
            return Err(Fail(ConecalStatus::OutOfRange, format!("no pose {image}")));
        }
        write_out(out.cast::<[f64; 2]>(), project_corner(params, image, [x, y])?)
    })
}

/// Board-plane RMSE in centimeters of the scene surface against an
/// observation document. The poses come from the observations.
///
/// # Safety
/// `scene` must be a live handle, `observations_json` a NUL-terminated
/// string and `out_cm` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn conecal_rmse(
    scene: *const ConecalScene,
    observations_json: *const c_char,
    out_cm: *mut f64,
) -> ConecalStatus {
    guard(|| {
        let obs = parse_observations(text(observations_json, "observations_json")?)?;
        let params = scene_ref(scene)?.with_poses(obs.initial_poses());
        write_out(out_cm, rmse(&params, &obs)?)
    })
}

/// Fits the RBF amplitudes, starting from the scene surface, and returns a
/// fit document in `out_fit_json`. `options_json` may be null for the
/// default optimizer. On divergence the document is still produced, with
/// the last stable amplitudes, and `Diverged` is returned.
///
/// # Safety
/// `scene` must be a live handle, the strings NUL-terminated or null where
/// allowed, and `out_fit_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn conecal_calibrate(
    scene: *const ConecalScene,
    observations_json: *const c_char,
    options_json: *const c_char,
    out_fit_json: *mut *mut c_char,
) -> ConecalStatus {
    guard(|| {
        if out_fit_json.is_null() {
            return Err(null("out_fit_json"));
        }
        out_fit_json.write(ptr::null_mut());
        let obs = parse_observations(text(observations_json, "observations_json")?)?;
        let opts: OptimizerOptions = if options_json.is_null() {
            OptimizerOptions::default()
        } else {
            parse_json(text(options_json, "options_json")?, "parsing optimizer options")?
        };
        opts.validate()?;
        let params = scene_ref(scene)?.with_poses(obs.initial_poses());
        params.validate()?;
        let initial = rmse_pinhole(&params.intrinsics, &params.poses, &obs)?;
        let (status, surface, history, steps, errored, failure) = match optimize_amplitudes(&params, &obs, &opts) {
            Ok(fit) => (
                FitStatus::Converged,
                fit.surface,
                fit.history,
                fit.steps_taken,
                fit.errored.iter().map(ErroredRayRecord::from).collect(),
                None,
            ),
            Err(Error::Divergence { iteration, last_stable }) => {
                let surface = params.surface.with_amplitudes(last_stable)?;
                let msg = format!("optimization diverged at iteration {iteration}");
                (FitStatus::Diverged, surface, Vec::new(), iteration, Vec::new(), Some(msg))
            }
            Err(e) => return Err(e.into()),
        };
        let final_cm = rmse(&params.with_surface(surface.clone()), &obs).unwrap_or(f64::NAN);
        let doc = FitFile {
            status,
            seed: opts.seed,
            options: opts,
            surface: SurfaceRecord::from(&surface),
            report: RmseReport::new(initial, final_cm),
            steps_taken: steps,
            loss_history_m2: history,
            errored_rays: errored,
        };
        out_fit_json.write(to_c_string(to_json_string(&doc)?)?);
        match failure {
            Some(msg) => Err(Fail(ConecalStatus::Diverged, msg)),
            None => Ok(()),
        }
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, released once.
#[no_mangle]
pub unsafe extern "C" fn conecal_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
