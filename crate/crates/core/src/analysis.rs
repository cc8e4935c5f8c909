//! Distortion vectors, fixed-depth fields, inverse-depth curves and corner
//! residual scatter.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{residuals, ErroredRay, ObservationSet};
use crate::error::{invalid, Error, RayFailure, Result, Stage, TraceError};
use crate::raytrace::{Ray, SceneParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionSample {
    pub pixel: [f64; 2],
    pub undistorted: [f64; 2],
    /// `undistorted - pixel`, pixels.
    pub delta: [f64; 2],
    pub depth_m: f64,
}

impl DistortionSample {
    pub fn norm(&self) -> f64 {
        self.delta[0].hypot(self.delta[1])
    }
}

fn check_depth(depth: f64) -> Result<()> {
    if depth > 0.0 && depth.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("depth must be positive, got {depth}")))
    }
}

fn sample_on_ray(params: &SceneParams, p_d: [f64; 2], ray: &Ray, depth: f64) -> Result<DistortionSample, TraceError> {
    let no_hit = TraceError {
        stage: Stage::Board,
        failure: RayFailure::NoHit,
    };
    if !(ray.direction.z > 0.0) {
        return Err(no_hit);
    }
    let t = (depth - ray.origin.z) / ray.direction.z;
    if !(t > 0.0) {
        return Err(no_hit);
    }
    let p_u = params.intrinsics.project(ray.at(t));
    Ok(DistortionSample {
        pixel: p_d,
        undistorted: p_u,
        delta: [p_u[0] - p_d[0], p_u[1] - p_d[1]],
        depth_m: depth,
    })
}

/// Traces `p_d` through the cover to the camera-frame plane `z = depth` and
/// projects that point with the pinhole model.
pub fn distortion_vector(params: &SceneParams, p_d: [f64; 2], depth: f64) -> Result<DistortionSample> {
    check_depth(depth)?;
    let ray = params.trace_through_cover(p_d)?;
    sample_on_ray(params, p_d, &ray, depth).map_err(|trace| Error::Ray {
        image: None,
        pixel: p_d,
        trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldEntry {
    pub pixel: [f64; 2],
    pub outcome: Result<DistortionSample, TraceError>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistortionField {
    pub stride: u32,
    pub width: u32,
    pub height: u32,
    pub depth_m: f64,
    /// Row-major over the pixel grid, errored pixels included.
    pub entries: Vec<FieldEntry>,
}

impl DistortionField {
    pub fn samples(&self) -> impl Iterator<Item = &DistortionSample> {
        self.entries.iter().filter_map(|e| e.outcome.as_ref().ok())
    }

    pub fn errored_count(&self) -> usize {
        self.entries.iter().filter(|e| e.outcome.is_err()).count()
    }

    pub fn get(&self, px: u32, py: u32) -> Option<&FieldEntry> {
        if !px.is_multiple_of(self.stride) || !py.is_multiple_of(self.stride) || px >= self.width || py >= self.height {
            return None;
        }
        let cols = self.width.div_ceil(self.stride);
        self.entries
            .get(((py / self.stride) * cols + px / self.stride) as usize)
    }
}

/// Distortion vectors at every `stride`-th integer pixel, starting at 0.
pub fn distortion_field(params: &SceneParams, stride: u32, depth: f64) -> Result<DistortionField> {
    if stride < 1 {
        return Err(invalid("stride must be at least 1"));
    }
    check_depth(depth)?;
    let intr = &params.intrinsics;
    let pixels: Vec<[f64; 2]> = (0..intr.height)
        .step_by(stride as usize)
        .flat_map(|y| (0..intr.width).step_by(stride as usize).map(move |x| [x as f64, y as f64]))
        .collect();
    let entries = pixels
        .par_iter()
        .map(|&p| {
            let outcome = crate::raytrace::trace_ray(intr, &params.cone, &params.surface, p)
                .and_then(|ray| sample_on_ray(params, p, &ray, depth));
            FieldEntry { pixel: p, outcome }
        })
        .collect();
    Ok(DistortionField {
        stride,
        width: intr.width,
        height: intr.height,
        depth_m: depth,
        entries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(points: &[(f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(invalid("a line fit needs at least two points"));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("a line fit needs distinct abscissae"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    // a flat curve is fitted exactly
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

pub const DEFAULT_INV_DEPTH_RANGE: [f64; 2] = [0.5, 10.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthCurve {
    pub pixel: [f64; 2],
    pub samples: Vec<DistortionSample>,
    pub fit: LinearFit,
}

impl DepthCurve {
    /// `(1/d, |dp|)` pairs.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.samples.iter().map(|s| (1.0 / s.depth_m, s.norm())).collect()
    }
}

/// `|dp|` at `samples` inverse depths spaced evenly over `inv_depth_range`.
pub fn distortion_vs_inverse_depth(
    params: &SceneParams,
    p_d: [f64; 2],
    inv_depth_range: [f64; 2],
    samples: usize,
) -> Result<DepthCurve> {
    let [lo, hi] = inv_depth_range;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(invalid("inverse depth range must be positive and increasing"));
    }
    if samples < 2 {
        return Err(invalid("at least two depth samples are needed"));
    }
    let ray = params.trace_through_cover(p_d)?;
    let samples = (0..samples)
        .map(|i| {
            let inv = lo + (hi - lo) * i as f64 / (samples - 1) as f64;
            sample_on_ray(params, p_d, &ray, 1.0 / inv).map_err(|trace| Error::Ray {
                image: None,
                pixel: p_d,
                trace,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<_> = samples.iter().map(|s| (1.0 / s.depth_m, s.norm())).collect();
    Ok(DepthCurve {
        pixel: p_d,
        fit: linear_fit(&points)?,
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerResidual {
    pub image: usize,
    pub grid: (u32, u32),
    /// Board-local meters.
    pub residual: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct CornerScatter {
    pub residuals: Vec<CornerResidual>,
    /// Zero for images without usable corners.
    pub per_image_mean: Vec<[f64; 2]>,
    pub rmse_cm: f64,
    pub errored: Vec<ErroredRay>,
}

impl CornerScatter {
    pub fn mean_norm(&self, image: usize) -> f64 {
        let m = self.per_image_mean[image];
        m[0].hypot(m[1])
    }
}

pub fn corner_error_scatter(params: &SceneParams, obs: &ObservationSet) -> Result<CornerScatter> {
    if params.poses.len() != obs.images.len() {
        return Err(invalid("pose count does not match image count"));
    }
    let mut out = Vec::new();
    let mut errored = Vec::new();
    let mut sums = vec![[0.0; 2]; obs.images.len()];
    let mut counts = vec![0usize; obs.images.len()];
    let mut sq = 0.0;
    for (c, r) in obs.corners().zip(residuals(params, obs)) {
        match r {
            Ok(r) => {
                sums[c.image][0] += r[0];
                sums[c.image][1] += r[1];
                counts[c.image] += 1;
                sq += r[0] * r[0] + r[1] * r[1];
                out.push(CornerResidual {
                    image: c.image,
                    grid: c.grid,
                    residual: r,
                });
            }
            Err(e) => errored.push(e),
        }
    }
    if out.is_empty() {
        return Err(Error::UnusableData("every corner ray failed".into()));
    }
    let per_image_mean = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { [0.0; 2] } else { [s[0] / n as f64, s[1] / n as f64] })
        .collect();
    Ok(CornerScatter {
        rmse_cm: (sq / out.len() as f64).sqrt() * 100.0,
        residuals: out,
        per_image_mean,
        errored,
    })
}
