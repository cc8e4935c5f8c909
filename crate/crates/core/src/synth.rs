//! Synthetic scenes: random irregular surfaces, random board poses and the
//! distorted corner pixels they produce.
//!
//! Corner pixels are found by inverting the forward raycast per corner
//! rather than by rendering images.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{CornerObservation, ImageObservations, ObservationSet};
use crate::dual::Dual;
use crate::error::{invalid, Error, Result};
use crate::geometry::{ConeGeometry, RbfPatch, RbfSurface};
use crate::linalg::{Mat3, Vec3};
use crate::raytrace::{corner_local, raycast_generic, BoardPose, CameraIntrinsics, SceneParams};

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeDistribution {
    pub mu_a_m: f64,
    pub sigma_a_m: f64,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

impl AmplitudeDistribution {
    /// Standard deviation a quarter of the mean.
    pub fn with_mean(mu_a_m: f64, rows: usize, cols: usize, seed: u64) -> Self {
        Self {
            mu_a_m,
            sigma_a_m: mu_a_m / 4.0,
            rows,
            cols,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_a_m >= 0.0) || !self.mu_a_m.is_finite() {
            return Err(invalid("amplitude distribution needs finite mean and sigma >= 0"));
        }
        Ok(())
    }
}

pub fn sample_amplitudes_with<R: Rng>(dist: &AmplitudeDistribution, rng: &mut R) -> Result<Vec<f64>> {
    dist.validate()?;
    let n = dist.rows * dist.cols;
    if dist.sigma_a_m == 0.0 {
        return Ok(vec![dist.mu_a_m; n]);
    }
    let normal = Normal::new(dist.mu_a_m, dist.sigma_a_m).map_err(|e| invalid(e.to_string()))?;
    Ok((0..n).map(|_| normal.sample(rng)).collect())
}

/// i.i.d. Gaussian amplitudes drawn from the distribution's own seed.
pub fn sample_surface(dist: &AmplitudeDistribution, patch: RbfPatch, beta: Option<f64>) -> Result<RbfSurface> {
    let amps = sample_amplitudes_with(dist, &mut rng_from_seed(dist.seed))?;
    RbfSurface::new(patch, dist.rows, dist.cols, beta, amps)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSampler {
    pub depth_range_m: [f64; 2],
    /// Board center offsets are drawn within this fraction of the half field
    /// of view at the sampled depth.
    pub lateral_fraction: f64,
    /// Per-axis rotation bound.
    pub max_rotation_rad: f64,
    pub square_size_m: f64,
    pub corners_per_side: u32,
    /// Every corner must project at least this far inside the sensor.
    pub margin_px: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for PoseSampler {
    fn default() -> Self {
        Self {
            depth_range_m: [0.3, 1.5],
            lateral_fraction: 1.0,
            max_rotation_rad: 25f64.to_radians(),
            square_size_m: 0.03,
            corners_per_side: 7,
            margin_px: 10.0,
            max_attempts: 2000,
            seed: 0,
        }
    }
}

impl PoseSampler {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.depth_range_m;
        if !(lo > 0.0 && hi >= lo) {
            return Err(invalid("depth range must be positive and ordered"));
        }
        if !(self.lateral_fraction >= 0.0) || !(self.max_rotation_rad >= 0.0) {
            return Err(invalid("lateral and rotation ranges must be non-negative"));
        }
        if !(self.square_size_m > 0.0) || self.corners_per_side < 2 {
            return Err(invalid("invalid board geometry"));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    Uniform::new(lo, hi).expect("ordered range").sample(rng)
}

/// Rejection-samples `n` poses whose corners all trace under the
/// zero-amplitude model and land inside the sensor.
pub fn sample_poses_with<R: Rng>(
    sampler: &PoseSampler,
    intr: &CameraIntrinsics,
    cone: &ConeGeometry,
    patch: RbfPatch,
    n: usize,
    rng: &mut R,
) -> Result<Vec<BoardPose>> {
    sampler.validate()?;
    let mut poses = Vec::with_capacity(n);
    let mut attempts = 0;
    let probe = SceneParams {
        intrinsics: *intr,
        cone: *cone,
        surface: RbfSurface::zeros(patch, 2, 2)?,
        poses: Vec::new(),
    };
    while poses.len() < n {
        if attempts >= sampler.max_attempts {
            return Err(Error::InfeasibleSampler { attempts });
        }
        attempts += 1;
        let z = uniform(rng, sampler.depth_range_m[0], sampler.depth_range_m[1]);
        let hx = sampler.lateral_fraction * z * intr.width as f64 * 0.5 / intr.fx;
        let hy = sampler.lateral_fraction * z * intr.height as f64 * 0.5 / intr.fy;
        let x = uniform(rng, -hx, hx) + z * (intr.width as f64 * 0.5 - intr.cx) / intr.fx;
        let y = uniform(rng, -hy, hy) + z * (intr.height as f64 * 0.5 - intr.cy) / intr.fy;
        let r = sampler.max_rotation_rad;
        let ax = uniform(rng, -r, r);
        let ay = uniform(rng, -r, r);
        let az = uniform(rng, -r, r);
        let rot = Mat3::from_axis_angle(Vec3::new(0.0, 0.0, az))
            .mul_mat(&Mat3::from_axis_angle(Vec3::new(0.0, ay, 0.0)))
            .mul_mat(&Mat3::from_axis_angle(Vec3::new(ax, 0.0, 0.0)));
        let pose = BoardPose::new(rot, Vec3::new(x, y, z), sampler.square_size_m, sampler.corners_per_side)?;
        let scene = probe.with_poses(vec![pose]);
        if board_visible(&scene, sampler.margin_px) {
            poses.push(pose);
        }
    }
    Ok(poses)
}

pub fn sample_poses(
    sampler: &PoseSampler,
    intr: &CameraIntrinsics,
    cone: &ConeGeometry,
    patch: RbfPatch,
    n: usize,
) -> Result<Vec<BoardPose>> {
    sample_poses_with(sampler, intr, cone, patch, n, &mut rng_from_seed(sampler.seed))
}

fn board_visible(scene: &SceneParams, margin: f64) -> bool {
    let pose = &scene.poses[0];
    let intr = &scene.intrinsics;
    let n = pose.corners_per_side;
    (1..=n).all(|i| {
        (1..=n).all(|j| {
            let x = pose.corner_local(i, j);
            let world = pose.board_local_to_world(x);
            if world.z < 0.1 {
                return false;
            }
            match project_corner(scene, 0, x) {
                Ok(p) => {
                    p[0] >= margin
                        && p[1] >= margin
                        && p[0] <= intr.width as f64 - margin
                        && p[1] <= intr.height as f64 - margin
                }
                Err(_) => false,
            }
        })
    })
}

/// Distorted pixel whose raycast lands on board point `x_cb` of image `k`.
///
/// Damped Gauss-Newton on the 2D board residual with a forward-mode
/// Jacobian, started from the pinhole projection of the corner.
pub fn project_corner(params: &SceneParams, k: usize, x_cb: [f64; 2]) -> Result<[f64; 2]> {
    let pose = params
        .poses
        .get(k)
        .ok_or_else(|| invalid(format!("image index {k} out of range")))?;
    let unprojectable = |reason: &str| Error::Unprojectable {
        board_local: x_cb,
        reason: reason.to_string(),
    };
    let world = pose.board_local_to_world(x_cb);
    if !(world.z > 0.0) {
        return Err(unprojectable("corner is behind the camera"));
    }
    let frame = pose.frame::<Dual<2>>();
    let eval = |p: [f64; 2]| {
        raycast_generic(&params.intrinsics, &params.cone, &params.surface, &frame, Dual::seed(p))
            .ok()
            .map(|x| {
                let r = Vector2::new(x[0].v - x_cb[0], x[1].v - x_cb[1]);
                let j = Matrix2::new(x[0].d[0], x[0].d[1], x[1].d[0], x[1].d[1]);
                (r, j)
            })
    };
    let mut p = params.intrinsics.project(world);
    let (mut r, mut jac) = eval(p).ok_or_else(|| unprojectable("initial pixel does not trace"))?;
    let mut lambda = 1e-6;
    for _ in 0..50 {
        if r.norm() < 1e-13 {
            break;
        }
        let jtj = jac.transpose() * jac;
        let g = jac.transpose() * r;
        let mut improved = false;
        for _ in 0..40 {
            let damped = jtj + Matrix2::from_diagonal(&jtj.diagonal().map(|d| lambda * d.max(1e-30)));
            let Some(step) = damped.try_inverse().map(|inv| -(inv * g)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = [p[0] + step[0], p[1] + step[1]];
            match eval(cand) {
                Some((rc, jc)) if rc.norm() < r.norm() => {
                    p = cand;
                    r = rc;
                    jac = jc;
                    lambda = (lambda * 0.1).max(1e-12);
                    improved = true;
                    break;
                }
                _ => lambda *= 10.0,
            }
        }
        if !improved {
            break;
        }
    }
    if r.norm() < 1e-9 {
        Ok(p)
    } else {
        Err(unprojectable(&format!("residual {:.3e} m after 50 iterations", r.norm())))
    }
}

/// Every corner of every pose in `params`, projected, with optional
/// isotropic Gaussian pixel noise drawn from `rng` in corner order.
pub fn observe<R: Rng>(
    params: &SceneParams,
    noise_px: f64,
    synthetic: bool,
    rng: &mut R,
) -> Result<ObservationSet> {
    let (square_size, corners_per_side) = match params.poses.first() {
        Some(p) => (p.square_size, p.corners_per_side),
        None => return Err(invalid("no poses to observe")),
    };
    let mut images = Vec::with_capacity(params.poses.len());
    for (k, pose) in params.poses.iter().enumerate() {
        let n = pose.corners_per_side;
        let grid: Vec<(u32, u32)> = (1..=n).flat_map(|j| (1..=n).map(move |i| (i, j))).collect();
        let pixels: Vec<Result<[f64; 2]>> = grid
            .par_iter()
            .map(|&(i, j)| project_corner(params, k, corner_local(square_size, corners_per_side, i, j)))
            .collect();
        let mut corners = Vec::with_capacity(grid.len());
        for (&(i, j), p) in grid.iter().zip(pixels) {
            corners.push(CornerObservation {
                image: k,
                grid: (i, j),
                pixel: p?,
                board_local: corner_local(square_size, corners_per_side, i, j),
            });
        }
        images.push(ImageObservations {
            index: k,
            initial_pose: *pose,
            corners,
        });
    }
    if noise_px > 0.0 {
        let normal = Normal::new(0.0, noise_px).map_err(|e| invalid(e.to_string()))?;
        for c in images.iter_mut().flat_map(|i| i.corners.iter_mut()) {
            c.pixel[0] += normal.sample(rng);
            c.pixel[1] += normal.sample(rng);
        }
    }
    Ok(ObservationSet {
        square_size,
        corners_per_side,
        images,
        synthetic,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub intrinsics: CameraIntrinsics,
    pub cone: ConeGeometry,
    pub patch: RbfPatch,
    /// Grid of the generating surface.
    pub rows: usize,
    pub cols: usize,
    pub beta: Option<f64>,
    pub mu_a_m: f64,
    pub sigma_a_m: f64,
    pub n_images: usize,
    pub sampler: PoseSampler,
    pub noise_px: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::default(),
            cone: ConeGeometry::default(),
            patch: RbfPatch::default(),
            rows: 4,
            cols: 4,
            beta: None,
            mu_a_m: 1e-5,
            sigma_a_m: 2.5e-6,
            n_images: 10,
            sampler: PoseSampler::default(),
            noise_px: 0.0,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Observations with the exact poses recorded as initial poses.
    pub observations: ObservationSet,
    pub truth: SceneParams,
    pub seed: u64,
}

/// Surface, poses and noise all come from one stream seeded by
/// `config.seed`, in that order.
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    config.intrinsics.validate()?;
    config.cone.validate()?;
    if config.n_images == 0 {
        return Err(invalid("n_images must be at least 1"));
    }
    let mut rng = rng_from_seed(config.seed);
    let dist = AmplitudeDistribution {
        mu_a_m: config.mu_a_m,
        sigma_a_m: config.sigma_a_m,
        rows: config.rows,
        cols: config.cols,
        seed: config.seed,
    };
    let amps = sample_amplitudes_with(&dist, &mut rng)?;
    let surface = RbfSurface::new(config.patch, config.rows, config.cols, config.beta, amps)?;
    let poses = sample_poses_with(
        &config.sampler,
        &config.intrinsics,
        &config.cone,
        config.patch,
        config.n_images,
        &mut rng,
    )?;
    let truth = SceneParams {
        intrinsics: config.intrinsics,
        cone: config.cone,
        surface,
        poses,
    };
    truth.validate()?;
    let observations = observe(&truth, config.noise_px, true, &mut rng)?;
    Ok(Dataset {
        observations,
        truth,
        seed: config.seed,
    })
}
