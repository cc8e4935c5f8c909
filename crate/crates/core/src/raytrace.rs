//! Forward raycast: pixel, camera ray, refraction into the cover at the inner
//! cone, refraction out of it at the RBF-perturbed outer cone, board plane,
//! local board coordinates.
//!
//! The exit point is taken on the unperturbed outer cone; the RBF field only
//! enters through the exit normal. Everything up to the exit point is
//! therefore independent of the amplitudes ([`OuterHit`]), which the
//! calibration code exploits.

use serde::{Deserialize, Serialize};

use crate::dual::Real;
use crate::error::{invalid, Error, RayFailure, Result, Stage, TraceError};
use crate::geometry::{ConeCoords, ConeGeometry, OffsetJet, RbfSurface, Side};
use crate::linalg::{Mat3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    /// Raspberry Pi Camera Module v2 at full resolution.
    fn default() -> Self {
        Self {
            fx: 2558.36,
            fy: 2558.36,
            cx: 1666.03,
            cy: 1273.65,
            width: 3280,
            height: 2464,
        }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid("focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) || !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(invalid("principal point must lie inside the sensor"));
        }
        Ok(())
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= self.width as f64 && p[1] <= self.height as f64
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project(&self, x: Vec3) -> [f64; 2] {
        [self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray<T = f64> {
    pub origin: Vec3<T>,
    pub direction: Vec3<T>,
}

impl<T: Real> Ray<T> {
    pub fn at(&self, t: T) -> Vec3<T> {
        self.origin + self.direction * t
    }
}

/// Camera ray through pixel `p`, starting at the camera center.
pub fn pixel_to_ray<T: Real>(intr: &CameraIntrinsics, p: [T; 2]) -> Ray<T> {
    let d = Vec3::new(
        (p[0] - T::cst(intr.cx)).scale(1.0 / intr.fx),
        (p[1] - T::cst(intr.cy)).scale(1.0 / intr.fy),
        T::one(),
    );
    Ray {
        origin: Vec3::zero(),
        direction: d.normalized(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConeHit<T = f64> {
    pub t: T,
    pub point: Vec3<T>,
    pub coords: ConeCoords<T>,
}

/// First intersection of a ray with the unperturbed inner or outer surface
/// inside the height range of the slice.
pub fn intersect_cone<T: Real>(
    cone: &ConeGeometry,
    ray: &Ray<T>,
    side: Side,
) -> Result<ConeHit<T>, RayFailure> {
    let tan = cone.tan_half_angle();
    let k = tan * tan;
    let apex_y = match side {
        Side::Inner => cone.apex.y,
        Side::Outer => cone.apex.y + cone.outer_apex_offset(),
    };
    let o = ray.origin;
    let d = ray.direction;
    let ox = o.x - T::cst(cone.apex.x);
    let oz = o.z - T::cst(cone.apex.z);
    let y0 = T::cst(apex_y) - o.y;

    let a = d.x * d.x + d.z * d.z - (d.y * d.y).scale(k);
    let b = (ox * d.x + oz * d.z + (y0 * d.y).scale(k)).scale(2.0);
    let c = ox * ox + oz * oz - (y0 * y0).scale(k);

    let (av, bv, cv) = (a.value(), b.value(), c.value());
    let lead_scale = d.x.value().powi(2) + d.z.value().powi(2) + k * d.y.value().powi(2);

    // candidate roots as (value, generic) pairs
    let mut roots: [Option<T>; 2] = [None, None];
    if av.abs() <= 1e-14 * lead_scale {
        if bv == 0.0 {
            return Err(RayFailure::Miss);
        }
        roots[0] = Some(-c / b);
    } else {
        let disc = b * b - (a * c).scale(4.0);
        let dv = disc.value();
        if dv <= 1e-14 * (bv * bv + (4.0 * av * cv).abs()) {
            return Err(RayFailure::Miss);
        }
        let sq = disc.sqrt();
        let q = if bv >= 0.0 { -(b + sq).scale(0.5) } else { (sq - b).scale(0.5) };
        roots[0] = Some(q / a);
        if q.value() != 0.0 {
            roots[1] = Some(c / q);
        }
    }

    let mut best: Option<T> = None;
    for t in roots.into_iter().flatten() {
        let tv = t.value();
        if !(tv > 1e-12) || !tv.is_finite() {
            continue;
        }
        let y = o.y.value() + tv * d.y.value();
        let s1 = cone.apex.y - y;
        let radius_arg = apex_y - y;
        if s1 < -1e-12 || s1 > cone.height + 1e-12 || radius_arg < 0.0 {
            continue;
        }
        if best.is_none_or(|b| tv < b.value()) {
            best = Some(t);
        }
    }
    let t = best.ok_or(RayFailure::Miss)?;
    let point = ray.at(t);
    let coords = cone.cone_coords(point).map_err(|_| RayFailure::Miss)?;
    Ok(ConeHit { t, point, coords })
}

/// Vector Snell refraction of unit direction `d` at unit normal `n`, with
/// `eta = eta_incident / eta_transmitted`. The normal is flipped to face the
/// incident ray when needed.
pub fn refract<T: Real>(d: Vec3<T>, n: Vec3<T>, eta: f64) -> Result<Vec3<T>, RayFailure> {
    let mut n = n;
    let mut ci = -d.dot(n);
    if ci.value() < 0.0 {
        n = -n;
        ci = -ci;
    }
    let sin2_t = (T::one() - ci * ci).scale(eta * eta);
    if sin2_t.value() > 1.0 {
        return Err(RayFailure::TotalInternalReflection);
    }
    let ct = (T::one() - sin2_t).sqrt();
    Ok(d.scale_by(eta) + n * (ci.scale(eta) - ct))
}

impl<T: Real> Vec3<T> {
    fn scale_by(self, k: f64) -> Self {
        Vec3::new(self.x.scale(k), self.y.scale(k), self.z.scale(k))
    }
}

/// Rigid pose of a square checkerboard with `corners_per_side` inner corners
/// per side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoardPose {
    /// Board frame to camera frame.
    pub rotation: Mat3,
    /// Board center in the camera frame.
    pub translation: Vec3,
    pub square_size: f64,
    pub corners_per_side: u32,
}

impl BoardPose {
    pub fn new(rotation: Mat3, translation: Vec3, square_size: f64, corners_per_side: u32) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
            square_size,
            corners_per_side,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation.orthonormality_error() > 1e-9 || (self.rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(invalid("board rotation must be a proper rotation matrix"));
        }
        if !(self.square_size > 0.0) {
            return Err(invalid("square_size must be positive"));
        }
        if self.corners_per_side < 2 {
            return Err(invalid("a board needs at least 2 corners per side"));
        }
        Ok(())
    }

    /// Board-local coordinates of corner `(i, j)`, 1-based, centered.
    pub fn corner_local(&self, i: u32, j: u32) -> [f64; 2] {
        corner_local(self.square_size, self.corners_per_side, i, j)
    }

    pub fn frame<T: Real>(&self) -> PlaneFrame<T> {
        PlaneFrame {
            rotation: self.rotation.lift(),
            translation: self.translation.lift(),
        }
    }

    pub fn board_local_to_world(&self, x: [f64; 2]) -> Vec3 {
        self.translation + self.rotation.mul_vec(Vec3::new(x[0], x[1], 0.0))
    }

    pub fn world_to_board_local(&self, x: Vec3) -> Result<[f64; 2]> {
        world_to_board_local(&self.frame(), x).map_err(Error::from)
    }

    /// The pose with an axis-angle increment applied on the left and a
    /// translation increment added.
    pub fn perturbed<T: Real>(&self, increment: &[T; 6]) -> PlaneFrame<T> {
        let w = Vec3::new(increment[0], increment[1], increment[2]);
        let dt = Vec3::new(increment[3], increment[4], increment[5]);
        PlaneFrame {
            rotation: Mat3::from_axis_angle(w).mul_mat(&self.rotation.lift()),
            translation: self.translation.lift() + dt,
        }
    }

    pub fn apply_increment(&self, increment: &[f64; 6]) -> BoardPose {
        let f = self.perturbed(increment);
        BoardPose {
            rotation: f.rotation,
            translation: f.translation,
            ..*self
        }
    }
}

pub fn corner_local(square_size: f64, corners_per_side: u32, i: u32, j: u32) -> [f64; 2] {
    let mid = (corners_per_side as f64 + 1.0) * 0.5;
    [(i as f64 - mid) * square_size, (j as f64 - mid) * square_size]
}

/// Board plane as a rigid frame, generic for differentiation.
#[derive(Clone, Copy, Debug)]
pub struct PlaneFrame<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

/// Line-plane intersection at a positive ray parameter.
pub fn intersect_board<T: Real>(ray: &Ray<T>, frame: &PlaneFrame<T>) -> Result<Vec3<T>, RayFailure> {
    let n = frame.rotation.col(2);
    let denom = n.dot(ray.direction);
    if !(denom.value().abs() > 1e-12) {
        return Err(RayFailure::NoHit);
    }
    let lambda = n.dot(frame.translation - ray.origin) / denom;
    if !(lambda.value() > 0.0) {
        return Err(RayFailure::NoHit);
    }
    Ok(ray.at(lambda))
}

pub fn world_to_board_local<T: Real>(frame: &PlaneFrame<T>, x: Vec3<T>) -> Result<[T; 2], RayFailure> {
    let rel = x - frame.translation;
    if frame.rotation.col(2).dot(rel).value().abs() > 1e-9 {
        return Err(RayFailure::OffPlane);
    }
    Ok([frame.rotation.col(0).dot(rel), frame.rotation.col(1).dot(rel)])
}

/// Refraction state at the (unperturbed) outer surface.
#[derive(Clone, Copy, Debug)]
pub struct OuterHit<T = f64> {
    pub inner: ConeHit<T>,
    /// Direction inside the medium.
    pub inside: Vec3<T>,
    pub outer: ConeHit<T>,
}

impl OuterHit<f64> {
    pub fn lift<T: Real>(&self) -> OuterHit<T> {
        let hit = |h: &ConeHit<f64>| ConeHit {
            t: T::cst(h.t),
            point: h.point.lift(),
            coords: ConeCoords::new(T::cst(h.coords.s1), T::cst(h.coords.s2)),
        };
        OuterHit {
            inner: hit(&self.inner),
            inside: self.inside.lift(),
            outer: hit(&self.outer),
        }
    }
}

impl Ray<f64> {
    pub fn lift<T: Real>(&self) -> Ray<T> {
        Ray {
            origin: self.origin.lift(),
            direction: self.direction.lift(),
        }
    }
}

fn at(stage: Stage) -> impl Fn(RayFailure) -> TraceError {
    move |failure| TraceError { stage, failure }
}

/// Camera ray through the inner surface up to the outer surface.
pub fn trace_to_outer<T: Real>(
    intr: &CameraIntrinsics,
    cone: &ConeGeometry,
    p: [T; 2],
) -> Result<OuterHit<T>, TraceError> {
    let cam = pixel_to_ray(intr, p);
    let inner = intersect_cone(cone, &cam, Side::Inner).map_err(at(Stage::InnerIntersection))?;
    let n_i = cone.inner_normal(inner.point).map_err(at(Stage::InnerIntersection))?;
    let inside = refract(cam.direction, n_i, cone.eta_outside / cone.eta_inside).map_err(at(Stage::InnerRefraction))?;
    let ray_m = Ray {
        origin: inner.point,
        direction: inside,
    };
    let outer = intersect_cone(cone, &ray_m, Side::Outer).map_err(at(Stage::OuterIntersection))?;
    Ok(OuterHit { inner, inside, outer })
}

/// Outgoing ray given the offset jet at the exit point.
pub fn exit_ray<T: Real>(
    cone: &ConeGeometry,
    hit: &OuterHit<T>,
    jet: OffsetJet<T>,
) -> Result<Ray<T>, TraceError> {
    let n_o = cone.outer_normal(hit.outer.coords, jet).map_err(at(Stage::OuterRefraction))?;
    let dir = refract(hit.inside, n_o, cone.eta_inside / cone.eta_outside).map_err(at(Stage::OuterRefraction))?;
    Ok(Ray {
        origin: hit.outer.point,
        direction: dir,
    })
}

/// Ray after both refractions.
pub fn trace_ray<T: Real>(
    intr: &CameraIntrinsics,
    cone: &ConeGeometry,
    surface: &RbfSurface,
    p: [T; 2],
) -> Result<Ray<T>, TraceError> {
    let hit = trace_to_outer(intr, cone, p)?;
    exit_ray(cone, &hit, surface.offset_jet(hit.outer.coords))
}

/// Outgoing ray onto the board and into board-local coordinates.
pub fn ray_to_board<T: Real>(ray: &Ray<T>, frame: &PlaneFrame<T>) -> Result<[T; 2], TraceError> {
    let x_t = intersect_board(ray, frame).map_err(at(Stage::Board))?;
    world_to_board_local(frame, x_t).map_err(at(Stage::Board))
}

/// Full forward model generic over the scalar type.
pub fn raycast_generic<T: Real>(
    intr: &CameraIntrinsics,
    cone: &ConeGeometry,
    surface: &RbfSurface,
    frame: &PlaneFrame<T>,
    p: [T; 2],
) -> Result<[T; 2], TraceError> {
    let ray = trace_ray(intr, cone, surface, p)?;
    ray_to_board(&ray, frame)
}

/// Everything the forward model depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub intrinsics: CameraIntrinsics,
    pub cone: ConeGeometry,
    pub surface: RbfSurface,
    pub poses: Vec<BoardPose>,
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.cone.validate()?;
        if !self.surface.patch().fits_cone(&self.cone) {
            return Err(invalid("RBF patch must lie inside the cone coordinate domain"));
        }
        self.poses.iter().try_for_each(BoardPose::validate)
    }

    pub fn with_surface(&self, surface: RbfSurface) -> Self {
        Self {
            surface,
            ..self.clone()
        }
    }

    pub fn with_poses(&self, poses: Vec<BoardPose>) -> Self {
        Self { poses, ..self.clone() }
    }

    pub fn trace_through_cover(&self, p: [f64; 2]) -> Result<Ray> {
        trace_ray(&self.intrinsics, &self.cone, &self.surface, p).map_err(|trace| Error::Ray {
            image: None,
            pixel: p,
            trace,
        })
    }

    /// Board-local point seen through pixel `p` in image `k`.
    pub fn raycast(&self, k: usize, p: [f64; 2]) -> Result<[f64; 2]> {
        let pose = self
            .poses
            .get(k)
            .ok_or_else(|| invalid(format!("image index {k} out of range")))?;
        raycast_generic(&self.intrinsics, &self.cone, &self.surface, &pose.frame(), p).map_err(|trace| {
            Error::Ray {
                image: Some(k),
                pixel: p,
                trace,
            }
        })
    }
}

/// Board-local point under the plain pinhole model (no cover).
pub fn pinhole_raycast(intr: &CameraIntrinsics, pose: &BoardPose, p: [f64; 2]) -> Result<[f64; 2]> {
    let ray = pixel_to_ray(intr, p);
    ray_to_board(&ray, &pose.frame()).map_err(|trace| Error::Ray {
        image: None,
        pixel: p,
        trace,
    })
}

pub fn trace_through_cover(params: &SceneParams, p: [f64; 2]) -> Result<Ray> {
    params.trace_through_cover(p)
}

pub fn raycast(params: &SceneParams, k: usize, p: [f64; 2]) -> Result<[f64; 2]> {
    params.raycast(k, p)
}
