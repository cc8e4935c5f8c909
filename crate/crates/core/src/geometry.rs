//! Refractive body: a thick cone slice whose outer surface carries a radial
//! RBF offset field.
//!
//! Both surfaces share one parameterization measured from the inner apex:
//! `s1` is the height above the apex (the camera `y` axis points down, so
//! `y = apex.y - s1`) and `s2` is the polar angle around the axis, zero on
//! the `+z` side of the YOZ plane. The inner radius is `s1 tan(alpha)` and the
//! outer radius is `s1 tan(alpha) + dr + phi(s')`, which is the same surface
//! as a second cone whose apex sits `dr / tan(alpha)` lower on the axis.

use serde::{Deserialize, Serialize};

use crate::dual::Real;
use crate::error::{invalid, Error, RayFailure, Result};
use crate::linalg::Vec3;

/// Which of the two cone surfaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Inner,
    Outer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeGeometry {
    /// Inner apex in the camera frame.
    #[serde(rename = "apex_m")]
    pub apex: Vec3,
    #[serde(rename = "half_angle_rad")]
    pub half_angle: f64,
    #[serde(rename = "height_m")]
    pub height: f64,
    /// Horizontal gap between the inner and outer surface at equal height.
    #[serde(rename = "radial_thickness_m")]
    pub radial_thickness: f64,
    pub eta_inside: f64,
    #[serde(default = "default_eta_outside")]
    pub eta_outside: f64,
}

fn default_eta_outside() -> f64 {
    1.0
}

impl Default for ConeGeometry {
    fn default() -> Self {
        Self {
            apex: Vec3::new(0.0, 0.60, -0.32),
            half_angle: 30f64.to_radians(),
            height: 0.65,
            radial_thickness: 0.003,
            eta_inside: 1.5,
            eta_outside: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeCoords<T = f64> {
    pub s1: T,
    pub s2: T,
}

impl<T: Real> ConeCoords<T> {
    pub fn new(s1: T, s2: T) -> Self {
        Self { s1, s2 }
    }

    pub fn value(self) -> ConeCoords<f64> {
        ConeCoords::new(self.s1.value(), self.s2.value())
    }
}

/// Radial offset and its partials with respect to the physical cone
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetJet<T = f64> {
    pub value: T,
    pub d_s1: T,
    pub d_s2: T,
}

impl<T: Real> OffsetJet<T> {
    pub fn zero() -> Self {
        Self {
            value: T::zero(),
            d_s1: T::zero(),
            d_s2: T::zero(),
        }
    }
}

impl ConeGeometry {
    pub fn new(
        apex: Vec3,
        half_angle: f64,
        height: f64,
        radial_thickness: f64,
        eta_inside: f64,
        eta_outside: f64,
    ) -> Result<Self> {
        let cone = Self {
            apex,
            half_angle,
            height,
            radial_thickness,
            eta_inside,
            eta_outside,
        };
        cone.validate()?;
        Ok(cone)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.apex.x, self.apex.y, self.apex.z]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(invalid("cone apex must be finite"));
        }
        if !(self.half_angle > 0.0 && self.half_angle < std::f64::consts::FRAC_PI_2) {
            return Err(invalid(format!(
                "half_angle_rad must be in (0, pi/2), got {}",
                self.half_angle
            )));
        }
        if !(self.height > 0.0) {
            return Err(invalid("height_m must be positive"));
        }
        if !(self.radial_thickness > 0.0) {
            return Err(invalid("radial_thickness_m must be positive"));
        }
        if !(self.eta_inside >= 1.0 && self.eta_outside >= 1.0) {
            return Err(invalid("refractive indices must be >= 1"));
        }
        Ok(())
    }

    pub fn tan_half_angle(&self) -> f64 {
        self.half_angle.tan()
    }

    /// Distance between the inner apex and the apex of the outer cone.
    pub fn outer_apex_offset(&self) -> f64 {
        self.radial_thickness / self.tan_half_angle()
    }

    /// Unperturbed radius of the chosen surface at height `s1`.
    pub fn base_radius<T: Real>(&self, s1: T, side: Side) -> T {
        let r = s1.scale(self.tan_half_angle());
        match side {
            Side::Inner => r,
            Side::Outer => r + T::cst(self.radial_thickness),
        }
    }

    /// Point on the chosen surface with an extra radial `offset`.
    pub fn point_with_offset<T: Real>(&self, s: ConeCoords<T>, side: Side, offset: T) -> Vec3<T> {
        let rho = self.base_radius(s.s1, side) + offset;
        let apex = self.apex.lift::<T>();
        apex + Vec3::new(rho * s.s2.sin(), -s.s1, rho * s.s2.cos())
    }

    /// Point on a surface; the RBF field only perturbs the outer cone.
    pub fn cone_point(&self, surface: Option<&RbfSurface>, s: ConeCoords, side: Side) -> Vec3 {
        let offset = match (side, surface) {
            (Side::Outer, Some(surf)) => surf.offset_at(s),
            _ => 0.0,
        };
        self.point_with_offset(s, side, offset)
    }

    /// Cone coordinates of a Cartesian point. The two surfaces share the
    /// parameterization, so the result does not depend on the side.
    pub fn cone_coords<T: Real>(&self, x: Vec3<T>) -> Result<ConeCoords<T>> {
        let s1 = T::cst(self.apex.y) - x.y;
        let tol = 1e-12;
        if s1.value() < -tol || s1.value() > self.height + tol {
            return Err(Error::OutOfRange(format!(
                "height {} outside [0, {}]",
                s1.value(),
                self.height
            )));
        }
        let s2 = (x.x - T::cst(self.apex.x)).atan2(x.z - T::cst(self.apex.z));
        Ok(ConeCoords::new(s1, s2))
    }

    /// Value of the implicit equation `rho^2 - r(s1)^2` for the unperturbed
    /// surface. Zero on the surface.
    pub fn implicit(&self, x: Vec3, side: Side) -> f64 {
        let dx = x.x - self.apex.x;
        let dz = x.z - self.apex.z;
        let r = self.base_radius(self.apex.y - x.y, side);
        dx * dx + dz * dz - r * r
    }

    /// Regular-cone normal at `x` on the inner surface, facing the axis.
    pub fn inner_normal<T: Real>(&self, x: Vec3<T>) -> Result<Vec3<T>, RayFailure> {
        let dx = x.x - T::cst(self.apex.x);
        let dz = x.z - T::cst(self.apex.z);
        let rho = (dx * dx + dz * dz).sqrt();
        if !(rho.value() > 1e-15) {
            return Err(RayFailure::SingularSurface);
        }
        let (sa, ca) = self.half_angle.sin_cos();
        let inv = T::one() / rho;
        Ok(-Vec3::new(dx * inv * T::cst(ca), T::cst(sa), dz * inv * T::cst(ca)))
    }

    pub fn inner_surface_normal(&self, x: Vec3) -> Result<Vec3> {
        self.inner_normal(x)
            .map_err(|_| Error::SingularSurface("inner normal at the cone apex".into()))
    }

    /// Outer-surface normal from the offset jet, as the normalized cross
    /// product of the partials of the surface point, oriented away from the
    /// axis.
    pub fn outer_normal<T: Real>(
        &self,
        s: ConeCoords<T>,
        jet: OffsetJet<T>,
    ) -> Result<Vec3<T>, RayFailure> {
        let rho = self.base_radius(s.s1, Side::Outer) + jet.value;
        if !(rho.value() > 0.0) {
            return Err(RayFailure::SingularSurface);
        }
        let rho1 = T::cst(self.tan_half_angle()) + jet.d_s1;
        let rho2 = jet.d_s2;
        let (sn, cs) = (s.s2.sin(), s.s2.cos());
        // dP/ds1 x dP/ds2 with dP/ds1 = (rho1 sin, -1, rho1 cos) and
        // dP/ds2 = (rho2 sin + rho cos, 0, rho2 cos - rho sin)
        let n = Vec3::new(rho * sn - rho2 * cs, rho1 * rho, rho * cs + rho2 * sn);
        let len = n.norm();
        if !(len.value() > 1e-300) {
            return Err(RayFailure::SingularSurface);
        }
        Ok(n * (T::one() / len))
    }

    pub fn outer_surface_normal(&self, surface: &RbfSurface, s: ConeCoords) -> Result<Vec3> {
        self.outer_normal(s, surface.offset_jet(s))
            .map_err(|_| Error::SingularSurface("degenerate outer surface partials".into()))
    }
}

/// Region of cone coordinates covered by the RBF grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RbfPatch {
    pub s1_min_m: f64,
    pub s1_max_m: f64,
    pub s2_min_rad: f64,
    pub s2_max_rad: f64,
}

impl Default for RbfPatch {
    /// The exit region of the default camera under the default cone, with a
    /// small margin.
    fn default() -> Self {
        let half = 4f64.to_radians();
        Self {
            s1_min_m: 0.585,
            s1_max_m: 0.625,
            s2_min_rad: -half,
            s2_max_rad: half,
        }
    }
}

impl RbfPatch {
    pub fn new(s1: [f64; 2], s2: [f64; 2]) -> Result<Self> {
        let p = Self {
            s1_min_m: s1[0],
            s1_max_m: s1[1],
            s2_min_rad: s2[0],
            s2_max_rad: s2[1],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let w1 = self.s1_max_m - self.s1_min_m;
        let w2 = self.s2_max_rad - self.s2_min_rad;
        if !(w1 > 0.0 && w1.is_finite()) || !(w2 > 0.0 && w2.is_finite()) {
            return Err(invalid("RBF patch ranges must be non-degenerate"));
        }
        Ok(())
    }

    pub fn fits_cone(&self, cone: &ConeGeometry) -> bool {
        use std::f64::consts::PI;
        self.s1_min_m >= 0.0
            && self.s1_max_m <= cone.height
            && self.s2_min_rad >= -PI
            && self.s2_max_rad <= PI
    }

    fn widths(&self) -> (f64, f64) {
        (
            self.s1_max_m - self.s1_min_m,
            self.s2_max_rad - self.s2_min_rad,
        )
    }

    /// Affine map sending the patch onto the unit square.
    pub fn normalize<T: Real>(&self, s: ConeCoords<T>) -> [T; 2] {
        let (w1, w2) = self.widths();
        [
            (s.s1 - T::cst(self.s1_min_m)).scale(1.0 / w1),
            (s.s2 - T::cst(self.s2_min_rad)).scale(1.0 / w2),
        ]
    }
}

/// Checked wrapper around [`RbfPatch::normalize`].
pub fn normalize_coords(patch: &RbfPatch, s: ConeCoords) -> Result<[f64; 2]> {
    patch.validate()?;
    Ok(patch.normalize(s))
}

/// Radial offset field: Gaussian kernels on a fixed regular grid over the
/// normalized patch, weighted by tunable amplitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct RbfSurface {
    patch: RbfPatch,
    rows: usize,
    cols: usize,
    beta: f64,
    amplitudes: Vec<f64>,
}

impl RbfSurface {
    /// `rows` centers along `s1`, `cols` along `s2`; amplitudes row-major.
    /// `beta` defaults to the product of the two grid spacings.
    pub fn new(
        patch: RbfPatch,
        rows: usize,
        cols: usize,
        beta: Option<f64>,
        amplitudes: Vec<f64>,
    ) -> Result<Self> {
        patch.validate()?;
        if rows < 2 || cols < 2 {
            return Err(invalid(format!(
                "RBF grid needs at least 2x2 centers, got {rows}x{cols}"
            )));
        }
        if amplitudes.len() != rows * cols {
            return Err(invalid(format!(
                "expected {} amplitudes for a {rows}x{cols} grid, got {}",
                rows * cols,
                amplitudes.len()
            )));
        }
        if amplitudes.iter().any(|a| !a.is_finite()) {
            return Err(invalid("amplitudes must be finite"));
        }
        let beta = beta.unwrap_or_else(|| default_beta(rows, cols));
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid("beta must be positive"));
        }
        Ok(Self {
            patch,
            rows,
            cols,
            beta,
            amplitudes,
        })
    }

    pub fn zeros(patch: RbfPatch, rows: usize, cols: usize) -> Result<Self> {
        Self::new(patch, rows, cols, None, vec![0.0; rows * cols])
    }

    /// Same centers and width with new amplitudes.
    pub fn with_amplitudes(&self, amplitudes: Vec<f64>) -> Result<Self> {
        Self::new(self.patch, self.rows, self.cols, Some(self.beta), amplitudes)
    }

    pub fn patch(&self) -> &RbfPatch {
        &self.patch
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }
    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    /// Normalized center of grid cell `(i, j)`.
    pub fn center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            i as f64 / (self.rows - 1) as f64,
            j as f64 / (self.cols - 1) as f64,
        ]
    }

    pub fn centers(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.rows).flat_map(move |i| (0..self.cols).map(move |j| self.center(i, j)))
    }

    /// Network output at a normalized point.
    pub fn offset<T: Real>(&self, s_norm: [T; 2]) -> T {
        let k = -0.5 / self.beta;
        let mut acc = T::zero();
        for (c, &a) in self.centers().zip(&self.amplitudes) {
            if a == 0.0 {
                continue;
            }
            let du = s_norm[0] - T::cst(c[0]);
            let dv = s_norm[1] - T::cst(c[1]);
            acc += (du * du + dv * dv).scale(k).exp().scale(a);
        }
        acc
    }

    pub fn offset_at(&self, s: ConeCoords) -> f64 {
        self.offset(self.patch.normalize(s))
    }

    /// Offset and its partials in physical cone coordinates.
    pub fn offset_jet<T: Real>(&self, s: ConeCoords<T>) -> OffsetJet<T> {
        let (w1, w2) = self.patch.widths();
        let [u, v] = self.patch.normalize(s);
        let k = -0.5 / self.beta;
        let mut jet = OffsetJet::zero();
        for (c, &a) in self.centers().zip(&self.amplitudes) {
            if a == 0.0 {
                continue;
            }
            let du = u - T::cst(c[0]);
            let dv = v - T::cst(c[1]);
            let g = (du * du + dv * dv).scale(k).exp().scale(a);
            jet.value += g;
            jet.d_s1 += g * du.scale(2.0 * k / w1);
            jet.d_s2 += g * dv.scale(2.0 * k / w2);
        }
        jet
    }

    /// Partials of `(phi, dphi/ds1, dphi/ds2)` with respect to each amplitude
    /// at `s`. Independent of the amplitudes because the field is linear in
    /// them.
    pub fn amplitude_basis(&self, s: ConeCoords) -> Vec<[f64; 3]> {
        let (w1, w2) = self.patch.widths();
        let [u, v] = self.patch.normalize(s);
        let k = -0.5 / self.beta;
        self.centers()
            .map(|c| {
                let du = u - c[0];
                let dv = v - c[1];
                let g = (k * (du * du + dv * dv)).exp();
                [g, g * 2.0 * k * du / w1, g * 2.0 * k * dv / w2]
            })
            .collect()
    }
}

/// Combines an amplitude basis with amplitudes into an offset jet.
pub fn jet_from_basis(basis: &[[f64; 3]], amplitudes: &[f64]) -> OffsetJet {
    let mut jet = OffsetJet::zero();
    for (b, &a) in basis.iter().zip(amplitudes) {
        jet.value += a * b[0];
        jet.d_s1 += a * b[1];
        jet.d_s2 += a * b[2];
    }
    jet
}

/// Product of the grid spacings in normalized units.
pub fn default_beta(rows: usize, cols: usize) -> f64 {
    1.0 / (((rows - 1) * (cols - 1)) as f64)
}
