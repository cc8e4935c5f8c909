//! Small fixed-size vector and rotation types generic over [`Real`].

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::dual::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec3<T = f64> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn normalized(self) -> Self {
        self * (T::one() / self.norm())
    }

    pub fn value(self) -> Vec3<f64> {
        Vec3::new(self.x.value(), self.y.value(), self.z.value())
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }
}

impl Vec3<f64> {
    pub fn lift<T: Real>(self) -> Vec3<T> {
        Vec3::new(T::cst(self.x), T::cst(self.y), T::cst(self.z))
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, k: T) -> Self {
        Self::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T = f64> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            m: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn col(&self, j: usize) -> Vec3<T> {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        let r = |i: usize| self.m[i][0] * v.x + self.m[i][1] * v.y + self.m[i][2] * v.z;
        Vec3::new(r(0), r(1), r(2))
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut m = [[T::zero(); 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = self.m[i][0] * o.m[0][j] + self.m[i][1] * o.m[1][j] + self.m[i][2] * o.m[2][j];
            }
        }
        Self { m }
    }

    pub fn transpose(&self) -> Self {
        let mut m = self.m;
        for (i, row) in m.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = self.m[j][i];
            }
        }
        Self { m }
    }

    /// Rodrigues' formula. The trigonometric ratios fall back to their Taylor
    /// series near zero so that derivatives stay finite at the identity.
    pub fn from_axis_angle(w: Vec3<T>) -> Self {
        let theta2 = w.norm_squared();
        let (a, b) = if theta2.value() < 1e-8 {
            // sin(t)/t and (1 - cos t)/t^2
            (
                T::one() - theta2.scale(1.0 / 6.0) + theta2 * theta2.scale(1.0 / 120.0),
                T::cst(0.5) - theta2.scale(1.0 / 24.0) + theta2 * theta2.scale(1.0 / 720.0),
            )
        } else {
            let theta = theta2.sqrt();
            (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
        };
        let k = [
            [T::zero(), -w.z, w.y],
            [w.z, T::zero(), -w.x],
            [-w.y, w.x, T::zero()],
        ];
        let mut m = Self::identity().m;
        for i in 0..3 {
            for j in 0..3 {
                let mut kk = T::zero();
                for (l, kl) in k.iter().enumerate() {
                    kk += k[i][l] * kl[j];
                }
                m[i][j] += a * k[i][j] + b * kk;
            }
        }
        Self { m }
    }
}

impl Mat3<f64> {
    pub fn lift<T: Real>(&self) -> Mat3<T> {
        Mat3 {
            m: self.m.map(|row| row.map(T::cst)),
        }
    }

    pub fn from_row_major(r: [f64; 9]) -> Self {
        Self {
            m: [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]],
        }
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Max deviation of `R^T R` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.transpose().mul_mat(self);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((p.m[i][j] - target).abs());
            }
        }
        err
    }

    /// Inverse of [`Mat3::from_axis_angle`] for rotation matrices.
    pub fn to_axis_angle(&self) -> Vec3<f64> {
        let m = &self.m;
        let cos = ((m[0][0] + m[1][1] + m[2][2] - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos.acos();
        let v = Vec3::new(m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]);
        if theta < 1e-7 {
            return v * 0.5;
        }
        if std::f64::consts::PI - theta < 1e-6 {
            // axis from the symmetric part
            let xx = ((m[0][0] + 1.0) * 0.5).max(0.0).sqrt();
            let yy = ((m[1][1] + 1.0) * 0.5).max(0.0).sqrt().copysign(m[0][1] + m[1][0]);
            let zz = ((m[2][2] + 1.0) * 0.5).max(0.0).sqrt().copysign(m[0][2] + m[2][0]);
            return Vec3::new(xx, yy, zz).normalized() * theta;
        }
        v * (theta / (2.0 * theta.sin()))
    }
}
