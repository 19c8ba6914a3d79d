//! Small geometric vocabulary shared by the data model, featurization and
//! segmentation: 3-vectors, unit quaternions in (w, x, y, z) order, and
//! rigid part frames.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Quaternion stored as (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 4]> for Quat {
    fn from(q: [f64; 4]) -> Self {
        Quat::new(q[0], q[1], q[2], q[3])
    }
}

impl From<Quat> for [f64; 4] {
    fn from(q: Quat) -> Self {
        [q.w, q.x, q.y, q.z]
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Quat::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (angle / 2.0).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn normalized(&self) -> Option<Quat> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return None;
        }
        Some(self.scale(1.0 / n))
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    fn scale(&self, s: f64) -> Quat {
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    fn add(&self, o: &Quat) -> Quat {
        Quat::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }

    /// Hamilton product `self * o`.
    pub fn mul(&self, o: &Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotation angle between two orientations, `2 acos |q . q'|`, in [0, pi].
    ///
    /// Evaluated as `4 atan2(|q - q'|, |q + q'|)` on the same hemisphere,
    /// which is exact at zero where `acos` loses half the mantissa.
    pub fn angle_to(&self, o: &Quat) -> f64 {
        let o = if self.dot(o) < 0.0 { o.scale(-1.0) } else { *o };
        let diff = Quat::new(self.w - o.w, self.x - o.x, self.y - o.y, self.z - o.z).norm();
        let sum = self.add(&o).norm();
        4.0 * diff.atan2(sum)
    }

    /// Shortest-arc spherical interpolation; `t = 0` gives `a`, `t = 1` gives `b`
    /// (up to sign).
    pub fn slerp(a: &Quat, b: &Quat, t: f64) -> Quat {
        let mut cos = a.dot(b);
        let mut b = *b;
        if cos < 0.0 {
            b = b.scale(-1.0);
            cos = -cos;
        }
        if cos > 1.0 - 1e-12 {
            // nearly parallel: lerp and renormalize
            let q = a.scale(1.0 - t).add(&b.scale(t));
            return q.normalized().unwrap_or(*a);
        }
        let theta = cos.acos();
        let sin = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / sin;
        let wb = (t * theta).sin() / sin;
        a.scale(wa).add(&b.scale(wb))
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Rigid coordinate frame: origin plus orthonormal axes (columns of `axes`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub origin: Vec3,
    pub axes: Matrix3<f64>,
}

impl Frame {
    pub fn identity() -> Self {
        Frame {
            origin: Vec3::zeros(),
            axes: Matrix3::identity(),
        }
    }

    pub fn is_orthonormal(&self) -> bool {
        let g = self.axes.transpose() * self.axes;
        (g - Matrix3::identity()).amax() <= UNIT_TOLERANCE
    }

    pub fn check(&self) -> Result<()> {
        if self.is_orthonormal() && self.origin.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::DegenerateFrame)
        }
    }

    /// Expresses a world point in this frame's axes relative to `center`.
    pub fn to_local(&self, center: &Vec3, p: &Vec3) -> Vec3 {
        self.axes.transpose() * (p - center)
    }
}

pub fn centroid<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Vec3> {
    let mut sum = Vec3::zeros();
    let mut n = 0usize;
    for p in points {
        sum += p;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

pub fn covariance<'a>(points: impl IntoIterator<Item = &'a Vec3> + Clone) -> Option<(Vec3, Matrix3<f64>)> {
    let c = centroid(points.clone())?;
    let mut cov = Matrix3::zeros();
    let mut n = 0usize;
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
        n += 1;
    }
    Some((c, cov / n as f64))
}

/// Eigen-decomposition of a symmetric 3x3 matrix with eigenpairs sorted by
/// decreasing eigenvalue.
pub fn sorted_eigen(m: &Matrix3<f64>) -> ([f64; 3], [Vec3; 3]) {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.map(|i| eig.eigenvalues[i]);
    let vecs = order.map(|i| eig.eigenvectors.column(i).into_owned());
    (vals, vecs)
}

/// Principal-axis frame of a point set, centred on its centroid.
///
/// The third axis (least variance) is oriented toward `viewpoint`, the first
/// axis so its largest-magnitude component is positive, and the second
/// completes a right-handed basis.
pub fn principal_frame(points: &[Vec3], viewpoint: &Vec3) -> Option<Frame> {
    let (c, cov) = covariance(points.iter())?;
    let (_, vecs) = sorted_eigen(&cov);
    let mut e1 = vecs[0];
    let mut e3 = vecs[2];
    if e3.dot(&(viewpoint - c)) < 0.0 {
        e3 = -e3;
    }
    let lead = e1.iamax();
    if e1[lead] < 0.0 {
        e1 = -e1;
    }
    // re-orthogonalize e1 against e3 before completing the basis
    e1 = (e1 - e3 * e3.dot(&e1)).normalize();
    let e2 = e3.cross(&e1);
    Some(Frame {
        origin: c,
        axes: Matrix3::from_columns(&[e1, e2, e3]),
    })
}
