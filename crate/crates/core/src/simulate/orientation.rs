use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A 3D rotation stored as a unit quaternion `(w, x, y, z)`.
///
/// `q` and `-q` describe the same rotation; constructors canonicalize to
/// `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct Orientation {
    q: [f64; 4],
}

const NORM_TOL: f64 = 1e-9;

impl Orientation {
    pub const IDENTITY: Orientation = Orientation {
        q: [1.0, 0.0, 0.0, 0.0],
    };

    /// Normalizes `q`; errors if it is zero or not finite.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Precondition(format!("invalid quaternion {q:?}")));
        }
        let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
        Ok(Orientation {
            q: q.map(|v| sign * v / norm),
        })
    }

    /// Rotation by `angle` radians about `axis`.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Result<Self> {
        let norm = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Precondition("zero rotation axis".into()));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Self::from_quaternion([
            c,
            s * axis[0] / norm,
            s * axis[1] / norm,
            s * axis[2] / norm,
        ])
    }

    /// Uniform (Haar) draw over SO(3): a normalized 4D standard normal vector.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            if let Ok(o) = Self::from_quaternion(q) {
                return o;
            }
        }
    }

    pub fn quaternion(&self) -> [f64; 4] {
        self.q
    }

    /// Row-major rotation matrix `R`, acting as `v' = R v`.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let [w, x, y, z] = self.q;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        let m = self.matrix();
        std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
    }

    /// `R^T v`, the inverse rotation.
    pub fn rotate_inverse(&self, v: [f64; 3]) -> [f64; 3] {
        let m = self.matrix();
        std::array::from_fn(|i| m[0][i] * v[0] + m[1][i] * v[1] + m[2][i] * v[2])
    }
}

impl TryFrom<[f64; 4]> for Orientation {
    type Error = String;

    fn try_from(q: [f64; 4]) -> std::result::Result<Self, Self::Error> {
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(format!("quaternion {q:?} is not unit norm"));
        }
        // Already unit norm: keep the stored bits so JSON roundtrips exactly.
        let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
        Ok(Orientation {
            q: q.map(|v| sign * v),
        })
    }
}

impl From<Orientation> for [f64; 4] {
    fn from(o: Orientation) -> Self {
        o.q
    }
}
