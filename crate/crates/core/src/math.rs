//! Small fixed-size geometry helpers shared by the decoders and renderers.
//!
//! Quaternions are stored as `[w, x, y, z]`. Symmetric 2x2 matrices are stored
//! as `[a, b, c]` meaning `[[a, b], [b, c]]`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Quat = [f64; 4];
pub type Sym2 = [f64; 3];

/// Rotation matrix of a unit quaternion.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on the entries of `quat_to_matrix(q)` back onto `q`.
pub fn quat_to_matrix_backward(q: &Quat, d_r: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| d_r[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    [dw, dx, dy, dz]
}

/// Normalizes a raw quaternion. A zero quaternion maps to the identity.
pub fn normalize_quat(raw: &Quat) -> Quat {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n]
    }
}

/// Backward of [`normalize_quat`]. The zero quaternion has zero gradient.
pub fn normalize_quat_backward(raw: &Quat, d_q: &Quat) -> Quat {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return [0.0; 4];
    }
    let q = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
    let dot: f64 = (0..4).map(|i| q[i] * d_q[i]).sum();
    [
        (d_q[0] - q[0] * dot) / n,
        (d_q[1] - q[1] * dot) / n,
        (d_q[2] - q[2] * dot) / n,
        (d_q[3] - q[3] * dot) / n,
    ]
}

/// `Rᵀ diag(scale²) R`.
pub fn covariance_from_scale_rotation(scale: &[f64; 3], q: &Quat) -> Matrix3<f64> {
    let r = quat_to_matrix(q);
    let s2 = Matrix3::from_diagonal(&Vector3::new(
        scale[0] * scale[0],
        scale[1] * scale[1],
        scale[2] * scale[2],
    ));
    let cov = r.transpose() * s2 * r;
    // exact symmetry regardless of rounding
    (cov + cov.transpose()) * 0.5
}

/// Backward of [`covariance_from_scale_rotation`] for a symmetric upstream gradient.
pub fn covariance_backward(scale: &[f64; 3], q: &Quat, d_cov: &Matrix3<f64>) -> ([f64; 3], Quat) {
    let g = (d_cov + d_cov.transpose()) * 0.5;
    let r = quat_to_matrix(q);
    let rgr = r * g * r.transpose();
    let d_scale = [
        2.0 * scale[0] * rgr[(0, 0)],
        2.0 * scale[1] * rgr[(1, 1)],
        2.0 * scale[2] * rgr[(2, 2)],
    ];
    let s2 = Matrix3::from_diagonal(&Vector3::new(
        scale[0] * scale[0],
        scale[1] * scale[1],
        scale[2] * scale[2],
    ));
    let d_r = s2 * r * g * 2.0;
    (d_scale, quat_to_matrix_backward(q, &d_r))
}

/// Inverse of a symmetric 2x2 matrix; `None` when singular.
pub fn sym2_inverse(m: &Sym2) -> Option<Sym2> {
    let det = m[0] * m[2] - m[1] * m[1];
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    Some([m[2] / det, -m[1] / det, m[0] / det])
}

/// Rigid pose. `orientation` rotates sensor-frame vectors into the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub orientation: Quat,
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            position: [0.0; 3],
            orientation: [1.0, 0.0, 0.0, 0.0],
        }
    }
}

impl Pose {
    pub fn new(position: [f64; 3], orientation: Quat) -> Self {
        Self {
            position,
            orientation: normalize_quat(&orientation),
        }
    }

    /// Sensor-to-world rotation.
    pub fn rotation(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.orientation)
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn world_to_sensor(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.center())
    }

    pub fn sensor_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.center()
    }

    /// Camera pose looking at `target` (OpenCV axes: x right, y down, z forward).
    pub fn look_at(position: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Self {
        let pos = Vector3::from(position);
        let forward = (Vector3::from(target) - pos).normalize();
        let mut right = forward.cross(&Vector3::from(up));
        if right.norm() < 1e-9 {
            right = forward.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let m = Matrix3::from_columns(&[right, down, forward]);
        Self::from_rotation(position, &m)
    }

    pub fn from_rotation(position: [f64; 3], m: &Matrix3<f64>) -> Self {
        let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
        let q = uq.quaternion();
        Self::new(position, [q.w, q.i, q.j, q.k])
    }
}
