//! Pinhole intrinsics, rigid poses, the SE(3) exponential/logarithm, rigid
//! reprojection of target pixels into a source view, and the pixel-space
//! fundamental matrix.
//!
//! A [`Pose`] maps target-camera coordinates into source-camera coordinates:
//! `X_s = R X_t + t`. That is the transform used to reproject a target pixel
//! with known depth into the source image.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::grid::{DepthMap, FlowField, ScalarMap};

/// Below this rotation angle the closed forms switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-8;
/// Translations shorter than this make the epipolar geometry degenerate.
pub const PURE_ROTATION_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !(fx.is_finite() && fy.is_finite()) {
            return Err(Error::Contract(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::Contract("principal point must be finite".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Ray `K^-1 [u, v, 1]^T` with unit z.
    #[inline]
    pub fn back_project(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Jacobian of [`Intrinsics::project`] with respect to the 3D point.
    #[inline]
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> [[f64; 3]; 2] {
        let iz = 1.0 / p.z;
        [
            [self.fx * iz, 0.0, -self.fx * p.x * iz * iz],
            [0.0, self.fy * iz, -self.fy * p.y * iz * iz],
        ]
    }
}

/// 6-vector `(omega, nu)`: axis-angle rotation (radians) followed by translation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist(pub [f64; 6]);

impl Twist {
    pub fn zero() -> Self {
        Twist([0.0; 6])
    }

    pub fn new(omega: [f64; 3], nu: [f64; 3]) -> Self {
        Twist([omega[0], omega[1], omega[2], nu[0], nu[1], nu[2]])
    }

    pub fn omega(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn nu(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn scaled(&self, s: f64) -> Twist {
        Twist(self.0.map(|v| v * s))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rigid transform `X -> R X + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking `R^T R = I` and `det R = 1` within `1e-9`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-9 && (det - 1.0).abs() <= 1e-9) {
            return Err(Error::Contract(format!(
                "not a rotation matrix (orthogonality error {ortho:e}, det {det})"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("translation must be finite".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// From a row-major rotation and a translation.
    pub fn from_parts(r: &[f64; 9], t: &[f64; 3]) -> Result<Self> {
        Pose::new(Matrix3::from_row_slice(r), Vector3::from_column_slice(t))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `exp(delta) * self`, the update used for twist gradients and refinement.
    pub fn left_perturbed(&self, delta: &Twist) -> Pose {
        se3_exp(delta).compose(self)
    }

    /// Rotation angle of `R`, in radians.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = 0.5 * vee(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + w * a + w * w * b
}

/// Exponential map from a twist to a rigid transform (closed form).
pub fn se3_exp(xi: &Twist) -> Pose {
    let omega = xi.omega();
    let nu = xi.nu();
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(&omega);
    let (a, b, c) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            theta.sin() / theta,
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let w2 = w * w;
    let rotation = Matrix3::identity() + w * a + w2 * b;
    let v = Matrix3::identity() + w * b + w2 * c;
    Pose {
        rotation,
        translation: v * nu,
    }
}

pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let axis_sin = 0.5 * vee(&(r - r.transpose()));
    let s = axis_sin.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if std::f64::consts::PI - theta < 1e-12 {
        return Err(Error::LogAtPi);
    }
    if theta < SMALL_ANGLE {
        // R - R^T = 2 sin(theta) W, sin(theta)/theta ~ 1 - theta^2/6
        return Ok(axis_sin * (1.0 + theta * theta / 6.0));
    }
    if theta < 3.0 {
        return Ok(axis_sin * (theta / s));
    }
    // Near pi the antisymmetric part vanishes; read the axis from the symmetric part.
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * c;
    let k = (0..3)
        .max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)]))
        .unwrap();
    let mut axis: Vector3<f64> = sym.column(k).into();
    axis /= axis.norm();
    if axis.dot(&axis_sin) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Logarithm of a rigid transform; fails when the rotation angle is pi.
pub fn se3_log(pose: &Pose) -> Result<Twist> {
    let omega = so3_log(&pose.rotation)?;
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(&omega);
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    let v_inv = Matrix3::identity() - w * 0.5 + w * w * d;
    let nu = v_inv * pose.translation;
    Ok(Twist([
        omega.x, omega.y, omega.z, nu.x, nu.y, nu.z,
    ]))
}

/// Reprojected location of a target pixel in the source view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    /// `p_s'`, pixel coordinates in the source image.
    pub pixel: Vector2<f64>,
    /// Point in source-camera coordinates; `point.z` is the source depth Z'.
    pub point: Vector3<f64>,
    /// `false` when Z' <= 0 (behind the source camera).
    pub in_front: bool,
}

/// `p_s' = pi(K (R D K^-1 [p, 1] + t))`.
pub fn reproject(p: Vector2<f64>, depth: f64, pose: &Pose, k: &Intrinsics) -> Reprojection {
    let x_t = k.back_project(p.x, p.y) * depth;
    let x_s = pose.transform(&x_t);
    let in_front = x_s.z > 0.0;
    let pixel = if in_front {
        k.project(&x_s)
    } else {
        Vector2::new(f64::NAN, f64::NAN)
    };
    Reprojection {
        pixel,
        point: x_s,
        in_front,
    }
}

/// Partial derivatives of a reprojected pixel.
#[derive(Debug, Clone, Copy)]
pub struct ReprojectionJacobian {
    /// d p_s' / d depth.
    pub depth: Vector2<f64>,
    /// d p_s' / d delta for the left perturbation `exp(delta) * T`; columns follow the twist order.
    pub twist: [[f64; 6]; 2],
}

pub fn reproject_jacobian(
    p: Vector2<f64>,
    pose: &Pose,
    k: &Intrinsics,
    point: &Vector3<f64>,
) -> ReprojectionJacobian {
    let jp = k.project_jacobian(point);
    let ray = pose.rotation * k.back_project(p.x, p.y);
    let mut depth = Vector2::zeros();
    for r in 0..2 {
        depth[r] = jp[r][0] * ray.x + jp[r][1] * ray.y + jp[r][2] * ray.z;
    }
    // d X_s / d delta = [-[X_s]x | I]
    let sx = skew(point);
    let mut twist = [[0.0; 6]; 2];
    for r in 0..2 {
        for c in 0..3 {
            twist[r][c] = -(jp[r][0] * sx[(0, c)] + jp[r][1] * sx[(1, c)] + jp[r][2] * sx[(2, c)]);
            twist[r][c + 3] = jp[r][c];
        }
    }
    ReprojectionJacobian { depth, twist }
}

/// Rigid flow `reproject(p) - p` and a validity map (0 where the point falls behind the source camera).
pub fn rigid_flow(depth: &DepthMap, pose: &Pose, k: &Intrinsics) -> (FlowField, ScalarMap) {
    let (w, h) = (depth.width(), depth.height());
    let mut u = vec![0.0; w * h];
    let mut v = vec![0.0; w * h];
    let mut valid = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let p = Vector2::new(x as f64, y as f64);
            let r = reproject(p, depth.get(x, y), pose, k);
            if r.in_front {
                u[i] = r.pixel.x - p.x;
                v[i] = r.pixel.y - p.y;
                valid[i] = 1.0;
            }
        }
    }
    (
        FlowField::new(w, h, u, v).expect("finite rigid flow"),
        ScalarMap::new(w, h, valid).expect("consistent dimensions"),
    )
}

/// Pixel-space fundamental matrix `K^-T [t]x R K^-1`, normalized to unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fundamental {
    matrix: Matrix3<f64>,
    /// Frobenius norm before normalization.
    raw_norm: f64,
    pure_rotation: bool,
}

impl Fundamental {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    /// Set when `||t|| < 1e-12`; the matrix is zero and epipolar losses are skipped.
    pub fn is_pure_rotation(&self) -> bool {
        self.pure_rotation
    }

    /// Algebraic residual `[p_s, 1] F [p_t, 1]^T`.
    #[inline]
    pub fn residual(&self, p_t: Vector2<f64>, p_s: Vector2<f64>) -> f64 {
        let l = self.line(p_t);
        p_s.x * l.x + p_s.y * l.y + l.z
    }

    /// Epipolar line `F [p_t, 1]^T` in the source image.
    #[inline]
    pub fn line(&self, p_t: Vector2<f64>) -> Vector3<f64> {
        self.matrix * Vector3::new(p_t.x, p_t.y, 1.0)
    }

    /// Derivatives of the normalized matrix under the left perturbation `exp(delta) * T`,
    /// one 3x3 matrix per twist component.
    pub fn twist_derivatives(&self, pose: &Pose, k: &Intrinsics) -> [Matrix3<f64>; 6] {
        let mut out = [Matrix3::zeros(); 6];
        if self.pure_rotation {
            return out;
        }
        let kinv = k.inverse_matrix();
        let kinv_t = kinv.transpose();
        let r = pose.rotation;
        let t = pose.translation;
        let tx = skew(&t);
        for (i, d) in out.iter_mut().enumerate() {
            let mut e = Vector3::zeros();
            let de = if i < 3 {
                e[i] = 1.0;
                let wx = skew(&e);
                // R' = (I + [w]x) R, t' = t + w x t
                skew(&e.cross(&t)) * r + tx * wx * r
            } else {
                e[i - 3] = 1.0;
                skew(&e) * r
            };
            let dun = kinv_t * de * kinv / self.raw_norm;
            let along = self.matrix.component_mul(&dun).sum();
            *d = dun - self.matrix * along;
        }
        out
    }
}

pub fn fundamental_matrix(pose: &Pose, k: &Intrinsics) -> Fundamental {
    let t = pose.translation;
    if t.norm() < PURE_ROTATION_EPS {
        return Fundamental {
            matrix: Matrix3::zeros(),
            raw_norm: 0.0,
            pure_rotation: true,
        };
    }
    let kinv = k.inverse_matrix();
    let raw = kinv.transpose() * skew(&t) * pose.rotation * kinv;
    let raw_norm = raw.norm();
    Fundamental {
        matrix: raw / raw_norm,
        raw_norm,
        pure_rotation: false,
    }
}
