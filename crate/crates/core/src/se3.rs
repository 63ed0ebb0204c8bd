//! Rotations, rigid-body poses, and the twist parametrization used by the
//! optimizer.
//!
//! The residual convention throughout the crate is the "boxed difference"
//! [`Pose::ominus`]: the rotation log of the relative pose stacked over the
//! *raw* relative translation (not the coupled SE(3) logarithm). The matching
//! update step is [`Pose::retract`], which is the exact inverse of `ominus`,
//! so `b.retract(&a.ominus(&b)) == a` up to roundoff for any pair of poses.
//! Twists are ordered rotation-first: `[ω_x, ω_y, ω_z, t_x, t_y, t_z]`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector6};

/// Rotation angles below this (radians) take the Taylor branches of
/// `exp`/`log`; the series agree with the closed forms to well below 1e-12
/// at the switch.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Minimal coordinates of a pose increment: `[ω; t]`, rotation first.
pub type Twist = Vector6<f64>;

/// The cross-product matrix: `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of the right Jacobian of SO(3) at rotation vector `phi`.
///
/// This maps a perturbation of the rotation vector to the corresponding
/// body-frame (right) tangent perturbation; it is what the chain rule
/// produces when differentiating `log` of a rotation with respect to a
/// right-multiplied increment. Finite for all `‖phi‖ < 2π`, in particular
/// well-behaved at π.
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let c = if theta2 < 1e-8 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        let half = 0.5 * theta;
        // 1/θ² − cot(θ/2)/(2θ); the cotangent form stays finite at θ = π.
        1.0 / theta2 - half.cos() / (2.0 * theta * half.sin())
    };
    let s = skew(phi);
    Matrix3::identity() + 0.5 * s + c * (s * s)
}

/// An element of SO(3), stored as a unit quaternion.
///
/// The quaternion is renormalized on every composition, so orthonormality
/// never drifts no matter how long a product chain gets.
#[derive(Clone, Copy, Debug)]
pub struct Rotation(UnitQuaternion<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Exponential map: rotation by angle `‖w‖` about axis `w/‖w‖`.
    pub fn exp(w: &Vector3<f64>) -> Self {
        let theta = w.norm();
        let (re, im) = if theta < SMALL_ANGLE {
            // cos(θ/2) and sin(θ/2)/θ expanded about zero.
            let t2 = theta * theta;
            (
                1.0 - t2 / 8.0 + t2 * t2 / 384.0,
                0.5 - t2 / 48.0 + t2 * t2 / 3840.0,
            )
        } else {
            let half = 0.5 * theta;
            (half.cos(), half.sin() / theta)
        };
        let q = Quaternion::from_parts(re, w * im);
        Rotation(UnitQuaternion::new_normalize(q))
    }

    /// Logarithm map, principal branch: the returned vector has norm ≤ π.
    ///
    /// Quaternion-based, so there is no singular direction at half-turns;
    /// at exactly π the axis sign is chosen by the stored quaternion.
    pub fn log(&self) -> Vector3<f64> {
        let q = self.0.quaternion();
        let (w, v) = if q.w < 0.0 {
            (-q.w, -q.imag())
        } else {
            (q.w, q.imag())
        };
        let s = v.norm();
        if s < 0.5 * SMALL_ANGLE {
            // θ = 2·atan(s/w); expand atan to keep precision for tiny angles.
            let u2 = (s / w) * (s / w);
            v * ((2.0 / w) * (1.0 - u2 / 3.0 + u2 * u2 / 5.0))
        } else {
            v * (2.0 * s.atan2(w) / s)
        }
    }

    /// Builds a rotation from quaternion components in `[x, y, z, w]` order,
    /// normalizing them. Returns `None` for a (near-)zero quaternion.
    pub fn from_quaternion_xyzw(x: f64, y: f64, z: f64, w: f64) -> Option<Self> {
        UnitQuaternion::try_new(Quaternion::new(w, x, y, z), 1e-12).map(Rotation)
    }

    /// Converts an orthonormal 3×3 matrix. The input is trusted to be a
    /// rotation; callers that start from a noisy estimate should
    /// orthonormalize first.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let r = nalgebra::Rotation3::from_matrix_unchecked(*m);
        Rotation(UnitQuaternion::from_rotation_matrix(&r))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    /// Quaternion components `[x, y, z, w]`, sign-canonicalized to `w ≥ 0`.
    pub fn quaternion_xyzw(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Angle of the relative rotation between `self` and `other`, in [0, π].
    pub fn angle_to(&self, other: &Self) -> f64 {
        self.0.angle_to(&other.0)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(UnitQuaternion::new_normalize(
            self.0.into_inner() * rhs.0.into_inner(),
        ))
    }
}

/// A rigid transform: `y = R·x + t`.
///
/// Written ᴮT_A, a pose maps coordinates expressed in frame A to coordinates
/// expressed in frame B; `compose` chains such maps right-to-left.
#[derive(Clone, Copy, Debug)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        let t = -rot_inv.rotate(&self.translation);
        Pose {
            rotation: rot_inv,
            translation: t,
        }
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(x) + self.translation
    }

    /// Boxed difference `self ⊖ other`: with N = other⁻¹ ∘ self, returns
    /// `[log(Rot(N)); Trans(N)]`. Note the translation is taken raw, not run
    /// through a coupled SE(3) logarithm.
    pub fn ominus(&self, other: &Pose) -> Twist {
        let n = other.inverse().compose(self);
        let w = n.rotation.log();
        let mut d = Twist::zeros();
        d.fixed_rows_mut::<3>(0).copy_from(&w);
        d.fixed_rows_mut::<3>(3).copy_from(&n.translation);
        d
    }

    /// Manifold update: `self ∘ (exp(ω), t)`. Exact inverse of [`Pose::ominus`],
    /// i.e. `b.retract(&a.ominus(&b))` reproduces `a`.
    pub fn retract(&self, delta: &Twist) -> Pose {
        let inc = Pose {
            rotation: Rotation::exp(&delta.fixed_rows::<3>(0).into_owned()),
            translation: delta.fixed_rows::<3>(3).into_owned(),
        };
        self.compose(&inc)
    }

    /// 4×4 homogeneous matrix form.
    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}
