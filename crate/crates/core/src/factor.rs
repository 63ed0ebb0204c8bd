//! Optimization variables and measurement factors.
//!
//! Three factor kinds cover everything the pipeline measures: an absolute
//! pose prior (unary), a relative pose prior (binary, used for odometry and
//! for pinning), and the tag projection factor (quaternary). Residuals are
//! always whitened — divided component-wise by the measurement σ — so the
//! optimizer never sees a noise model.
//!
//! A note on frames for the projection factor: the stored variables are
//! world-from-body, rig-from-camera, body-from-tag, and world-from-rig, so
//! the camera-frame corner position is
//! `C⁻¹ · G⁻¹ · B · T_tag · s` with C and G entering inverted.

use crate::camera::{tag_object_corners, CameraError, Intrinsics};
use crate::scene::Noise6;
use crate::se3::{right_jacobian_inv, skew, Pose, Twist};
use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix6, Vector2};
use std::fmt;

/// Frame index of a dynamic pose (derived from record order, not time math).
pub type Frame = u64;

/// Identity of one optimization variable. The derived ordering is the
/// deterministic iteration order used throughout; all static kinds sort
/// before the time-dependent one.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VariableKey {
    /// Camera extrinsics: rig-from-camera.
    CameraInRig { camera: String },
    /// Tag pose on its body: body-from-tag. Always static.
    TagInBody { tag: u32 },
    /// World pose of a static body.
    StaticBodyInWorld { body: String },
    /// World pose of a dynamic body at one frame.
    DynamicBodyInWorld { body: String, frame: Frame },
}

impl VariableKey {
    /// The frame index for time-dependent variables, `None` for static ones.
    pub fn frame(&self) -> Option<Frame> {
        match self {
            VariableKey::DynamicBodyInWorld { frame, .. } => Some(*frame),
            _ => None,
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self, VariableKey::DynamicBodyInWorld { .. })
    }
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VariableKey::CameraInRig { camera } => write!(f, "camera:{camera}"),
            VariableKey::TagInBody { tag } => write!(f, "tag:{tag}"),
            VariableKey::StaticBodyInWorld { body } => write!(f, "body:{body}"),
            VariableKey::DynamicBodyInWorld { body, frame } => write!(f, "body:{body}@{frame}"),
        }
    }
}

/// A measurement connecting 1–4 variables.
#[derive(Debug, Clone)]
pub enum Factor {
    /// Unary: the variable's pose was measured directly (configuration
    /// priors, pins on already-determined poses).
    AbsolutePrior {
        target: VariableKey,
        pose: Pose,
        noise: Noise6,
    },
    /// Binary: `a` relative to `b` was measured, i.e. the residual compares
    /// `b⁻¹ ∘ a` against `delta`. Odometry from frame t−1 to t uses
    /// a = pose@t, b = pose@t−1.
    RelativePrior {
        a: VariableKey,
        b: VariableKey,
        delta: Pose,
        noise: Noise6,
    },
    /// Quaternary: four detected corner pixels of one tag in one image.
    TagProjection {
        /// World-from-body for the body carrying the tag.
        body: VariableKey,
        /// Rig-from-camera extrinsics.
        camera: VariableKey,
        /// Body-from-tag.
        tag: VariableKey,
        /// World-from-rig for the body carrying the camera.
        rig: VariableKey,
        /// Measured pixels in object corner order.
        corners: [Vector2<f64>; 4],
        intrinsics: Intrinsics,
        tag_size: f64,
        pixel_noise: f64,
    },
}

/// Result of linearizing one factor: whitened residual plus the whitened
/// Jacobian block for each connected variable.
///
/// When a factor references the same variable through two roles (a tag
/// mounted on the camera's own rig makes `body` and `rig` the same key), the
/// key appears twice and consumers must sum the blocks.
pub struct FactorEval {
    pub residual: DVector<f64>,
    pub jacobians: Vec<(VariableKey, DMatrix<f64>)>,
}

/// Columns for diagnostics output, derived from a factor.
pub struct FactorDesc {
    pub kind: &'static str,
    pub camera: Option<String>,
    pub tag: Option<u32>,
    pub body: Option<String>,
}

fn key_body_name(key: &VariableKey) -> Option<String> {
    match key {
        VariableKey::StaticBodyInWorld { body } | VariableKey::DynamicBodyInWorld { body, .. } => {
            Some(body.clone())
        }
        _ => None,
    }
}

impl Factor {
    /// Residual dimension: 6 for pose priors, 8 for projections.
    pub fn dim(&self) -> usize {
        match self {
            Factor::AbsolutePrior { .. } | Factor::RelativePrior { .. } => 6,
            Factor::TagProjection { .. } => 8,
        }
    }

    /// Connected variables in the factor's canonical order. Keys can repeat
    /// when two roles resolve to the same variable.
    pub fn keys(&self) -> Vec<VariableKey> {
        match self {
            Factor::AbsolutePrior { target, .. } => vec![target.clone()],
            Factor::RelativePrior { a, b, .. } => vec![a.clone(), b.clone()],
            Factor::TagProjection {
                body, camera, tag, rig, ..
            } => vec![body.clone(), camera.clone(), tag.clone(), rig.clone()],
        }
    }

    /// Latest frame index among the connected variables, if any is dynamic.
    pub fn frame(&self) -> Option<Frame> {
        self.keys().iter().filter_map(|k| k.frame()).max()
    }

    pub fn describe(&self) -> FactorDesc {
        match self {
            Factor::AbsolutePrior { target, .. } => FactorDesc {
                kind: "absolute_prior",
                camera: match target {
                    VariableKey::CameraInRig { camera } => Some(camera.clone()),
                    _ => None,
                },
                tag: match target {
                    VariableKey::TagInBody { tag } => Some(*tag),
                    _ => None,
                },
                body: key_body_name(target),
            },
            Factor::RelativePrior { a, .. } => FactorDesc {
                kind: "relative_prior",
                camera: None,
                tag: None,
                body: key_body_name(a),
            },
            Factor::TagProjection {
                body, camera, tag, ..
            } => FactorDesc {
                kind: "tag_projection",
                camera: match camera {
                    VariableKey::CameraInRig { camera } => Some(camera.clone()),
                    _ => None,
                },
                tag: match tag {
                    VariableKey::TagInBody { tag } => Some(*tag),
                    _ => None,
                },
                body: key_body_name(body),
            },
        }
    }

    /// Whitened residual at the given variable values.
    pub fn residual(
        &self,
        get: &dyn Fn(&VariableKey) -> Pose,
    ) -> Result<DVector<f64>, CameraError> {
        match self {
            Factor::AbsolutePrior { target, pose, noise } => {
                let r = noise.whiten(&get(target).ominus(pose));
                Ok(DVector::from_column_slice(r.as_slice()))
            }
            Factor::RelativePrior { a, b, delta, noise } => {
                let rel = get(b).inverse().compose(&get(a));
                let r = noise.whiten(&rel.ominus(delta));
                Ok(DVector::from_column_slice(r.as_slice()))
            }
            Factor::TagProjection {
                body,
                camera,
                tag,
                rig,
                corners,
                intrinsics,
                tag_size,
                pixel_noise,
            } => {
                let world_from_body = get(body);
                let body_from_tag = get(tag);
                let cam_from_world = get(camera).inverse().compose(&get(rig).inverse());
                let object = tag_object_corners(*tag_size)?;
                let mut r = DVector::zeros(8);
                for (i, s) in object.iter().enumerate() {
                    let p_world = world_from_body.transform_point(&body_from_tag.transform_point(s));
                    let px = intrinsics.project(&cam_from_world.transform_point(&p_world))?;
                    let e = (px - corners[i]) / *pixel_noise;
                    r[2 * i] = e.x;
                    r[2 * i + 1] = e.y;
                }
                Ok(r)
            }
        }
    }

    /// Whitened residual and per-variable Jacobians at the given values.
    ///
    /// Jacobians are taken with respect to the twist of each variable under
    /// [`Pose::retract`] and match central finite differences.
    pub fn linearize(
        &self,
        get: &dyn Fn(&VariableKey) -> Pose,
    ) -> Result<FactorEval, CameraError> {
        match self {
            Factor::AbsolutePrior { target, pose, noise } => {
                let n = pose.inverse().compose(&get(target));
                let j = whiten_rows6(prior_jacobian(&n), noise);
                Ok(FactorEval {
                    residual: DVector::from_column_slice(noise.whiten(&twist_of(&n)).as_slice()),
                    jacobians: vec![(target.clone(), to_dmatrix6(&j))],
                })
            }
            Factor::RelativePrior { a, b, delta, noise } => {
                let ta = get(a);
                let tb = get(b);
                let p = tb.inverse().compose(&ta);
                let m = delta.inverse().compose(&p);

                let ja = whiten_rows6(prior_jacobian(&m), noise);

                // Perturbing b enters through both the inverse composition and
                // the rotation of the translation residual.
                let phi = m.rotation.log();
                let rd_t = delta.rotation.matrix().transpose();
                let mut jb = Matrix6::zeros();
                jb.fixed_view_mut::<3, 3>(0, 0)
                    .copy_from(&(-right_jacobian_inv(&phi) * p.rotation.matrix().transpose()));
                jb.fixed_view_mut::<3, 3>(3, 0)
                    .copy_from(&(rd_t * skew(&p.translation)));
                jb.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-rd_t));
                let jb = whiten_rows6(jb, noise);

                Ok(FactorEval {
                    residual: DVector::from_column_slice(noise.whiten(&twist_of(&m)).as_slice()),
                    jacobians: vec![(a.clone(), to_dmatrix6(&ja)), (b.clone(), to_dmatrix6(&jb))],
                })
            }
            Factor::TagProjection {
                body,
                camera,
                tag,
                rig,
                corners,
                intrinsics,
                tag_size,
                pixel_noise,
            } => {
                let tb = get(body);
                let tc = get(camera);
                let tt = get(tag);
                let tg = get(rig);
                let cam_from_world = tc.inverse().compose(&tg.inverse());

                let r_b = tb.rotation.matrix();
                let r_t = tt.rotation.matrix();
                let r_c_t = tc.rotation.matrix().transpose();
                let r_cw = cam_from_world.rotation.matrix();

                let object = tag_object_corners(*tag_size)?;
                let inv_sigma = 1.0 / *pixel_noise;

                let mut residual = DVector::zeros(8);
                let mut j_body = DMatrix::zeros(8, 6);
                let mut j_cam = DMatrix::zeros(8, 6);
                let mut j_tag = DMatrix::zeros(8, 6);
                let mut j_rig = DMatrix::zeros(8, 6);

                for (i, s) in object.iter().enumerate() {
                    let p_body = tt.transform_point(s);
                    let p_world = tb.transform_point(&p_body);
                    let p_rig = tg.inverse().transform_point(&p_world);
                    let q = cam_from_world.transform_point(&p_world);

                    let (px, dpi) = intrinsics.project_with_jacobian(&q)?;
                    let dpi = dpi * inv_sigma;
                    let e = (px - corners[i]) * inv_sigma;
                    residual[2 * i] = e.x;
                    residual[2 * i + 1] = e.y;

                    // world-from-body perturbation acts on the body-frame point.
                    let a: Matrix2x3<f64> = dpi * r_cw * r_b;
                    set_rows(&mut j_body, i, &(-a * skew(&p_body)), &a);

                    // body-from-tag perturbation acts on the object corner.
                    let a2: Matrix2x3<f64> = a * r_t;
                    set_rows(&mut j_tag, i, &(-a2 * skew(s)), &a2);

                    // world-from-rig enters inverted.
                    let a3: Matrix2x3<f64> = dpi * r_c_t;
                    set_rows(&mut j_rig, i, &(a3 * skew(&p_rig)), &(-a3));

                    // rig-from-camera enters inverted, acting directly on q.
                    set_rows(&mut j_cam, i, &(dpi * skew(&q)), &(-dpi));
                }

                Ok(FactorEval {
                    residual,
                    jacobians: vec![
                        (body.clone(), j_body),
                        (camera.clone(), j_cam),
                        (tag.clone(), j_tag),
                        (rig.clone(), j_rig),
                    ],
                })
            }
        }
    }
}

/// `[log(Rot(n)); Trans(n)]`, the raw (unwhitened) boxed difference of a
/// relative pose already formed.
fn twist_of(n: &Pose) -> Twist {
    let mut d = Twist::zeros();
    d.fixed_rows_mut::<3>(0).copy_from(&n.rotation.log());
    d.fixed_rows_mut::<3>(3).copy_from(&n.translation);
    d
}

/// Jacobian of `twist_of(n ∘ exp(δ))` with respect to δ at zero: the shared
/// form for the prior residual and the relative residual's first variable.
fn prior_jacobian(n: &Pose) -> Matrix6<f64> {
    let phi = n.rotation.log();
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&right_jacobian_inv(&phi));
    j.fixed_view_mut::<3, 3>(3, 3).copy_from(&n.rotation.matrix());
    j
}

fn whiten_rows6(mut j: Matrix6<f64>, noise: &Noise6) -> Matrix6<f64> {
    for r in 0..6 {
        let w = 1.0 / noise.sigmas[r];
        for c in 0..6 {
            j[(r, c)] *= w;
        }
    }
    j
}

fn to_dmatrix6(m: &Matrix6<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(6, 6, |r, c| m[(r, c)])
}

/// Writes the rotation and translation 2×3 halves of corner `i` into an
/// 8×6 projection Jacobian.
fn set_rows(j: &mut DMatrix<f64>, i: usize, rot: &Matrix2x3<f64>, trans: &Matrix2x3<f64>) {
    for r in 0..2 {
        for c in 0..3 {
            j[(2 * i + r, c)] = rot[(r, c)];
            j[(2 * i + r, c + 3)] = trans[(r, c)];
        }
    }
}
