//! Planar pose of a single tag from its four corners, and the two-solution
//! ambiguity analysis that decides whether the observation is trustworthy.
//!
//! A square tag seen through a perspective camera admits two pose
//! interpretations whose reprojections can be nearly identical — the plane
//! normal mirrored about the line of sight. Both candidates are recovered
//! from the homography, refined independently against the pixel
//! measurements, and compared: only when the best solution beats the
//! alternate decisively (or the viewing angle rules the flip out
//! geometrically) is the observation admitted.

use crate::camera::{tag_object_corners, Intrinsics};
use crate::factor::{Factor, VariableKey};
use crate::graph::Graph;
use crate::optimizer::{optimize, OptimizerConfig};
use crate::scene::{AmbiguityRule, SolverSettings};
use crate::se3::{Pose, Rotation};
use nalgebra::{Matrix3, Vector2, Vector3};
use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanarError {
    /// The four correspondences do not determine a homography (collinear or
    /// coincident points, non-finite coordinates).
    DegenerateConfiguration,
    /// Neither pose candidate puts the tag in front of the camera.
    NoValidPose,
}

impl fmt::Display for PlanarError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanarError::DegenerateConfiguration => {
                write!(f, "corner configuration does not determine a homography")
            }
            PlanarError::NoValidPose => {
                write!(f, "no pose candidate places the tag in front of the camera")
            }
        }
    }
}

impl std::error::Error for PlanarError {}

/// The two planar pose interpretations of one tag observation.
#[derive(Debug, Clone)]
pub struct AmbiguousPose {
    /// Tag-in-camera pose with the smaller reprojection error.
    pub best: Pose,
    /// The rival interpretation. Equal to `best` when the two refinements
    /// collapse into the same minimum.
    pub alternate: Pose,
    /// RMS reprojection error of `best`, pixels.
    pub err_best: f64,
    /// RMS reprojection error of `alternate`; infinite when the candidates
    /// collapsed, leaving no rival minimum at all.
    pub err_alt: f64,
    /// `err_best / err_alt`, in `[0, 1]`. Near 1 means the wrong solution
    /// explains the corners almost as well as the right one.
    pub ratio: f64,
    /// Angle in degrees between the camera ray to the tag center and the tag
    /// normal. Zero is head-on.
    pub view_angle: f64,
}

/// Direct linear transform for the plane-to-image homography, with Hartley
/// normalization of both point sets.
pub fn homography_from_4pts(
    obj: &[Vector2<f64>; 4],
    img: &[Vector2<f64>; 4],
) -> Result<Matrix3<f64>, PlanarError> {
    for p in obj.iter().chain(img.iter()) {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(PlanarError::DegenerateConfiguration);
        }
    }
    let t_obj = normalizing_similarity(obj)?;
    let t_img = normalizing_similarity(img)?;

    // One padding row of zeros makes the system square without touching its
    // null space, so the thin SVD exposes all nine right-singular vectors.
    let mut a = nalgebra::DMatrix::<f64>::zeros(9, 9);
    for i in 0..4 {
        let p = apply_similarity(&t_obj, &obj[i]);
        let q = apply_similarity(&t_img, &img[i]);
        let (x, y) = (p.x, p.y);
        let (u, v) = (q.x, q.y);
        a.row_mut(2 * i)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(2 * i + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    // Four exact correspondences leave exactly one vanishing singular value;
    // a vanishing second-smallest means the points were degenerate.
    let s = &svd.singular_values;
    if s[7] <= 1e-9 * s[0].max(1e-300) {
        return Err(PlanarError::DegenerateConfiguration);
    }
    let h = v_t.row(8);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);

    let mut full = t_img.try_inverse().expect("similarity is invertible") * hn * t_obj;
    if full[(2, 2)].abs() > 1e-12 {
        full /= full[(2, 2)];
    }
    Ok(full)
}

fn normalizing_similarity(pts: &[Vector2<f64>; 4]) -> Result<Matrix3<f64>, PlanarError> {
    let centroid = pts.iter().sum::<Vector2<f64>>() / 4.0;
    let mean_dist = pts.iter().map(|p| (p - centroid).norm()).sum::<f64>() / 4.0;
    if mean_dist <= 1e-12 {
        return Err(PlanarError::DegenerateConfiguration);
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(
        s,
        0.0,
        -s * centroid.x,
        0.0,
        s,
        -s * centroid.y,
        0.0,
        0.0,
        1.0,
    ))
}

fn apply_similarity(t: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(
        t[(0, 0)] * p.x + t[(0, 1)] * p.y + t[(0, 2)],
        t[(1, 0)] * p.x + t[(1, 1)] * p.y + t[(1, 2)],
    )
}

/// Decomposes a calibrated plane homography into the two pose candidates.
///
/// With the tag plane at z = 0, `H ∝ [r₁ r₂ t]`; the scale is the geometric
/// mean of the first two column norms, signed so the tag center lands in
/// front of the camera. The rival candidate mirrors the plane normal about
/// the line of sight to the tag center, which is where the second
/// reprojection minimum of a planar target lives.
pub fn pose_candidates_from_homography(
    h: &Matrix3<f64>,
) -> Result<(Pose, Pose), PlanarError> {
    let h1 = h.column(0).into_owned();
    let h2 = h.column(1).into_owned();
    let h3 = h.column(2).into_owned();

    let mut s = (h1.norm() * h2.norm()).sqrt();
    if s <= 1e-12 {
        return Err(PlanarError::DegenerateConfiguration);
    }
    if h3.z < 0.0 {
        s = -s;
    }
    let t = h3 / s;
    if t.z <= 0.0 {
        // h3.z == 0: the tag center sits in the camera plane.
        return Err(PlanarError::NoValidPose);
    }

    let r1 = h1 / s;
    let r2 = h2 / s;
    let r3 = r1.cross(&r2);
    let approx = Matrix3::from_columns(&[r1, r2, r3]);
    let rotation = nearest_rotation(&approx);

    // Mirror the tag normal about the unit ray to the tag center.
    let normal = rotation.rotate(&Vector3::z());
    let ray = t.normalize();
    let mirrored = 2.0 * ray.dot(&normal) * ray - normal;
    let axis = normal.cross(&mirrored);
    let alternate_rotation = if axis.norm() > 1e-9 {
        let angle = normal.dot(&mirrored).clamp(-1.0, 1.0).acos();
        Rotation::exp(&(axis.normalize() * angle)) * rotation
    } else {
        // Head-on: the mirror is the identity and the candidates coincide.
        rotation
    };

    Ok((Pose::new(rotation, t), Pose::new(alternate_rotation, t)))
}

fn nearest_rotation(m: &Matrix3<f64>) -> Rotation {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut flipped = u;
        flipped.column_mut(2).neg_mut();
        r = flipped * v_t;
    }
    Rotation::from_matrix(&r)
}

/// Full ambiguity analysis of one tag observation: homography, the two pose
/// candidates, per-candidate refinement against the pixel corners, and the
/// error-ratio / view-angle verdict inputs.
pub fn ambiguity_check(
    corners: &[Vector2<f64>; 4],
    intrinsics: &Intrinsics,
    tag_size: f64,
) -> Result<AmbiguousPose, PlanarError> {
    let object = tag_object_corners(tag_size).map_err(|_| PlanarError::DegenerateConfiguration)?;
    let obj_plane = object.map(|p| Vector2::new(p.x, p.y));
    let normalized = corners.map(|c| intrinsics.undistort_to_normalized(&c));

    let h = homography_from_4pts(&obj_plane, &normalized)?;
    let (cand_a, cand_b) = pose_candidates_from_homography(&h)?;

    let refined_a = refine_candidate(&cand_a, corners, intrinsics, tag_size);
    let refined_b = refine_candidate(&cand_b, corners, intrinsics, tag_size);
    let ((best, err_best), alt) = match (refined_a, refined_b) {
        (Some(a), Some(b)) => {
            if a.1 <= b.1 {
                (a, Some(b))
            } else {
                (b, Some(a))
            }
        }
        (Some(a), None) => (a, None),
        (None, Some(b)) => (b, None),
        (None, None) => return Err(PlanarError::NoValidPose),
    };

    // A rival only counts if refinement left it in a different minimum.
    let (alternate, err_alt) = match alt {
        Some((pose, err)) if best.ominus(&pose).norm() > 1e-3 => (pose, err),
        _ => (best, f64::INFINITY),
    };
    let ratio = if err_alt.is_finite() && err_alt > 0.0 {
        (err_best / err_alt).min(1.0)
    } else {
        0.0
    };

    let normal = best.rotation.rotate(&Vector3::z());
    let ray = best.translation.normalize();
    let view_angle = ray.dot(&normal).abs().clamp(0.0, 1.0).acos().to_degrees();

    Ok(AmbiguousPose {
        best,
        alternate,
        err_best,
        err_alt,
        ratio,
        view_angle,
    })
}

/// Polishes one candidate with the full camera model; returns the pose and
/// its RMS pixel error, or `None` if the candidate cannot explain the
/// corners from in front of the camera.
fn refine_candidate(
    candidate: &Pose,
    corners: &[Vector2<f64>; 4],
    intrinsics: &Intrinsics,
    tag_size: f64,
) -> Option<(Pose, f64)> {
    let body = VariableKey::StaticBodyInWorld {
        body: "world".into(),
    };
    let camera = VariableKey::CameraInRig {
        camera: "cam".into(),
    };
    let tag = VariableKey::TagInBody { tag: 0 };
    let rig = VariableKey::DynamicBodyInWorld {
        body: "rig".into(),
        frame: 0,
    };

    let mut g = Graph::new();
    g.ensure_variable(body.clone(), Pose::identity());
    g.ensure_variable(camera.clone(), Pose::identity());
    g.ensure_variable(rig.clone(), Pose::identity());
    g.ensure_variable(tag.clone(), *candidate);
    g.add_factor(Factor::TagProjection {
        body: body.clone(),
        camera: camera.clone(),
        tag: tag.clone(),
        rig: rig.clone(),
        corners: *corners,
        intrinsics: *intrinsics,
        tag_size,
        pixel_noise: 1.0,
    });

    let frozen: BTreeSet<VariableKey> = [body, camera, rig].into_iter().collect();
    let cfg = OptimizerConfig {
        max_iterations: 50,
        ..OptimizerConfig::default()
    };
    optimize(&mut g, &frozen, &cfg).ok()?;
    let pose = g.value(&tag)?;
    let rms = g.factor_error(0)? / (8.0f64).sqrt();
    Some((pose, rms))
}

/// The admission rule. An observation passes when its viewing angle puts it
/// beyond ambiguity altogether, or when the error ratio clears the
/// configured reading of the threshold.
pub fn is_unambiguous(a: &AmbiguousPose, settings: &SolverSettings) -> bool {
    let threshold = match settings.ambiguity_rule {
        AmbiguityRule::Decisive => 1.0 - settings.ambiguity_ratio_threshold,
        AmbiguityRule::Literal => settings.ambiguity_ratio_threshold,
    };
    !(a.ratio > threshold && a.view_angle < settings.max_ambiguous_view_angle_deg)
}
