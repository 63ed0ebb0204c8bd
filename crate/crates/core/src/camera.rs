//! Pinhole camera with radial-tangential distortion, plus the bits of tag
//! geometry that only depend on the camera: object-frame corner layout and
//! pixel-area measurement.

use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Errors from camera-space geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraError {
    /// The point sits on or behind the image plane (z ≤ 1e-9). Callers must
    /// treat this as a failed factor evaluation — never clamp and continue,
    /// since a projection through z ≈ 0 produces garbage gradients.
    PointBehindCamera,
    /// Tag side length was zero or negative.
    NonPositiveSize,
}

impl fmt::Display for CameraError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CameraError::PointBehindCamera => write!(f, "point lies behind the camera"),
            CameraError::NonPositiveSize => write!(f, "tag size must be positive"),
        }
    }
}

impl std::error::Error for CameraError {}

/// Calibrated pinhole intrinsics.
///
/// `dist` holds radial-tangential coefficients `[k1, k2, p1, p2]` applied in
/// normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub dist: [f64; 4],
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, x_cam: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        if x_cam.z <= 1e-9 {
            return Err(CameraError::PointBehindCamera);
        }
        let xn = x_cam.x / x_cam.z;
        let yn = x_cam.y / x_cam.z;
        let (xd, yd) = self.distort(xn, yn);
        Ok(Vector2::new(self.fx * xd + self.cx, self.fy * yd + self.cy))
    }

    /// Projects a point and returns the 2×3 Jacobian of the pixel with
    /// respect to the camera-frame point.
    pub fn project_with_jacobian(
        &self,
        x_cam: &Vector3<f64>,
    ) -> Result<(Vector2<f64>, Matrix2x3<f64>), CameraError> {
        if x_cam.z <= 1e-9 {
            return Err(CameraError::PointBehindCamera);
        }
        let z = x_cam.z;
        let xn = x_cam.x / z;
        let yn = x_cam.y / z;
        let (xd, yd) = self.distort(xn, yn);

        let [k1, k2, p1, p2] = self.dist;
        let r2 = xn * xn + yn * yn;
        let radial = 1.0 + r2 * (k1 + k2 * r2);
        // d(radial)/d(r²) term shared by all four entries.
        let dr = k1 + 2.0 * k2 * r2;
        let d00 = radial + 2.0 * xn * xn * dr + 2.0 * p1 * yn + 6.0 * p2 * xn;
        let d11 = radial + 2.0 * yn * yn * dr + 6.0 * p1 * yn + 2.0 * p2 * xn;
        let d01 = 2.0 * xn * yn * dr + 2.0 * p1 * xn + 2.0 * p2 * yn;

        // Chain rule: pixel ← distorted ← normalized ← camera point.
        let m00 = self.fx * d00;
        let m01 = self.fx * d01;
        let m10 = self.fy * d01;
        let m11 = self.fy * d11;
        let jac = Matrix2x3::new(
            m00 / z,
            m01 / z,
            -(m00 * xn + m01 * yn) / z,
            m10 / z,
            m11 / z,
            -(m10 * xn + m11 * yn) / z,
        );
        Ok((
            Vector2::new(self.fx * xd + self.cx, self.fy * yd + self.cy),
            jac,
        ))
    }

    fn distort(&self, xn: f64, yn: f64) -> (f64, f64) {
        let [k1, k2, p1, p2] = self.dist;
        let r2 = xn * xn + yn * yn;
        let radial = 1.0 + r2 * (k1 + k2 * r2);
        let xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn);
        let yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn;
        (xd, yd)
    }

    /// Maps a pixel back to undistorted normalized image coordinates
    /// (the ray direction is `[x, y, 1]`). Inverts the distortion by fixed-point
    /// iteration, which converges fast for calibration-grade coefficients.
    pub fn undistort_to_normalized(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        let [k1, k2, p1, p2] = self.dist;
        let xd = (pixel.x - self.cx) / self.fx;
        let yd = (pixel.y - self.cy) / self.fy;
        let (mut xn, mut yn) = (xd, yd);
        for _ in 0..20 {
            let r2 = xn * xn + yn * yn;
            let radial = 1.0 + r2 * (k1 + k2 * r2);
            let tx = 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn);
            let ty = p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn;
            xn = (xd - tx) / radial;
            yn = (yd - ty) / radial;
        }
        Vector2::new(xn, yn)
    }

    /// Whether a pixel falls inside the sensor bounds.
    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.x < self.width as f64
            && pixel.y >= 0.0
            && pixel.y < self.height as f64
    }
}

/// Corner positions of a square tag in its own frame, in the fixed order
/// lower-left, lower-right, upper-right, upper-left:
/// `[-l/2,-l/2,0], [l/2,-l/2,0], [l/2,l/2,0], [-l/2,l/2,0]`.
///
/// The tag surface is its local z=0 plane with z pointing out of the face;
/// viewed from +z the polygon winds counter-clockwise.
pub fn tag_object_corners(l: f64) -> Result<[Vector3<f64>; 4], CameraError> {
    if l <= 0.0 {
        return Err(CameraError::NonPositiveSize);
    }
    let h = 0.5 * l;
    Ok([
        Vector3::new(-h, -h, 0.0),
        Vector3::new(h, -h, 0.0),
        Vector3::new(h, h, 0.0),
        Vector3::new(-h, h, 0.0),
    ])
}

/// Absolute shoelace area of a pixel quadrilateral.
pub fn pixel_area(corners: &[Vector2<f64>; 4]) -> f64 {
    let mut twice = 0.0;
    for i in 0..4 {
        let a = &corners[i];
        let b = &corners[(i + 1) % 4];
        twice += a.x * b.y - b.x * a.y;
    }
    0.5 * twice.abs()
}
