//! Camera recovery: intrinsics from a single image (vanishing points or known
//! 3D points), then the relative pose of a second image from its epipolar
//! geometry with the first.

mod dlt;
mod fundamental;
mod pose;
mod vanishing;

pub use dlt::{calibrate_dlt, calibrate_dlt_with, decompose_projection, DltOptions};
pub use fundamental::{
    epipolar_distance, estimate_fundamental, estimate_fundamental_linear, refine_fundamental, symmetric_cost,
    FundamentalMatrix, RefineOutcome, FUNDAMENTAL_NULLITY_RATIO,
};
pub use pose::{extrinsics_from_fundamental, pose_candidates, relative_pose_from_pairs, resect_calibrated, PoseRoute, RelativePose};
pub use vanishing::{
    fit_vanishing_point, intrinsics_from_vanishing_points, intrinsics_from_vanishing_points_with_hint, Axis, LineSegment,
};

use nalgebra::{Matrix3, Matrix3x4, Point2, Point3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("inconsistent input: {0}")]
    Inconsistent(String),
    #[error("ambiguous solution: {0}")]
    Ambiguous(String),
}

impl CalibError {
    pub fn kind(&self) -> &'static str {
        match self {
            CalibError::InsufficientData(_) => "InsufficientData",
            CalibError::Degenerate(_) => "Degenerate",
            CalibError::Inconsistent(_) => "Inconsistent",
            CalibError::Ambiguous(_) => "Ambiguous",
        }
    }
}

pub type Result<T> = std::result::Result<T, CalibError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraStatus {
    Uncalibrated,
    IntrinsicsOnly,
    Full,
}

/// Pinhole camera `P = K [R | t]` mapping world points to pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    pub status: CameraStatus,
}

impl Camera {
    /// Placeholder for a freshly added image: focal length = longer side, principal point at the center.
    pub fn uncalibrated(width: u32, height: u32) -> Self {
        let f = width.max(height) as f64;
        Self {
            intrinsics: intrinsics_matrix(f, f, width as f64 / 2.0, height as f64 / 2.0, 0.0),
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            status: CameraStatus::Uncalibrated,
        }
    }

    pub fn full(intrinsics: Matrix3<f64>, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            intrinsics,
            rotation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(crate::linalg::nearest_rotation(&rotation))),
            translation,
            status: CameraStatus::Full,
        }
    }

    pub fn is_full(&self) -> bool {
        self.status == CameraStatus::Full
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn projection(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        rt.set_column(3, &self.translation);
        self.intrinsics * rt
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation_matrix().transpose() * self.translation))
    }

    pub fn to_camera(&self, x: &Point3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * x.coords + self.translation
    }

    /// Perspective projection; `None` for points on the principal plane.
    pub fn project(&self, x: &Point3<f64>) -> Option<Point2<f64>> {
        let p = self.intrinsics * self.to_camera(x);
        (p.z.abs() > f64::MIN_POSITIVE).then(|| Point2::new(p.x / p.z, p.y / p.z))
    }

    pub fn focal(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }

    pub fn principal_point(&self) -> Point2<f64> {
        Point2::new(self.intrinsics[(0, 2)], self.intrinsics[(1, 2)])
    }
}

pub fn intrinsics_matrix(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Matrix3<f64> {
    Matrix3::new(fx, skew, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
}
