//! Stereo triangulation of 2D keypoint pairs and first-order propagation of
//! the 2D keypoint covariances into 3D joint covariances.
//!
//! Triangulation is the homogeneous DLT: for each joint the two cameras
//! contribute two rows each (`u·P₃ − P₁`, `v·P₃ − P₂`) to a 4×4 constraint
//! matrix whose right singular vector of smallest singular value is the
//! homogeneous 3D point. The 3×4 Jacobian of that point with respect to the
//! stacked pixel coordinates `(u₁, v₁, u₂, v₂)` is taken by central finite
//! differences and pushed through `Jac · C₄ · Jacᵀ`, where `C₄` carries both
//! cameras' 2×2 covariances and their cross-covariance.

use std::io::Read;

use nalgebra::{Matrix2, Matrix3, Matrix3x4, Matrix4, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::serde_util;

/// Default isotropic inflation (m) added to every propagated covariance.
pub const DEFAULT_SIGMA_ISO: f64 = 0.01;
/// Central-difference step for the triangulation Jacobian (pixels).
pub const JACOBIAN_STEP_PX: f64 = 1e-4;
/// Minimum number of residual pairs for a cross-covariance estimate.
pub const MIN_CROSS_COV_PAIRS: usize = 30;
/// Two smallest singular values closer than this (relative to the largest)
/// mean the rays are near-parallel.
pub const DEGENERACY_RTOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("joint {joint}: rays are near-parallel, point cannot be triangulated")]
    DegenerateGeometry { joint: usize },
    #[error("joint {joint}: finite-difference Jacobian hit degenerate geometry")]
    NonFiniteJacobian { joint: usize },
    #[error("insufficient data: need {needed} residual pairs, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("invalid camera {id}: {reason}")]
    InvalidCamera { id: u8, reason: String },
    #[error("joint count mismatch: {what}")]
    JointCountMismatch { what: String },
    #[error("camera document: {0}")]
    Document(String),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Calibrated pinhole camera as a 3×4 projection matrix (pixels per meter
/// after dehomogenization).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraDoc", into = "CameraDoc")]
pub struct CameraModel {
    id: u8,
    projection: Matrix3x4<f64>,
}

#[derive(Serialize, Deserialize)]
struct CameraDoc {
    id: u8,
    projection: [[f64; 4]; 3],
}

impl TryFrom<CameraDoc> for CameraModel {
    type Error = GeometryError;

    fn try_from(doc: CameraDoc) -> Result<Self> {
        CameraModel::new(doc.id, serde_util::from_rows(&doc.projection))
    }
}

impl From<CameraModel> for CameraDoc {
    fn from(cam: CameraModel) -> Self {
        CameraDoc {
            id: cam.id,
            projection: serde_util::to_rows(&cam.projection),
        }
    }
}

impl CameraModel {
    pub fn new(id: u8, projection: Matrix3x4<f64>) -> Result<Self> {
        if !(1..=2).contains(&id) {
            return Err(GeometryError::InvalidCamera {
                id,
                reason: "camera id must be 1 or 2".into(),
            });
        }
        if projection.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidCamera {
                id,
                reason: "projection has non-finite entries".into(),
            });
        }
        let m = projection.fixed_view::<3, 3>(0, 0).into_owned();
        let scale = m.norm();
        if scale == 0.0 || m.determinant().abs() <= 1e-12 * scale.powi(3) {
            return Err(GeometryError::InvalidCamera {
                id,
                reason: "left 3x3 block of the projection is rank deficient".into(),
            });
        }
        Ok(Self { id, projection })
    }

    /// `K·R·[I | −center]` with `K = [[f, 0, cx], [0, f, cy], [0, 0, 1]]`.
    pub fn pinhole(
        id: u8,
        focal: f64,
        principal: (f64, f64),
        rotation: Matrix3<f64>,
        center: Vector3<f64>,
    ) -> Result<Self> {
        let k = Matrix3::new(
            focal,
            0.0,
            principal.0,
            0.0,
            focal,
            principal.1,
            0.0,
            0.0,
            1.0,
        );
        let kr = k * rotation;
        let mut p = Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&kr);
        p.set_column(3, &(-kr * center));
        Self::new(id, p)
    }

    pub fn id(&self) -> u8 {
        self.id
    }

    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    /// Camera center, the right null vector of the projection.
    pub fn center(&self) -> Vector3<f64> {
        let m = self.projection.fixed_view::<3, 3>(0, 0).into_owned();
        let p4 = self.projection.column(3).into_owned();
        // rank of m checked at construction
        m.lu().solve(&(-p4)).unwrap_or_else(Vector3::zeros)
    }

    /// Pixel coordinates of `p`, or `None` when `p` lies on the camera's
    /// principal plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        let h = self.projection * p.push(1.0);
        if h.z.abs() <= f64::EPSILON * h.norm() {
            return None;
        }
        Some(Vector2::new(h.x / h.z, h.y / h.z))
    }

    /// Depth of `p` along the camera's principal axis (positive in front).
    pub fn depth(&self, p: &Vector3<f64>) -> f64 {
        let m = self.projection.fixed_view::<3, 3>(0, 0);
        let w = (self.projection * p.push(1.0)).z;
        let m3 = m.row(2);
        w * m.determinant().signum() / m3.norm()
    }
}

/// Reads a JSON array of exactly two camera documents.
pub fn load_camera_pair<R: Read>(reader: R) -> Result<(CameraModel, CameraModel)> {
    let cams: Vec<CameraModel> =
        serde_json::from_reader(reader).map_err(|e| GeometryError::Document(e.to_string()))?;
    let mut cam1 = None;
    let mut cam2 = None;
    for cam in cams {
        match cam.id {
            1 if cam1.is_none() => cam1 = Some(cam),
            2 if cam2.is_none() => cam2 = Some(cam),
            id => return Err(GeometryError::Document(format!("duplicate camera id {id}"))),
        }
    }
    match (cam1, cam2) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(GeometryError::Document(
            "expected cameras with ids 1 and 2".into(),
        )),
    }
}

/// One joint's 2D keypoint in one camera, with its pixel covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection2D {
    pub joint: usize,
    #[serde(with = "serde_util::vec2")]
    pub mean: Vector2<f64>,
    #[serde(with = "serde_util::mat2")]
    pub cov: Matrix2<f64>,
}

impl Detection2D {
    pub fn new(joint: usize, mean: Vector2<f64>, cov: Matrix2<f64>) -> Self {
        Self { joint, mean, cov }
    }
}

/// Both cameras' detections at one instant plus the inputs the pose OOD
/// scorers look at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StereoObservation {
    pub timestamp: f64,
    pub cam1: Vec<Detection2D>,
    pub cam2: Vec<Detection2D>,
    /// Cross-covariance `E[r₁ r₂ᵀ]` between the cameras' pixel residuals,
    /// shared by all joints.
    #[serde(
        default,
        with = "serde_util::opt_mat2",
        skip_serializing_if = "Option::is_none"
    )]
    pub cross_cov: Option<Matrix2<f64>>,
    /// No human detected in the frame; always out of distribution.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub missing: bool,
    /// Camera-1 image features consumed by feature-space OOD scorers.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features_cam2: Vec<f64>,
    /// Externally computed 2D OOD score, if the producer already has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_score: Option<f64>,
}

impl StereoObservation {
    pub fn new(timestamp: f64, cam1: Vec<Detection2D>, cam2: Vec<Detection2D>) -> Self {
        Self {
            timestamp,
            cam1,
            cam2,
            cross_cov: None,
            missing: false,
            features: Vec::new(),
            features_cam2: Vec::new(),
            ood_score: None,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.cam1.len()
    }

    fn check(&self) -> Result<()> {
        if self.cam1.len() != self.cam2.len() {
            return Err(GeometryError::JointCountMismatch {
                what: format!(
                    "camera 1 has {} detections, camera 2 has {}",
                    self.cam1.len(),
                    self.cam2.len()
                ),
            });
        }
        for (i, (a, b)) in self.cam1.iter().zip(&self.cam2).enumerate() {
            if a.joint != b.joint {
                return Err(GeometryError::JointCountMismatch {
                    what: format!("slot {i} pairs joint {} with joint {}", a.joint, b.joint),
                });
            }
        }
        Ok(())
    }
}

/// J joint positions (m) at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    #[serde(with = "serde_util::vec_vec3")]
    pub joints: Vec<Vector3<f64>>,
    pub timestamp: f64,
}

impl Pose {
    pub fn new(joints: Vec<Vector3<f64>>, timestamp: f64) -> Self {
        Self { joints, timestamp }
    }

    /// All-NaN placeholder for an empty motion-buffer slot.
    pub fn sentinel(joints: usize, timestamp: f64) -> Self {
        Self {
            joints: vec![Vector3::repeat(f64::NAN); joints],
            timestamp,
        }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.timestamp.is_finite() && self.joints.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn translated(&self, offset: &Vector3<f64>) -> Self {
        Self {
            joints: self.joints.iter().map(|p| p + offset).collect(),
            timestamp: self.timestamp,
        }
    }
}

/// One symmetric 3×3 covariance (m²) per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseCovariances {
    #[serde(with = "serde_util::vec_mat3")]
    pub covs: Vec<Matrix3<f64>>,
}

impl PoseCovariances {
    pub fn new(covs: Vec<Matrix3<f64>>) -> Self {
        Self { covs }
    }

    pub fn isotropic(joints: usize, sigma: f64) -> Self {
        Self {
            covs: vec![Matrix3::identity() * sigma * sigma; joints],
        }
    }

    pub fn sentinel(joints: usize) -> Self {
        Self {
            covs: vec![Matrix3::repeat(f64::NAN); joints],
        }
    }

    pub fn len(&self) -> usize {
        self.covs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covs.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.covs.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

/// Homogeneous DLT for one joint. Returns `None` when the two smallest
/// singular values of the constraint matrix coincide within
/// [`DEGENERACY_RTOL`] or the solution lies at infinity.
pub fn triangulate_point(
    x1: &Vector2<f64>,
    x2: &Vector2<f64>,
    cam1: &CameraModel,
    cam2: &CameraModel,
) -> Option<Vector3<f64>> {
    let (p1, p2) = (&cam1.projection, &cam2.projection);
    let mut a = Matrix4::zeros();
    a.set_row(0, &(p1.row(2) * x1.x - p1.row(0)));
    a.set_row(1, &(p1.row(2) * x1.y - p1.row(1)));
    a.set_row(2, &(p2.row(2) * x2.x - p2.row(0)));
    a.set_row(3, &(p2.row(2) * x2.y - p2.row(1)));
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let (smallest, second, largest) = (sv[order[0]], sv[order[1]], sv[order[3]]);
    if largest <= 0.0 || second - smallest <= DEGENERACY_RTOL * largest {
        return None;
    }

    let h = v_t.row(order[0]);
    if h[3].abs() <= f64::EPSILON * h.norm() {
        return None;
    }
    Some(Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]))
}

/// Per-joint triangulation results; failures do not abort the other joints.
pub fn triangulate_joints(
    obs: &StereoObservation,
    cam1: &CameraModel,
    cam2: &CameraModel,
) -> Result<Vec<Result<Vector3<f64>>>> {
    obs.check()?;
    Ok(obs
        .cam1
        .iter()
        .zip(&obs.cam2)
        .enumerate()
        .map(|(j, (d1, d2))| {
            triangulate_point(&d1.mean, &d2.mean, cam1, cam2)
                .ok_or(GeometryError::DegenerateGeometry { joint: j })
        })
        .collect())
}

/// Triangulates every joint; the first degenerate joint fails the call.
pub fn triangulate(
    obs: &StereoObservation,
    cam1: &CameraModel,
    cam2: &CameraModel,
) -> Result<Pose> {
    let joints = triangulate_joints(obs, cam1, cam2)?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Pose::new(joints, obs.timestamp))
}

/// 3×4 Jacobian of the triangulated point with respect to `(u₁, v₁, u₂, v₂)`.
pub fn triangulation_jacobian(
    x1: &Vector2<f64>,
    x2: &Vector2<f64>,
    cam1: &CameraModel,
    cam2: &CameraModel,
) -> Option<SMatrix<f64, 3, 4>> {
    let base = [x1.x, x1.y, x2.x, x2.y];
    let eval = |x: &[f64; 4]| {
        triangulate_point(
            &Vector2::new(x[0], x[1]),
            &Vector2::new(x[2], x[3]),
            cam1,
            cam2,
        )
    };
    eval(&base)?;
    let mut jac = SMatrix::<f64, 3, 4>::zeros();
    for i in 0..4 {
        let mut fwd = base;
        let mut bwd = base;
        fwd[i] += JACOBIAN_STEP_PX;
        bwd[i] -= JACOBIAN_STEP_PX;
        let col = (eval(&fwd)? - eval(&bwd)?) / (2.0 * JACOBIAN_STEP_PX);
        if col.iter().any(|v| !v.is_finite()) {
            return None;
        }
        jac.set_column(i, &col);
    }
    Some(jac)
}

/// Stacked 4×4 pixel covariance `[[C₁, X], [Xᵀ, C₂]]`.
pub fn stacked_pixel_covariance(
    c1: &Matrix2<f64>,
    c2: &Matrix2<f64>,
    cross: Option<&Matrix2<f64>>,
) -> Matrix4<f64> {
    let mut c = Matrix4::zeros();
    c.fixed_view_mut::<2, 2>(0, 0).copy_from(c1);
    c.fixed_view_mut::<2, 2>(2, 2).copy_from(c2);
    if let Some(x) = cross {
        c.fixed_view_mut::<2, 2>(0, 2).copy_from(x);
        c.fixed_view_mut::<2, 2>(2, 0).copy_from(&x.transpose());
    }
    c
}

/// `Jac·C₄·Jacᵀ + σ_iso²·I` for one joint, symmetrized.
pub fn joint_covariance(
    d1: &Detection2D,
    d2: &Detection2D,
    cross: Option<&Matrix2<f64>>,
    cam1: &CameraModel,
    cam2: &CameraModel,
    sigma_iso: f64,
    joint: usize,
) -> Result<Matrix3<f64>> {
    let jac = triangulation_jacobian(&d1.mean, &d2.mean, cam1, cam2)
        .ok_or(GeometryError::NonFiniteJacobian { joint })?;
    let c4 = stacked_pixel_covariance(&d1.cov, &d2.cov, cross);
    let c3 = jac * c4 * jac.transpose();
    Ok((c3 + c3.transpose()) * 0.5 + Matrix3::identity() * sigma_iso * sigma_iso)
}

/// First-order propagation of every joint's 2D covariances into 3D.
pub fn propagate_covariance(
    obs: &StereoObservation,
    cam1: &CameraModel,
    cam2: &CameraModel,
    point: &Pose,
    sigma_iso: f64,
) -> Result<PoseCovariances> {
    obs.check()?;
    if point.len() != obs.joint_count() {
        return Err(GeometryError::JointCountMismatch {
            what: format!(
                "pose has {} joints, observation has {}",
                point.len(),
                obs.joint_count()
            ),
        });
    }
    let covs = obs
        .cam1
        .iter()
        .zip(&obs.cam2)
        .enumerate()
        .map(|(j, (d1, d2))| {
            joint_covariance(d1, d2, obs.cross_cov.as_ref(), cam1, cam2, sigma_iso, j)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseCovariances::new(covs))
}

/// Mean-removed sample cross-covariance `E[r₁ r₂ᵀ]` (denominator n − 1)
/// between camera-1 and camera-2 reprojection residuals.
pub fn estimate_cross_covariance(pairs: &[(Vector2<f64>, Vector2<f64>)]) -> Result<Matrix2<f64>> {
    if pairs.len() < MIN_CROSS_COV_PAIRS {
        return Err(GeometryError::InsufficientData {
            needed: MIN_CROSS_COV_PAIRS,
            have: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let (sum1, sum2) = pairs
        .iter()
        .fold((Vector2::zeros(), Vector2::zeros()), |(a, b), (r1, r2)| {
            (a + r1, b + r2)
        });
    let (m1, m2) = (sum1 / n, sum2 / n);
    let acc = pairs.iter().fold(Matrix2::zeros(), |acc, (r1, r2)| {
        acc + (r1 - m1) * (r2 - m2).transpose()
    });
    Ok(acc / (n - 1.0))
}
