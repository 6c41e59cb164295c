//! Point containers, rigid transforms, spatial search, closed-form pose
//! solving and evaluation metrics.

pub mod io;
pub mod kabsch;
pub mod kdtree;
pub mod metrics;
pub mod voxel;

use nalgebra::{DMatrix, Matrix3, Matrix4, Point3, Rotation3, Unit, Vector3};

use crate::error::{Error, Result};

pub use kabsch::{weighted_kabsch, weighted_objective};
pub use kdtree::{KdTree, Neighbor};
pub use metrics::{
    fmr, inlier_ratio, pair_registered, patch_overlap_ratio, pir, pmr, registration_recall, registration_rmse, rre,
    rte, MetricsConfig, PairOutcome, RecallProtocol,
};
pub use voxel::voxel_downsample;

/// Orthonormality and determinant tolerance for [`RigidTransform`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Ordered set of 3D points with optional per-point features (row `i` belongs
/// to point `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    features: Option<DMatrix<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            features: None,
        })
    }

    pub fn with_features(points: Vec<Point3<f64>>, features: DMatrix<f64>) -> Result<Self> {
        if features.nrows() != points.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows for {} points",
                features.nrows(),
                points.len()
            )));
        }
        let mut cloud = Self::new(points)?;
        cloud.features = Some(features);
        Ok(cloud)
    }

    pub fn empty() -> Self {
        Self {
            points: Vec::new(),
            features: None,
        }
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn features(&self) -> Option<&DMatrix<f64>> {
        self.features.as_ref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, transform: &RigidTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| transform.apply(p)).collect(),
            features: self.features.clone(),
        }
    }

    pub fn into_points(self) -> Vec<Point3<f64>> {
        self.points
    }
}

/// A proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    /// Validates `RᵀR = I` and `det R = +1` within [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite transform entry".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "rotation is not special orthogonal (|RᵀR−I|∞={ortho:e}, det={det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis`, followed by `translation`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = if axis.norm() == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
        };
        Self {
            rotation,
            translation,
        }
    }

    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn from_row_major_3x4(values: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8],
            values[9], values[10],
        );
        Self::new(rotation, Vector3::new(values[3], values[7], values[11]))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            let near = bottom
                .iter()
                .zip([0.0, 0.0, 0.0, 1.0])
                .all(|(a, b)| (a - b).abs() <= ROTATION_TOLERANCE);
            if !near {
                return Err(Error::InvalidInput(format!(
                    "homogeneous bottom row must be 0 0 0 1, got {bottom:?}"
                )));
            }
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }
}

/// A weighted point pair `(x_k, y_k, w_k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: Point3<f64>,
    pub target: Point3<f64>,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(source: Point3<f64>, target: Point3<f64>, weight: f64) -> Self {
        Self {
            source,
            target,
            weight,
        }
    }

    pub fn unit(source: Point3<f64>, target: Point3<f64>) -> Self {
        Self::new(source, target, 1.0)
    }

    /// Residual `‖R·x + t − y‖` under `transform`.
    pub fn residual(&self, transform: &RigidTransform) -> f64 {
        (transform.apply(&self.source) - self.target).norm()
    }
}

/// Index-level match between a source node and a target node with its
/// matching score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeMatch {
    pub source: usize,
    pub target: usize,
    pub score: f64,
}
