//! Pose parameterization and the normalized object coordinate map.
//!
//! A 9DoF pose is a rotation, a translation in meters and per-axis
//! metric extents. Rotation is recovered from two unnormalized columns
//! (x and y axis directions) by Gram-Schmidt, prioritizing the y column
//! since it doubles as the symmetry axis for rotational categories.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const MIN_COLUMN_NORM: f64 = 1e-6;
const MIN_COLUMN_ANGLE: f64 = 1e-4;
const ORTHONORMAL_TOL: f64 = 1e-9;

/// Proper rotation matrix (orthonormal columns, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Rotation {
    /// Wraps a matrix after checking orthonormality and determinant.
    pub fn from_matrix(m: Mat3) -> Result<Self> {
        let gram = m.transpose() * m;
        let err = (gram - Mat3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::DegenerateInput(format!(
                "columns not orthonormal (deviation {err:.3e})"
            )));
        }
        if (m.determinant() - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::DegenerateInput(format!(
                "determinant {} != +1",
                m.determinant()
            )));
        }
        Ok(Rotation(m))
    }

    /// Wraps a matrix that is known to be a proper rotation.
    pub(crate) fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Rotation about the y axis by `angle` radians.
    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    /// Rotation about the x axis by `angle` radians.
    pub fn rot_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    /// Rotation about the z axis by `angle` radians.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Rotation(Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Rotation about an arbitrary unit axis (Rodrigues).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.normalize();
        let k = skew(&n);
        let m = Mat3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
        Rotation(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }

    pub fn column(&self, i: usize) -> Vec3 {
        self.0.column(i).into()
    }

    /// Geodesic angle in radians between two rotations.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        let rel = self.0.transpose() * other.0;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn apply_inverse(&self, v: &Vec3) -> Vec3 {
        self.0.transpose() * v
    }
}

pub(crate) fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Full 9DoF state: rotation, translation (m) and positive extents (m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose9 {
    pub rotation: Rotation,
    pub translation: Vec3,
    pub size: Vec3,
}

impl Pose9 {
    pub fn new(rotation: Rotation, translation: Vec3, size: Vec3) -> Result<Self> {
        if size.iter().any(|s| *s <= 0.0) {
            return Err(Error::NonPositiveSize([size.x, size.y, size.z]));
        }
        Ok(Pose9 {
            rotation,
            translation,
            size,
        })
    }

    /// Diagonal length of the bounding box, L = |s|.
    pub fn diagonal(&self) -> f64 {
        self.size.norm()
    }
}

/// Raw pose variables as regressed: two unnormalized rotation columns
/// plus residual translation and size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseParams {
    pub rx_raw: Vec3,
    pub ry_raw: Vec3,
    pub t_residual: Vec3,
    pub s_residual: Vec3,
}

/// Ordered 3D point list with optional per-point weights in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub weights: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        PointCloud {
            points,
            weights: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Result<Vec3> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        Ok(self.points.iter().sum::<Vec3>() / self.points.len() as f64)
    }

    /// Componentwise min/max corners of the axis-aligned bounding box.
    pub fn bounds(&self) -> Result<(Vec3, Vec3)> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Ok((lo, hi))
    }

    pub fn map(&self, f: impl Fn(&Vec3) -> Vec3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(f).collect(),
            weights: self.weights.clone(),
        }
    }
}

/// Orthonormalizes the two raw columns into a proper rotation.
///
/// The y column is normalized first, the x column is orthogonalized
/// against it, and the z column is their cross product.
pub fn recover_rotation(params: &PoseParams) -> Result<Rotation> {
    let a = params.rx_raw;
    let b = params.ry_raw;
    let an = a.norm();
    let bn = b.norm();
    if an < MIN_COLUMN_NORM || bn < MIN_COLUMN_NORM {
        return Err(Error::DegenerateInput(format!(
            "rotation column norms {an:.3e}, {bn:.3e} below {MIN_COLUMN_NORM:.0e}"
        )));
    }
    let c2 = b / bn;
    let u = a - a.dot(&c2) * c2;
    // u vanishes exactly when the columns are parallel.
    if u.norm() < an * MIN_COLUMN_ANGLE {
        return Err(Error::DegenerateInput(
            "rx_raw and ry_raw are (near-)parallel".into(),
        ));
    }
    let c1 = u.normalize();
    let c3 = c1.cross(&c2);
    Ok(Rotation::from_matrix_unchecked(Mat3::from_columns(&[
        c1, c2, c3,
    ])))
}

/// t = t_residual + centroid of the observed cloud.
pub fn recover_translation(t_residual: &Vec3, cloud: &PointCloud) -> Result<Vec3> {
    Ok(t_residual + cloud.centroid()?)
}

/// s = s_residual + category mean size; all components must stay positive.
pub fn recover_size(s_residual: &Vec3, mean_size: &Vec3) -> Result<Vec3> {
    let s = s_residual + mean_size;
    if s.iter().any(|v| *v <= 0.0) {
        return Err(Error::NonPositiveSize([s.x, s.y, s.z]));
    }
    Ok(s)
}

/// NOCS coordinate of a world point: c = R^T (p - t) / L.
pub fn nocs_coordinate(p: &Vec3, pose: &Pose9) -> Vec3 {
    pose.rotation.apply_inverse(&(p - pose.translation)) / pose.diagonal()
}

/// World location of a NOCS coordinate: p = R (L c) + t.
pub fn world_location(c: &Vec3, pose: &Pose9) -> Vec3 {
    pose.rotation.apply(&(pose.diagonal() * c)) + pose.translation
}
