//! Category symmetry descriptors, mirror maps and candidate rotations.
//!
//! Conventions: the reflection plane is the xy-plane and the rotational
//! symmetry axis is y, both in the canonical object frame.

use serde::{Deserialize, Serialize};

use crate::geometry::{world_location, nocs_coordinate, PointCloud, Pose9, Rotation, Vec3};

/// Per-category symmetry descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SymmetryClass {
    None,
    /// Rotational symmetry about the y axis, discretized into
    /// `candidates` uniformly spaced orbit samples.
    RotationalY { candidates: usize },
    /// Reflection symmetry across the xy-plane.
    ReflectionXY,
}

/// Default orbit resolution: 10 degrees.
pub const DEFAULT_ROTATIONAL_CANDIDATES: usize = 36;

impl SymmetryClass {
    pub fn rotational_default() -> Self {
        SymmetryClass::RotationalY {
            candidates: DEFAULT_ROTATIONAL_CANDIDATES,
        }
    }

    pub fn candidate_count(&self) -> usize {
        match self {
            SymmetryClass::RotationalY { candidates } => (*candidates).max(1),
            _ => 1,
        }
    }

    pub fn is_rotational(&self) -> bool {
        matches!(self, SymmetryClass::RotationalY { .. })
    }
}

/// Category profile: symmetry, mean metric size and shape prior cloud.
#[derive(Debug, Clone)]
pub struct CategoryProfile {
    pub name: String,
    pub symmetry: SymmetryClass,
    pub mean_size: Vec3,
    pub prior: PointCloud,
}

/// Mirrored point in the canonical frame.
pub fn mirror_point(p: &Vec3, sym: &SymmetryClass) -> Vec3 {
    match sym {
        SymmetryClass::None => *p,
        SymmetryClass::RotationalY { .. } => Vec3::new(-p.x, p.y, -p.z),
        SymmetryClass::ReflectionXY => Vec3::new(p.x, p.y, -p.z),
    }
}

/// Mirror map conjugated by a pose: to canonical frame, mirror, back.
pub fn mirror_world(p: &Vec3, pose: &Pose9, sym: &SymmetryClass) -> Vec3 {
    let c = nocs_coordinate(p, pose);
    world_location(&mirror_point(&c, sym), pose)
}

/// Candidate ground-truth rotations induced by the symmetry class.
///
/// Rotational symmetry yields the sampled orbit R_gt * rot_y(2 pi k / n);
/// the k = 0 candidate is always R_gt itself. Other classes yield only
/// R_gt.
pub fn candidate_rotations(r_gt: &Rotation, sym: &SymmetryClass) -> Vec<Rotation> {
    match sym {
        SymmetryClass::RotationalY { candidates } => {
            let n = (*candidates).max(1);
            (0..n)
                .map(|k| {
                    if k == 0 {
                        *r_gt
                    } else {
                        r_gt.compose(&Rotation::rot_y(
                            2.0 * std::f64::consts::PI * k as f64 / n as f64,
                        ))
                    }
                })
                .collect()
        }
        _ => vec![*r_gt],
    }
}
