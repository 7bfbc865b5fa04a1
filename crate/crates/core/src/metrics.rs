//! Evaluation metrics: symmetry-aware rotation/translation errors,
//! exact oriented-box IoU and benchmark aggregation.

use serde::{Deserialize, Serialize};

use crate::geometry::{Pose9, Rotation, Vec3};
use crate::symmetry::{candidate_rotations, SymmetryClass};

/// Per-instance evaluation record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub rotation_deg: f64,
    /// Euclidean translation error in meters.
    pub translation: f64,
    pub iou: f64,
}

/// Rotation candidates that leave the category shape invariant.
fn equivalent_rotations(r: &Rotation, sym: &SymmetryClass) -> Vec<Rotation> {
    match sym {
        SymmetryClass::ReflectionXY => {
            vec![*r, r.compose(&Rotation::rot_y(std::f64::consts::PI))]
        }
        _ => candidate_rotations(r, sym),
    }
}

/// Symmetry-aware pose error.
///
/// Rotational symmetry compares only the y axes (the error is exactly
/// invariant to spin about the object axis); reflection symmetry takes
/// the minimum over the half-turn ambiguity; asymmetric categories use
/// the plain geodesic angle.
pub fn pose_error(pred: &Pose9, gt: &Pose9, sym: &SymmetryClass) -> PoseError {
    let rotation_deg = match sym {
        SymmetryClass::RotationalY { .. } => {
            let dot = pred
                .rotation
                .column(1)
                .dot(&gt.rotation.column(1))
                .clamp(-1.0, 1.0);
            dot.acos().to_degrees()
        }
        _ => equivalent_rotations(&gt.rotation, sym)
            .iter()
            .map(|cand| pred.rotation.angle_to(cand).to_degrees())
            .fold(f64::INFINITY, f64::min),
    };
    let iou = equivalent_rotations(&gt.rotation, sym)
        .iter()
        .map(|cand| {
            let gt_cand = Pose9 {
                rotation: *cand,
                translation: gt.translation,
                size: gt.size,
            };
            iou3d(pred, &gt_cand)
        })
        .fold(0.0, f64::max);
    PoseError {
        rotation_deg,
        translation: (pred.translation - gt.translation).norm(),
        iou,
    }
}

/// Exact intersection-over-union of two oriented boxes.
///
/// The intersection volume is computed by clipping one box's polytope
/// against the other's half-spaces; evaluating both orders and
/// averaging makes the result bitwise symmetric in its arguments.
pub fn iou3d(a: &Pose9, b: &Pose9) -> f64 {
    let va = a.size.x * a.size.y * a.size.z;
    let vb = b.size.x * b.size.y * b.size.z;
    let inter = 0.5 * (intersection_volume(a, b) + intersection_volume(b, a));
    let union = va + vb - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

const CLIP_EPS: f64 = 1e-12;

/// Volume of `subject` clipped by the six half-spaces of `clipper`.
fn intersection_volume(subject: &Pose9, clipper: &Pose9) -> f64 {
    let mut faces = box_faces(subject);
    for (normal, offset) in box_halfspaces(clipper) {
        faces = clip_by_halfspace(&faces, &normal, offset);
        if faces.is_empty() {
            return 0.0;
        }
    }
    polytope_volume(&faces)
}

/// The eight corners as six quadrilateral faces.
fn box_faces(pose: &Pose9) -> Vec<Vec<Vec3>> {
    let h = pose.size / 2.0;
    let corner = |sx: f64, sy: f64, sz: f64| {
        pose.rotation.apply(&Vec3::new(sx * h.x, sy * h.y, sz * h.z)) + pose.translation
    };
    let c = [
        corner(-1.0, -1.0, -1.0),
        corner(1.0, -1.0, -1.0),
        corner(1.0, 1.0, -1.0),
        corner(-1.0, 1.0, -1.0),
        corner(-1.0, -1.0, 1.0),
        corner(1.0, -1.0, 1.0),
        corner(1.0, 1.0, 1.0),
        corner(-1.0, 1.0, 1.0),
    ];
    [
        [0, 1, 2, 3],
        [4, 5, 6, 7],
        [0, 1, 5, 4],
        [2, 3, 7, 6],
        [1, 2, 6, 5],
        [0, 3, 7, 4],
    ]
    .iter()
    .map(|idx| idx.iter().map(|i| c[*i]).collect())
    .collect()
}

/// Half-spaces n . x <= d of an oriented box.
fn box_halfspaces(pose: &Pose9) -> Vec<(Vec3, f64)> {
    let h = pose.size / 2.0;
    let mut out = Vec::with_capacity(6);
    for axis in 0..3 {
        let n = pose.rotation.column(axis);
        let center = n.dot(&pose.translation);
        out.push((n, center + h[axis]));
        out.push((-n, -center + h[axis]));
    }
    out
}

/// Sutherland-Hodgman clipping of every face, plus a cap face built
/// from the cut edge.
fn clip_by_halfspace(faces: &[Vec<Vec3>], normal: &Vec3, offset: f64) -> Vec<Vec<Vec3>> {
    let mut out = Vec::new();
    let mut cut_points: Vec<Vec3> = Vec::new();
    for face in faces {
        let mut clipped = Vec::new();
        for i in 0..face.len() {
            let cur = face[i];
            let next = face[(i + 1) % face.len()];
            let dc = normal.dot(&cur) - offset;
            let dn = normal.dot(&next) - offset;
            if dc <= CLIP_EPS {
                clipped.push(cur);
            }
            if (dc < -CLIP_EPS && dn > CLIP_EPS) || (dc > CLIP_EPS && dn < -CLIP_EPS) {
                let t = dc / (dc - dn);
                let p = cur + t * (next - cur);
                clipped.push(p);
                cut_points.push(p);
            }
        }
        if clipped.len() >= 3 {
            out.push(clipped);
        }
    }
    if cut_points.len() >= 3 {
        if let Some(cap) = build_cap(&cut_points, normal) {
            out.push(cap);
        }
    }
    out
}

/// Orders the cut points around their centroid in the clipping plane.
fn build_cap(points: &[Vec3], normal: &Vec3) -> Option<Vec<Vec3>> {
    // deduplicate
    let mut unique: Vec<Vec3> = Vec::new();
    for p in points {
        if unique.iter().all(|q| (p - q).norm() > 1e-9) {
            unique.push(*p);
        }
    }
    if unique.len() < 3 {
        return None;
    }
    let centroid = unique.iter().sum::<Vec3>() / unique.len() as f64;
    // in-plane basis
    let e1 = {
        let cand = if normal.x.abs() < 0.9 {
            Vec3::new(1.0, 0.0, 0.0)
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        };
        (cand - cand.dot(normal) * normal).normalize()
    };
    let e2 = normal.cross(&e1);
    unique.sort_by(|a, b| {
        let da = a - centroid;
        let db = b - centroid;
        let aa = da.dot(&e2).atan2(da.dot(&e1));
        let ab = db.dot(&e2).atan2(db.dot(&e1));
        aa.partial_cmp(&ab).unwrap()
    });
    Some(unique)
}

/// Volume of a convex polytope given as faces with arbitrary winding:
/// sum of pyramids from an interior point.
fn polytope_volume(faces: &[Vec<Vec3>]) -> f64 {
    let mut centroid = Vec3::zeros();
    let mut count = 0usize;
    for face in faces {
        for v in face {
            centroid += v;
            count += 1;
        }
    }
    if count == 0 {
        return 0.0;
    }
    centroid /= count as f64;
    let mut volume = 0.0;
    for face in faces {
        // Newell normal (unnormalized, magnitude = 2 * area)
        let mut n = Vec3::zeros();
        for i in 0..face.len() {
            let a = face[i];
            let b = face[(i + 1) % face.len()];
            n += a.cross(&b);
        }
        let area2 = n.norm();
        if area2 < 1e-18 {
            continue;
        }
        let height = ((face[0] - centroid).dot(&n) / area2).abs();
        volume += area2 / 2.0 * height / 3.0;
    }
    volume
}

/// Accuracy buckets and mean errors over a benchmark run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub mean_rotation_deg: f64,
    pub mean_translation: f64,
    pub mean_iou: f64,
    /// Fractions of instances below combined degree / centimeter
    /// thresholds and above IoU thresholds.
    pub acc_5deg_5cm: f64,
    pub acc_10deg_5cm: f64,
    pub acc_10deg_10cm: f64,
    pub iou_25: f64,
    pub iou_50: f64,
    pub iou_75: f64,
}

/// Aggregates per-instance errors; empty input yields an all-zero
/// report.
pub fn aggregate(errors: &[PoseError]) -> MetricsReport {
    let n = errors.len();
    if n == 0 {
        return MetricsReport {
            count: 0,
            mean_rotation_deg: 0.0,
            mean_translation: 0.0,
            mean_iou: 0.0,
            acc_5deg_5cm: 0.0,
            acc_10deg_5cm: 0.0,
            acc_10deg_10cm: 0.0,
            iou_25: 0.0,
            iou_50: 0.0,
            iou_75: 0.0,
        };
    }
    let nf = n as f64;
    let frac = |pred: &dyn Fn(&PoseError) -> bool| {
        errors.iter().filter(|e| pred(e)).count() as f64 / nf
    };
    MetricsReport {
        count: n,
        mean_rotation_deg: errors.iter().map(|e| e.rotation_deg).sum::<f64>() / nf,
        mean_translation: errors.iter().map(|e| e.translation).sum::<f64>() / nf,
        mean_iou: errors.iter().map(|e| e.iou).sum::<f64>() / nf,
        acc_5deg_5cm: frac(&|e| e.rotation_deg <= 5.0 && e.translation <= 0.05),
        acc_10deg_5cm: frac(&|e| e.rotation_deg <= 10.0 && e.translation <= 0.05),
        acc_10deg_10cm: frac(&|e| e.rotation_deg <= 10.0 && e.translation <= 0.10),
        iou_25: frac(&|e| e.iou >= 0.25),
        iou_50: frac(&|e| e.iou >= 0.50),
        iou_75: frac(&|e| e.iou >= 0.75),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn unit_cube_at(t: Vec3) -> Pose9 {
        Pose9::new(Rotation::identity(), t, v(1.0, 1.0, 1.0)).unwrap()
    }

    #[test]
    fn iou_identical_boxes() {
        let a = unit_cube_at(Vec3::zeros());
        assert_relative_eq!(iou3d(&a, &a), 1.0, epsilon = 1e-12);
        let b = Pose9::new(Rotation::rot_z(0.4), v(0.2, -0.1, 0.3), v(0.3, 0.5, 0.2)).unwrap();
        assert_relative_eq!(iou3d(&b, &b), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn iou_half_offset_unit_cubes() {
        // overlap 0.5, union 1.5
        let a = unit_cube_at(Vec3::zeros());
        let b = unit_cube_at(v(0.5, 0.0, 0.0));
        assert_relative_eq!(iou3d(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn iou_disjoint_and_nested() {
        let a = unit_cube_at(Vec3::zeros());
        let b = unit_cube_at(v(5.0, 0.0, 0.0));
        assert_eq!(iou3d(&a, &b), 0.0);
        // box nested inside a larger box: IoU = volume ratio
        let inner = Pose9::new(Rotation::rot_y(0.3), Vec3::zeros(), v(0.5, 0.5, 0.5)).unwrap();
        assert_relative_eq!(iou3d(&inner, &a), 0.125, epsilon = 1e-10);
    }

    #[test]
    fn iou_rotated_cube_45_degrees() {
        // unit cube vs the same cube spun 45 degrees about z: the
        // intersection is a regular octagonal prism of cross-section
        // area 2 (sqrt 2 - 1)
        let a = unit_cube_at(Vec3::zeros());
        let b = Pose9::new(
            Rotation::rot_z(std::f64::consts::FRAC_PI_4),
            Vec3::zeros(),
            v(1.0, 1.0, 1.0),
        )
        .unwrap();
        let octagon = 2.0 * (2f64.sqrt() - 1.0);
        let expect = octagon / (2.0 - octagon);
        assert_relative_eq!(iou3d(&a, &b), expect, epsilon = 1e-10);
    }

    #[test]
    fn iou_monte_carlo_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let a = Pose9::new(
            Rotation::rot_y(0.6).compose(&Rotation::rot_x(-0.3)),
            v(0.05, -0.02, 0.1),
            v(0.4, 0.25, 0.3),
        )
        .unwrap();
        let b = Pose9::new(
            Rotation::rot_z(0.9),
            v(0.1, 0.05, 0.0),
            v(0.3, 0.35, 0.25),
        )
        .unwrap();
        // sample uniformly inside a, count hits inside b
        let inside = |pose: &Pose9, p: &Vec3| {
            let q = pose.rotation.apply_inverse(&(p - pose.translation));
            q.x.abs() <= pose.size.x / 2.0
                && q.y.abs() <= pose.size.y / 2.0
                && q.z.abs() <= pose.size.z / 2.0
        };
        let trials = 1_000_000;
        let mut hits = 0usize;
        for _ in 0..trials {
            let local = v(
                rng.gen_range(-0.5..0.5) * a.size.x,
                rng.gen_range(-0.5..0.5) * a.size.y,
                rng.gen_range(-0.5..0.5) * a.size.z,
            );
            let p = a.rotation.apply(&local) + a.translation;
            if inside(&b, &p) {
                hits += 1;
            }
        }
        let va = a.size.x * a.size.y * a.size.z;
        let vb = b.size.x * b.size.y * b.size.z;
        let inter_mc = va * hits as f64 / trials as f64;
        let iou_mc = inter_mc / (va + vb - inter_mc);
        let iou = iou3d(&a, &b);
        assert!(
            (iou - iou_mc).abs() < 0.01,
            "exact {iou} vs monte carlo {iou_mc}"
        );
    }

    #[test]
    fn iou_is_argument_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pose = |rng: &mut ChaCha8Rng| {
                crate::geometry::tests::random_pose(rng)
            };
            let a = pose(&mut rng);
            let b = pose(&mut rng);
            let ab = iou3d(&a, &b);
            let ba = iou3d(&b, &a);
            assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }

    #[test]
    fn pose_error_identity() {
        let gt = Pose9::new(Rotation::rot_x(0.3), v(0.1, 0.2, 0.3), v(0.2, 0.3, 0.1)).unwrap();
        let e = pose_error(&gt, &gt, &SymmetryClass::None);
        assert!(e.rotation_deg < 1e-9);
        assert_eq!(e.translation, 0.0);
        assert_relative_eq!(e.iou, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn pose_error_rotational_ignores_spin() {
        let gt = Pose9::new(Rotation::rot_x(0.4), v(0.0, 0.0, 0.0), v(0.2, 0.4, 0.2)).unwrap();
        let pred = Pose9 {
            rotation: gt.rotation.compose(&Rotation::rot_y(1.234)),
            ..gt
        };
        let sym = SymmetryClass::rotational_default();
        let e = pose_error(&pred, &gt, &sym);
        assert!(e.rotation_deg < 1e-9, "spin leaked: {}", e.rotation_deg);
        // asymmetric comparison sees the spin
        let e_none = pose_error(&pred, &gt, &SymmetryClass::None);
        assert_relative_eq!(e_none.rotation_deg, 1.234f64.to_degrees(), epsilon = 1e-9);
    }

    #[test]
    fn pose_error_reflection_half_turn() {
        let gt = Pose9::new(Rotation::rot_x(0.2), v(0.0, 0.1, 0.0), v(0.3, 0.2, 0.25)).unwrap();
        let pred = Pose9 {
            rotation: gt.rotation.compose(&Rotation::rot_y(std::f64::consts::PI)),
            ..gt
        };
        let e = pose_error(&pred, &gt, &SymmetryClass::ReflectionXY);
        assert!(e.rotation_deg < 1e-9);
        assert_relative_eq!(e.iou, 1.0, epsilon = 1e-9);
        let e_none = pose_error(&pred, &gt, &SymmetryClass::None);
        assert_relative_eq!(e_none.rotation_deg, 180.0, epsilon = 1e-9);
    }

    #[test]
    fn pose_error_iou_uses_candidate_max() {
        // spin by an exact orbit step: candidate IoU recovers 1 even
        // for an anisotropic x/z cross-section... use equal x/z so the
        // shape statement holds, and an exact candidate angle
        let gt = Pose9::new(Rotation::identity(), Vec3::zeros(), v(0.2, 0.4, 0.3)).unwrap();
        let step = std::f64::consts::TAU / 36.0;
        let pred = Pose9 {
            rotation: Rotation::rot_y(5.0 * step),
            ..gt
        };
        let e = pose_error(&pred, &gt, &SymmetryClass::rotational_default());
        assert_relative_eq!(e.iou, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn aggregate_buckets_are_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let errors: Vec<PoseError> = (0..200)
            .map(|_| PoseError {
                rotation_deg: rng.gen_range(0.0..20.0),
                translation: rng.gen_range(0.0..0.15),
                iou: rng.gen_range(0.0..1.0),
            })
            .collect();
        let m = aggregate(&errors);
        assert!(m.acc_5deg_5cm <= m.acc_10deg_5cm);
        assert!(m.acc_10deg_5cm <= m.acc_10deg_10cm);
        assert!(m.iou_75 <= m.iou_50);
        assert!(m.iou_50 <= m.iou_25);
        for f in [
            m.acc_5deg_5cm,
            m.acc_10deg_5cm,
            m.acc_10deg_10cm,
            m.iou_25,
            m.iou_50,
            m.iou_75,
        ] {
            assert!((0.0..=1.0).contains(&f));
        }
        assert_eq!(aggregate(&[]).count, 0);
    }

    #[test]
    fn aggregate_perfect_and_terrible() {
        let perfect = vec![
            PoseError {
                rotation_deg: 0.0,
                translation: 0.0,
                iou: 1.0
            };
            10
        ];
        let m = aggregate(&perfect);
        assert_eq!(m.acc_5deg_5cm, 1.0);
        assert_eq!(m.iou_75, 1.0);
        let terrible = vec![
            PoseError {
                rotation_deg: 90.0,
                translation: 1.0,
                iou: 0.0
            };
            10
        ];
        let m = aggregate(&terrible);
        assert_eq!(m.acc_10deg_10cm, 0.0);
        assert_eq!(m.iou_25, 0.0);
    }
}
