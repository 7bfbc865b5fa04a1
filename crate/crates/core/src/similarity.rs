//! Closed-form Umeyama similarity estimation with a RANSAC wrapper.
//!
//! This is the classical two-stage baseline: NOCS coordinates are
//! aligned to the observed cloud and the 9DoF pose is read off the
//! recovered similarity transform.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Mat3, PointCloud, Pose9, Rotation, Vec3};

/// Similarity transform q = scale * R * p + t.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.scale * self.rotation.apply(p) + self.translation
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Inlier residual threshold in meters.
    pub inlier_threshold: f64,
    pub min_sample_size: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        // 4-point samples: one above the theoretical minimum, fewer
        // degenerate draws.
        RansacConfig {
            max_iterations: 256,
            inlier_threshold: 0.01,
            min_sample_size: 4,
            seed: 0,
        }
    }
}

/// Least-squares similarity alignment of paired clouds (Umeyama).
///
/// Minimizes sum_i |s R src_i + t - dst_i|^2 with the determinant-sign
/// correction so the rotation is always proper.
pub fn umeyama(source: &PointCloud, target: &PointCloud) -> Result<SimilarityTransform> {
    if source.len() != target.len() {
        return Err(Error::CardinalityMismatch {
            left: source.len(),
            right: target.len(),
        });
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::DegenerateInput(format!(
            "need at least 3 correspondences, got {n}"
        )));
    }
    let mu_s = source.centroid()?;
    let mu_t = target.centroid()?;

    let mut sigma = Mat3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.points.iter().zip(&target.points) {
        let sc = s - mu_s;
        let tc = t - mu_t;
        sigma += tc * sc.transpose();
        var_s += sc.norm_squared();
    }
    let inv_n = 1.0 / n as f64;
    sigma *= inv_n;
    var_s *= inv_n;

    let svd = sigma.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::DegenerateInput("SVD failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::DegenerateInput("SVD failed".into()))?;
    let d: Vector3<f64> = svd.singular_values;

    // rank < 2 (collinear or coincident source) leaves the rotation
    // under-determined
    if d[1] <= d[0].max(1e-300) * 1e-9 || var_s <= 1e-24 {
        return Err(Error::DegenerateInput(
            "source configuration is rank-deficient (collinear or coincident points)".into(),
        ));
    }

    let sign = (u.determinant() * vt.determinant()).signum();
    let mut s_diag = Vector3::new(1.0, 1.0, sign);
    let r = u * Matrix3::from_diagonal(&s_diag) * vt;
    let rotation = Rotation::from_matrix_unchecked(r);

    // reflection correction applies to the smallest singular value
    s_diag = Vector3::new(1.0, 1.0, sign);
    let scale = d.dot(&s_diag) / var_s;
    if scale <= 0.0 {
        return Err(Error::DegenerateInput(format!("non-positive scale {scale}")));
    }
    let translation = mu_t - scale * rotation.apply(&mu_s);
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

fn residuals(model: &SimilarityTransform, source: &PointCloud, target: &PointCloud) -> Vec<f64> {
    source
        .points
        .iter()
        .zip(&target.points)
        .map(|(s, t)| (model.apply(s) - t).norm())
        .collect()
}

/// Seed-deterministic RANSAC around [`umeyama`].
///
/// Returns the consensus model refit on all inliers plus the inlier mask.
pub fn umeyama_ransac(
    source: &PointCloud,
    target: &PointCloud,
    cfg: &RansacConfig,
) -> Result<(SimilarityTransform, Vec<bool>)> {
    if source.len() != target.len() {
        return Err(Error::CardinalityMismatch {
            left: source.len(),
            right: target.len(),
        });
    }
    let n = source.len();
    if n < cfg.min_sample_size {
        return Err(Error::DegenerateInput(format!(
            "{n} correspondences < min_sample_size {}",
            cfg.min_sample_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, f64, Vec<bool>)> = None;

    for _ in 0..cfg.max_iterations {
        // sample distinct indices
        let mut idx = Vec::with_capacity(cfg.min_sample_size);
        while idx.len() < cfg.min_sample_size {
            let i = rng.gen_range(0..n);
            if !idx.contains(&i) {
                idx.push(i);
            }
        }
        let sub_s = PointCloud::new(idx.iter().map(|&i| source.points[i]).collect());
        let sub_t = PointCloud::new(idx.iter().map(|&i| target.points[i]).collect());
        let Ok(model) = umeyama(&sub_s, &sub_t) else {
            continue;
        };
        let res = residuals(&model, source, target);
        let mask: Vec<bool> = res.iter().map(|r| *r <= cfg.inlier_threshold).collect();
        let count = mask.iter().filter(|m| **m).count();
        if count < cfg.min_sample_size {
            continue;
        }
        let inlier_res: f64 = res
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(r, _)| r * r)
            .sum();
        let better = match &best {
            None => true,
            Some((bc, br, _)) => count > *bc || (count == *bc && inlier_res < *br),
        };
        if better {
            best = Some((count, inlier_res, mask));
        }
    }

    let Some((count, _, mask)) = best else {
        return Err(Error::NoConsensus {
            best: 0,
            required: cfg.min_sample_size,
        });
    };
    if count < cfg.min_sample_size {
        return Err(Error::NoConsensus {
            best: count,
            required: cfg.min_sample_size,
        });
    }

    // refit on all inliers
    let sub_s = PointCloud::new(
        source
            .points
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(p, _)| *p)
            .collect(),
    );
    let sub_t = PointCloud::new(
        target
            .points
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(p, _)| *p)
            .collect(),
    );
    let model = umeyama(&sub_s, &sub_t)?;
    let res = residuals(&model, source, target);
    let mask: Vec<bool> = res.iter().map(|r| *r <= cfg.inlier_threshold).collect();
    Ok((model, mask))
}

/// Recovers a 9DoF pose from predicted NOCS coordinates via
/// RANSAC-Umeyama; size = scale times the inlier NOCS extents.
pub fn pose_from_nocs(
    coords: &PointCloud,
    observed: &PointCloud,
    cfg: &RansacConfig,
) -> Result<(Pose9, Vec<bool>)> {
    let (model, mask) = umeyama_ransac(coords, observed, cfg)?;
    let inlier_coords = PointCloud::new(
        coords
            .points
            .iter()
            .zip(&mask)
            .filter(|(_, m)| **m)
            .map(|(p, _)| *p)
            .collect(),
    );
    let (lo, hi) = inlier_coords.bounds()?;
    let extents = hi - lo;
    let size = model.scale * extents;
    let size = Vec3::new(size.x.max(1e-9), size.y.max(1e-9), size.z.max(1e-9));
    let pose = Pose9::new(model.rotation, model.translation, size)?;
    Ok((pose, mask))
}
