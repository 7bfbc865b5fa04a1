//! Synthetic category instances: parametric shape families, mean-shape
//! priors and noisy observed clouds with planted outliers.
//!
//! Every generator is a pure function of its seed; the same inputs
//! reproduce the same instance bit for bit.
//!
//! Shape families are linear in their scalar parameter at fixed surface
//! coordinates, so the population mean shape over a parameter grid
//! equals the shape at the mean parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{world_location, PointCloud, Pose9, Rotation, Vec3};
use crate::objective::{gt_inliers, DEFAULT_POINT_THRESHOLD};
use crate::symmetry::{CategoryProfile, SymmetryClass};

/// Built-in synthetic categories.
pub const CATEGORIES: [&str; 5] = ["can", "bowl", "box", "laptop", "camera"];

/// Parameter-grid resolution used to build mean-shape priors.
const PRIOR_GRID: usize = 8;

/// Generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Observed points per instance.
    pub points: usize,
    /// Prior cloud resolution.
    pub prior_points: usize,
    /// Isotropic Gaussian noise applied to observed points (meters).
    pub noise_sigma: f64,
    /// Fraction of observed points displaced into outliers; the planted
    /// count is round(fraction * points).
    pub outlier_fraction: f64,
    /// Translations are drawn uniformly from [-range, range]^3 (meters).
    pub translation_range: f64,
    /// Metric bounding-box diagonal range (meters).
    pub diagonal_range: (f64, f64),
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            points: 1024,
            prior_points: 128,
            noise_sigma: 0.003,
            outlier_fraction: 0.1,
            translation_range: 0.5,
            diagonal_range: (0.15, 0.45),
        }
    }
}

/// One synthetic observation with full ground truth.
#[derive(Debug, Clone)]
pub struct Instance {
    pub category: String,
    pub seed: u64,
    /// Shape parameter in [0, 1].
    pub theta: f64,
    /// Noise level the observation was generated with (meters).
    pub noise_sigma: f64,
    pub pose_gt: Pose9,
    pub observed: PointCloud,
    pub coords_gt: PointCloud,
    pub gt_inliers: Vec<bool>,
}

impl Instance {
    pub fn outlier_count(&self) -> usize {
        self.gt_inliers.iter().filter(|l| !**l).count()
    }
}

// ---------------------------------------------------------------------------
// Shape families
// ---------------------------------------------------------------------------

/// Raw (un-normalized) surface point of a category at shape parameter
/// `theta` and surface coordinate `u` in the unit cube. Linear in
/// `theta` at fixed `u`.
fn surface_point(name: &str, theta: f64, u: [f64; 3]) -> Result<Vec3> {
    let p = match name {
        "can" => {
            let r = 0.25 + 0.15 * theta;
            let h = 1.0;
            let phi = std::f64::consts::TAU * u[1];
            if u[0] < 0.7 {
                // lateral surface
                Vec3::new(r * phi.cos(), h * (u[2] - 0.5), r * phi.sin())
            } else {
                // caps, area-uniform in radius
                let rho = r * u[2].sqrt();
                let y = if u[0] < 0.85 { -h / 2.0 } else { h / 2.0 };
                Vec3::new(rho * phi.cos(), y, rho * phi.sin())
            }
        }
        "bowl" => {
            // open hemispherical shell, rim up
            let r = 0.5 + 0.2 * theta;
            let phi = std::f64::consts::TAU * u[1];
            // area-uniform polar angle on the lower hemisphere
            let cos_a = u[2];
            let sin_a = (1.0 - cos_a * cos_a).max(0.0).sqrt();
            Vec3::new(r * sin_a * phi.cos(), -r * cos_a, r * sin_a * phi.sin())
        }
        "box" => {
            let w = 0.6 + 0.4 * theta;
            let (h, d) = (0.5, 0.9);
            let a = u[1] - 0.5;
            let b = u[2] - 0.5;
            // pick a face pair by fixed weights, then a sign
            if u[0] < 1.0 / 3.0 {
                Vec3::new(w * sgn_half(u[0] * 3.0), h * a, d * b)
            } else if u[0] < 2.0 / 3.0 {
                Vec3::new(w * a, h * sgn_half(u[0] * 3.0 - 1.0), d * b)
            } else {
                Vec3::new(w * a, h * b, d * sgn_half(u[0] * 3.0 - 2.0))
            }
        }
        "laptop" => {
            // open at a right angle, hinge along z: base extends +x,
            // lid extends +y
            let b = 0.5 + 0.3 * theta;
            let (w, lid_h, base_t, lid_t) = (0.8, 0.6, 0.04, 0.03);
            if u[0] < 0.5 {
                // base slab: top/bottom faces
                let y = if u[1] < 0.5 { 0.0 } else { -base_t };
                Vec3::new(b * u[2], y, w * (frac2(u[1]) - 0.5))
            } else {
                // lid slab: front/back faces
                let x = if u[1] < 0.5 { 0.0 } else { -lid_t };
                Vec3::new(x, lid_h * u[2], w * (frac2(u[1]) - 0.5))
            }
        }
        "camera" => {
            // body box + offset lens barrel + side grip; no symmetry
            let r = 0.10 + 0.05 * theta;
            if u[0] < 0.55 {
                // body
                let (w, h, d) = (0.3, 0.4, 0.6);
                let a = u[1] - 0.5;
                let b = u[2] - 0.5;
                if u[0] < 0.55 / 3.0 {
                    Vec3::new(w * sgn_half(u[0] * 3.0 / 0.55), h * a, d * b)
                } else if u[0] < 1.1 / 3.0 {
                    Vec3::new(w * a, h * sgn_half((u[0] * 3.0 - 0.55) / 0.55), d * b)
                } else {
                    Vec3::new(w * a, h * b, d * sgn_half((u[0] * 3.0 - 1.1) / 0.55))
                }
            } else if u[0] < 0.85 {
                // lens barrel along +x, offset toward the top
                let phi = std::f64::consts::TAU * u[1];
                Vec3::new(
                    0.15 + 0.2 * u[2],
                    0.08 + r * phi.sin(),
                    r * phi.cos(),
                )
            } else {
                // grip bump on the +z side
                let a = u[1] - 0.5;
                let b = u[2] - 0.5;
                Vec3::new(0.12 * a - 0.05, 0.25 * b, 0.3 + 0.04 * frac2(u[0] / 0.85))
            }
        }
        other => return Err(Error::UnknownCategory(other.to_string())),
    };
    Ok(p)
}

fn sgn_half(u: f64) -> f64 {
    if u.fract() < 0.5 {
        -0.5
    } else {
        0.5
    }
}

fn frac2(u: f64) -> f64 {
    (u * 2.0).fract()
}

/// Analytic axis-aligned bounds of the raw shape.
fn bounds(name: &str, theta: f64) -> Result<(Vec3, Vec3)> {
    let (min, max) = match name {
        "can" => {
            let r = 0.25 + 0.15 * theta;
            (Vec3::new(-r, -0.5, -r), Vec3::new(r, 0.5, r))
        }
        "bowl" => {
            let r = 0.5 + 0.2 * theta;
            (Vec3::new(-r, -r, -r), Vec3::new(r, 0.0, r))
        }
        "box" => {
            let w = 0.6 + 0.4 * theta;
            (
                Vec3::new(-w / 2.0, -0.25, -0.45),
                Vec3::new(w / 2.0, 0.25, 0.45),
            )
        }
        "laptop" => {
            let b = 0.5 + 0.3 * theta;
            (Vec3::new(-0.03, -0.04, -0.4), Vec3::new(b, 0.6, 0.4))
        }
        "camera" => {
            let r = 0.10 + 0.05 * theta;
            (
                Vec3::new(-0.15, -0.2, -0.3),
                Vec3::new(0.35, (0.08 + r).max(0.2), 0.34),
            )
        }
        other => return Err(Error::UnknownCategory(other.to_string())),
    };
    Ok((min, max))
}

fn symmetry_of(name: &str) -> Result<SymmetryClass> {
    match name {
        "can" | "bowl" => Ok(SymmetryClass::rotational_default()),
        "laptop" => Ok(SymmetryClass::ReflectionXY),
        "box" | "camera" => Ok(SymmetryClass::None),
        other => Err(Error::UnknownCategory(other.to_string())),
    }
}

/// Nominal mean metric bounding-box diagonal per category (meters).
fn mean_diagonal(name: &str) -> Result<f64> {
    match name {
        "can" => Ok(0.20),
        "bowl" => Ok(0.22),
        "box" => Ok(0.30),
        "laptop" => Ok(0.35),
        "camera" => Ok(0.24),
        other => Err(Error::UnknownCategory(other.to_string())),
    }
}

/// Canonicalizes a raw point: center on the analytic bounding box and
/// scale so the box diagonal becomes one.
fn canonicalize(p: &Vec3, min: &Vec3, max: &Vec3) -> Vec3 {
    let center = 0.5 * (min + max);
    (p - center) / (max - min).norm()
}

/// Canonical bounding-box extents (unit diagonal).
fn canonical_extents(name: &str, theta: f64) -> Result<Vec3> {
    let (min, max) = bounds(name, theta)?;
    let e = max - min;
    Ok(e / e.norm())
}

/// Low-discrepancy surface coordinates, fixed per index.
fn halton_u(index: usize) -> [f64; 3] {
    [halton(index + 1, 2), halton(index + 1, 3), halton(index + 1, 5)]
}

fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

// ---------------------------------------------------------------------------
// Public generators
// ---------------------------------------------------------------------------

/// Mean-shape prior and metadata for a built-in category.
///
/// The prior is the average over a uniform parameter grid of the raw
/// shape at fixed surface coordinates, canonicalized afterwards; by
/// linearity it equals the canonical shape at the mean parameter.
pub fn category_profile(name: &str, prior_points: usize) -> Result<CategoryProfile> {
    let sym = symmetry_of(name)?;
    if prior_points == 0 {
        return Err(Error::InvalidConfig("prior_points must be positive".into()));
    }
    let mut points = vec![Vec3::zeros(); prior_points];
    for k in 0..PRIOR_GRID {
        let theta = (k as f64 + 0.5) / PRIOR_GRID as f64;
        for (i, p) in points.iter_mut().enumerate() {
            *p += surface_point(name, theta, halton_u(i))? / PRIOR_GRID as f64;
        }
    }
    // grid mean parameter is exactly 1/2
    let (min, max) = bounds(name, 0.5)?;
    let prior = PointCloud::new(
        points.iter().map(|p| canonicalize(p, &min, &max)).collect(),
    );
    let mean_size = mean_diagonal(name)? * canonical_extents(name, 0.5)?;
    Ok(CategoryProfile {
        name: name.to_string(),
        symmetry: sym,
        mean_size,
        prior,
    })
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    loop {
        let axis = Vec3::new(
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = axis.norm();
        if n > 1e-3 && n < 1.0 {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            return Rotation::from_axis_angle(axis / n, angle);
        }
    }
}

/// Deterministic synthetic observation for `(category, seed)`.
pub fn make_instance(name: &str, seed: u64, cfg: &GenConfig) -> Result<Instance> {
    if cfg.points == 0 {
        return Err(Error::InvalidConfig("points must be positive".into()));
    }
    if !(0.0..=0.9).contains(&cfg.outlier_fraction) {
        return Err(Error::InvalidConfig(format!(
            "outlier fraction {} outside [0, 0.9]",
            cfg.outlier_fraction
        )));
    }
    if cfg.diagonal_range.0 <= 0.0 || cfg.diagonal_range.1 < cfg.diagonal_range.0 {
        return Err(Error::InvalidConfig("bad diagonal range".into()));
    }
    symmetry_of(name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ category_salt(name));

    let theta: f64 = rng.gen_range(0.0..1.0);
    let (min, max) = bounds(name, theta)?;
    let extents = canonical_extents(name, theta)?;
    let diag = rng.gen_range(cfg.diagonal_range.0..=cfg.diagonal_range.1);
    let rot = random_rotation(&mut rng);
    let t = Vec3::new(
        rng.gen_range(-cfg.translation_range..=cfg.translation_range),
        rng.gen_range(-cfg.translation_range..=cfg.translation_range),
        rng.gen_range(-cfg.translation_range..=cfg.translation_range),
    );
    let pose_gt = Pose9::new(rot, t, diag * extents)?;

    let mut coords = Vec::with_capacity(cfg.points);
    let mut observed = Vec::with_capacity(cfg.points);
    for _ in 0..cfg.points {
        let u = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let c = canonicalize(&surface_point(name, theta, u)?, &min, &max);
        let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
        let noise = cfg.noise_sigma * Vec3::new(gauss(), gauss(), gauss());
        observed.push(world_location(&c, &pose_gt) + noise);
        coords.push(c);
    }

    // plant exactly round(f * N) outliers at displacements strictly
    // beyond 1.5x the inlier threshold
    let n_out = (cfg.outlier_fraction * cfg.points as f64).round() as usize;
    let mut indices: Vec<usize> = (0..cfg.points).collect();
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
    for &idx in indices.iter().take(n_out) {
        let dir = loop {
            let d = Vec3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = d.norm();
            if n > 1e-3 && n < 1.0 {
                break d / n;
            }
        };
        let magnitude = DEFAULT_POINT_THRESHOLD * rng.gen_range(1.8..3.5);
        observed[idx] += magnitude * dir;
    }

    let observed = PointCloud::new(observed);
    let coords_gt = PointCloud::new(coords);
    let labels = gt_inliers(&observed, &coords_gt, &pose_gt, DEFAULT_POINT_THRESHOLD)?.labels;
    Ok(Instance {
        category: name.to_string(),
        seed,
        theta,
        noise_sigma: cfg.noise_sigma,
        pose_gt,
        observed,
        coords_gt,
        gt_inliers: labels,
    })
}

fn category_salt(name: &str) -> u64 {
    // stable per-category stream separation
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}
