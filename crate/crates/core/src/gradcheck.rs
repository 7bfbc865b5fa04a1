//! Central finite-difference verification of the analytic gradients.
//!
//! The checker works on the flattened variable vector: every component
//! is perturbed by a relative step and the symmetric difference of the
//! weighted total is compared against the analytic gradient.

use rand::Rng;

use crate::error::Result;
use crate::geometry::{PointCloud, Pose9, PoseParams, Rotation, Vec3};
use crate::objective::{
    evaluate, gt_inliers, LossWeights, ObjectiveOptions, Scene, Variables, DEFAULT_POINT_THRESHOLD,
};
use crate::prior::DeformationField;
use crate::symmetry::SymmetryClass;

/// Relative perturbation applied per component.
pub const DEFAULT_STEP: f64 = 1e-6;
/// Maximum allowed normalized deviation between analytic and numeric
/// gradients.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub label: String,
    pub dimensions: usize,
    pub max_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Owned per-instance data; [`Scene`] borrows from it.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub observed: PointCloud,
    pub prior: PointCloud,
    pub mean_size: Vec3,
    pub sym: SymmetryClass,
    pub pose_supervision: Pose9,
    pub pose_gt: Pose9,
    pub inliers: Vec<bool>,
    pub weights: LossWeights,
    pub options: ObjectiveOptions,
}

impl SceneData {
    pub fn scene(&self) -> Scene<'_> {
        Scene {
            observed: &self.observed,
            prior: &self.prior,
            mean_size: self.mean_size,
            sym: self.sym,
            pose_supervision: self.pose_supervision,
            pose_gt: self.pose_gt,
            inliers: &self.inliers,
            weights: self.weights,
            options: self.options,
        }
    }

    /// Variables that reproduce the ground truth exactly; only
    /// meaningful on scenes built by [`perfect_scene_data`].
    pub fn perfect_variables(&self) -> Variables {
        let n = self.observed.len();
        let p = self.prior.len();
        let centroid = self.observed.centroid().unwrap();
        let pose = PoseParams {
            rx_raw: self.pose_gt.rotation.column(0),
            ry_raw: self.pose_gt.rotation.column(1),
            t_residual: self.pose_gt.translation - centroid,
            s_residual: self.pose_gt.size - self.mean_size,
        };
        // logit gap large enough that the softmax underflows to an
        // exact one-hot row
        let mut logits = vec![-800.0; n * p];
        for i in 0..n {
            logits[i * p + i.min(p - 1)] = 0.0;
        }
        let mirrored = self
            .observed
            .points
            .iter()
            .map(|q| crate::symmetry::mirror_world(q, &self.pose_gt, &self.sym))
            .collect();
        Variables {
            pose,
            deformation: DeformationField::zeros(p),
            logits,
            mirrored,
            mask_scores: self
                .inliers
                .iter()
                .map(|l| if *l { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Generic (kink-free with overwhelming probability) random
    /// variables for gradient checking.
    pub fn random_variables<R: Rng>(&self, rng: &mut R) -> Variables {
        let n = self.observed.len();
        let p = self.prior.len();
        let centroid = self.observed.centroid().unwrap();
        let unit = |rng: &mut R| {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if v.norm() < 0.1 {
                Vec3::new(1.0, 0.2, -0.3)
            } else {
                v
            }
        };
        let rx = unit(rng);
        let mut ry = unit(rng);
        // keep the raw columns well away from parallel
        if rx.cross(&ry).norm() < 0.1 {
            ry = Vec3::new(-ry.y, ry.z, ry.x) + Vec3::new(0.3, -0.2, 0.5);
        }
        let s_res = Vec3::new(
            rng.gen_range(-0.2..0.4),
            rng.gen_range(-0.2..0.4),
            rng.gen_range(-0.2..0.4),
        )
        .component_mul(&self.mean_size);
        let pose = PoseParams {
            rx_raw: rx,
            ry_raw: ry,
            t_residual: self.pose_gt.translation - centroid
                + Vec3::new(
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                ),
            s_residual: s_res,
        };
        Variables {
            pose,
            deformation: DeformationField {
                displacements: (0..p)
                    .map(|_| {
                        Vec3::new(
                            rng.gen_range(-0.05..0.05),
                            rng.gen_range(-0.05..0.05),
                            rng.gen_range(-0.05..0.05),
                        )
                    })
                    .collect(),
            },
            logits: (0..n * p).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            mirrored: self
                .observed
                .points
                .iter()
                .map(|q| {
                    q + Vec3::new(
                        rng.gen_range(-0.1..0.1),
                        rng.gen_range(-0.1..0.1),
                        rng.gen_range(-0.1..0.1),
                    )
                })
                .collect(),
            mask_scores: (0..n).map(|_| rng.gen_range(0.05..0.95)).collect(),
        }
    }
}

fn random_rotation<R: Rng>(rng: &mut R) -> Rotation {
    let axis = Vec3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-3 {
        Vec3::new(0.0, 1.0, 0.0)
    } else {
        axis.normalize()
    };
    Rotation::from_axis_angle(axis, rng.gen_range(-3.0..3.0))
}

fn random_pose<R: Rng>(rng: &mut R) -> Pose9 {
    let extents = Vec3::new(
        rng.gen_range(0.3..1.0),
        rng.gen_range(0.3..1.0),
        rng.gen_range(0.3..1.0),
    )
    .normalize();
    let scale = rng.gen_range(0.2..0.8);
    Pose9::new(
        random_rotation(rng),
        Vec3::new(
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
        ),
        scale * extents,
    )
    .unwrap()
}

/// Random generic scene: observed points are world locations of random
/// canonical coordinates under a random pose, with about a quarter of
/// them displaced beyond the outlier threshold when requested.
pub fn random_scene_data<R: Rng>(
    rng: &mut R,
    n: usize,
    p: usize,
    with_outliers: bool,
) -> SceneData {
    let pose_gt = random_pose(rng);
    let sym = match rng.gen_range(0..3) {
        0 => SymmetryClass::None,
        1 => SymmetryClass::RotationalY { candidates: 12 },
        _ => SymmetryClass::ReflectionXY,
    };
    let coords: Vec<Vec3> = (0..n)
        .map(|_| {
            Vec3::new(
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            )
        })
        .collect();
    let mut observed: Vec<Vec3> = coords
        .iter()
        .map(|c| crate::geometry::world_location(c, &pose_gt))
        .collect();
    if with_outliers {
        let n_out = (n / 4).max(1);
        for q in observed.iter_mut().take(n_out) {
            let dir = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let dir = if dir.norm() < 1e-3 {
                Vec3::new(1.0, 0.0, 0.0)
            } else {
                dir.normalize()
            };
            *q += dir * 2.0 * DEFAULT_POINT_THRESHOLD;
        }
    }
    let observed = PointCloud::new(observed);
    let coords_cloud = PointCloud::new(coords);
    let inliers = gt_inliers(&observed, &coords_cloud, &pose_gt, DEFAULT_POINT_THRESHOLD)
        .unwrap()
        .labels;
    let prior = PointCloud::new(
        (0..p)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                )
            })
            .collect(),
    );
    let mean_size = Vec3::new(0.5, 0.5, 0.5);
    SceneData {
        observed,
        prior,
        mean_size,
        sym,
        pose_supervision: pose_gt,
        pose_gt,
        inliers,
        weights: LossWeights::default(),
        options: ObjectiveOptions::default(),
    }
}

/// Scene on which [`SceneData::perfect_variables`] drives every term to
/// (numerically) zero: observed points are exactly the world locations
/// of the prior points, no symmetry, no outliers.
pub fn perfect_scene_data<R: Rng>(rng: &mut R, n: usize) -> SceneData {
    let pose_gt = random_pose(rng);
    let prior = PointCloud::new(
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                    rng.gen_range(-0.4..0.4),
                )
            })
            .collect(),
    );
    let observed = prior.map(|c| crate::geometry::world_location(c, &pose_gt));
    SceneData {
        inliers: vec![true; n],
        observed,
        prior,
        mean_size: Vec3::new(0.5, 0.5, 0.5),
        sym: SymmetryClass::None,
        pose_supervision: pose_gt,
        pose_gt,
        weights: LossWeights::default(),
        options: ObjectiveOptions::default(),
    }
}

/// Symmetric-difference numeric gradient of the weighted total.
pub fn finite_difference_gradient(
    scene: &Scene,
    vars: &Variables,
    step: f64,
) -> Result<Vec<f64>> {
    let x = vars.to_flat();
    let mut fd = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        let mut xp = x.clone();
        xp[i] += h;
        let fp = evaluate(scene, &Variables::from_flat(vars, &xp), false)?.total;
        xp[i] = x[i] - h;
        let fm = evaluate(scene, &Variables::from_flat(vars, &xp), false)?.total;
        fd[i] = (fp - fm) / (2.0 * h);
    }
    Ok(fd)
}

/// Normalized max deviation between two gradient vectors.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = (0.0, 0);
    for (i, (a, f)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - f).abs() / a.abs().max(f.abs()).max(1.0);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    worst
}

/// Checks the analytic gradient of the full active objective at `vars`.
pub fn check_gradients(
    label: &str,
    data: &SceneData,
    vars: &Variables,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let scene = data.scene();
    let report = evaluate(&scene, vars, true)?;
    let analytic = report.gradients.expect("gradients requested").to_flat();
    let numeric = finite_difference_gradient(&scene, vars, config.step)?;
    let (max_error, worst_index) = compare_gradients(&analytic, &numeric);
    Ok(GradCheckReport {
        label: label.to_string(),
        dimensions: analytic.len(),
        max_error,
        worst_index,
        passed: max_error <= config.tolerance,
    })
}

/// Standard battery covering each symmetry class, both loss variants
/// and the pose-coupled/uncoupled reconstruction paths.
pub fn standard_battery(seed: u64) -> Result<Vec<GradCheckReport>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let config = GradCheckConfig::default();
    let mut reports = Vec::new();

    let case = |rng: &mut rand_chacha::ChaCha8Rng,
                    label: &str,
                    tweak: &dyn Fn(&mut SceneData)|
     -> Result<GradCheckReport> {
        let mut data = random_scene_data(rng, 10, 4, true);
        tweak(&mut data);
        let vars = data.random_variables(rng);
        check_gradients(label, &data, &vars, &config)
    };

    reports.push(case(&mut rng, "full/none", &|d| {
        d.sym = SymmetryClass::None
    })?);
    reports.push(case(&mut rng, "full/rotational_y", &|d| {
        d.sym = SymmetryClass::RotationalY { candidates: 12 }
    })?);
    reports.push(case(&mut rng, "full/reflection_xy", &|d| {
        d.sym = SymmetryClass::ReflectionXY
    })?);
    reports.push(case(&mut rng, "traditional_losses", &|d| {
        d.options.use_sym_losses = false
    })?);
    reports.push(case(&mut rng, "recon_uncoupled", &|d| {
        d.options.recon_with_predicted_pose = false
    })?);
    reports.push(case(&mut rng, "prior_only", &|d| {
        d.options.enable_pose = false;
        d.options.enable_recon = false;
    })?);
    reports.push(case(&mut rng, "pose_only", &|d| {
        d.options.enable_prior = false;
        d.options.enable_recon = false;
        d.options.enable_mask = false;
    })?);
    Ok(reports)
}
