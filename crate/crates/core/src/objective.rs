//! Loss terms of the training objective with analytic gradients.
//!
//! The total objective is
//! `L = l1*L_pose + l2*L_SP + l3*L_mask + l4*L_recon + l5*L_con`
//! where `L_SP` bundles the symmetry-aware coordinate and shape terms
//! plus small regularizers on the deformation field and matching
//! matrix. Per-point L1 means the sum of absolute components; terms
//! restricted to inliers average over the inlier subset only.
//!
//! Gradients are hand-derived and checked against central finite
//! differences (see the `gradcheck` module).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    nocs_coordinate, recover_rotation, recover_size, recover_translation, Mat3, PointCloud, Pose9,
    PoseParams, Vec3,
};
use crate::prior::{
    deform, deformation_regularizer, matching_regularizer, DeformationField, MatchingMatrix,
};
use crate::symmetry::{candidate_rotations, mirror_point, mirror_world, SymmetryClass};

/// Default distance threshold separating inliers from outliers (meters).
pub const DEFAULT_POINT_THRESHOLD: f64 = 0.1;

/// Outer term weights plus the small weights applied to the
/// shape-prior regularizers inside `L_SP`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub pose: f64,
    pub shape_prior: f64,
    pub mask: f64,
    pub reconstruction: f64,
    pub consistency: f64,
    #[serde(default = "default_reg")]
    pub sp_deform_reg: f64,
    #[serde(default = "default_reg")]
    pub sp_matching_reg: f64,
}

fn default_reg() -> f64 {
    0.01
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pose: 8.0,
            shape_prior: 10.0,
            mask: 1.0,
            reconstruction: 1.0,
            consistency: 1.0,
            sp_deform_reg: 0.01,
            sp_matching_reg: 0.01,
        }
    }
}

/// Hard inlier labels plus soft scores in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct InlierMask {
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
}

impl InlierMask {
    pub fn all_inliers(n: usize) -> Self {
        InlierMask {
            labels: vec![true; n],
            scores: vec![1.0; n],
        }
    }

    pub fn inlier_count(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }
}

/// Labels each observed point by its distance to the ground-truth
/// location p_gt = R (L c) + t; outlier iff the distance strictly
/// exceeds the threshold.
pub fn gt_inliers(
    observed: &PointCloud,
    coords_gt: &PointCloud,
    pose_gt: &Pose9,
    threshold: f64,
) -> Result<InlierMask> {
    if observed.len() != coords_gt.len() {
        return Err(Error::CardinalityMismatch {
            left: observed.len(),
            right: coords_gt.len(),
        });
    }
    let labels: Vec<bool> = observed
        .points
        .iter()
        .zip(&coords_gt.points)
        .map(|(p, c)| (p - crate::geometry::world_location(c, pose_gt)).norm() <= threshold)
        .collect();
    let scores = labels.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect();
    Ok(InlierMask { labels, scores })
}

fn l1(v: &Vec3) -> f64 {
    v.x.abs() + v.y.abs() + v.z.abs()
}

fn sign(v: &Vec3) -> Vec3 {
    Vec3::new(sgn(v.x), sgn(v.y), sgn(v.z))
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// L1 pose supervision. Translation and size contribute component sums;
/// rotation compares the predicted columns: only r_y for rotational
/// symmetry, both r_x and r_y otherwise.
pub fn pose_loss(pred: &Pose9, gt: &Pose9, sym: &SymmetryClass) -> f64 {
    let mut loss = l1(&(pred.translation - gt.translation)) + l1(&(pred.size - gt.size));
    loss += l1(&(pred.rotation.column(1) - gt.rotation.column(1)));
    if !sym.is_rotational() {
        loss += l1(&(pred.rotation.column(0) - gt.rotation.column(0)));
    }
    loss
}

/// Mean inlier L1 distance between the pose-implied NOCS coordinates of
/// the observed points and the predicted coordinates.
pub fn consistency_loss(
    coords_pred: &PointCloud,
    observed: &PointCloud,
    pose_pred: &Pose9,
    mask: &InlierMask,
) -> Result<f64> {
    check_paired(coords_pred, observed, mask)?;
    let n_in = require_inliers(mask)?;
    let mut total = 0.0;
    for ((c, p), inlier) in coords_pred
        .points
        .iter()
        .zip(&observed.points)
        .zip(&mask.labels)
    {
        if *inlier {
            total += l1(&(nocs_coordinate(p, pose_pred) - c));
        }
    }
    Ok(total / n_in as f64)
}

/// Symmetry-aware coordinate loss: minimum over the candidate rotation
/// orbit of the mean inlier L1 distance between predicted coordinates
/// and the candidate-pose coordinates of the observed points.
pub fn sym_coordinate_loss(
    coords_pred: &PointCloud,
    observed: &PointCloud,
    pose_gt: &Pose9,
    sym: &SymmetryClass,
    mask: &InlierMask,
) -> Result<f64> {
    Ok(coordinate_loss_grad(coords_pred, observed, pose_gt, sym, true, mask, false)?.0)
}

/// Bidirectional average nearest-neighbor (Chamfer) distance.
pub fn sym_shape_loss(deformed: &PointCloud, mirrored: &PointCloud) -> Result<f64> {
    if deformed.is_empty() || mirrored.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(chamfer_grad(deformed, mirrored, false).0)
}

/// Mean inlier L1 distance between the pose-conjugated mirror of each
/// observed point and its predicted mirrored point.
pub fn reconstruction_loss(
    mirrored_pred: &PointCloud,
    observed: &PointCloud,
    pose: &Pose9,
    sym: &SymmetryClass,
    mask: &InlierMask,
) -> Result<f64> {
    check_paired(mirrored_pred, observed, mask)?;
    let n_in = require_inliers(mask)?;
    let mut total = 0.0;
    for ((m, p), inlier) in mirrored_pred
        .points
        .iter()
        .zip(&observed.points)
        .zip(&mask.labels)
    {
        if *inlier {
            total += l1(&(mirror_world(p, pose, sym) - m));
        }
    }
    Ok(total / n_in as f64)
}

/// Mean absolute difference between soft scores and hard labels.
pub fn mask_loss(scores: &[f64], gt: &InlierMask) -> Result<f64> {
    if scores.len() != gt.labels.len() {
        return Err(Error::CardinalityMismatch {
            left: scores.len(),
            right: gt.labels.len(),
        });
    }
    let n = scores.len();
    let total: f64 = scores
        .iter()
        .zip(&gt.labels)
        .map(|(s, l)| (s - if *l { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(total / n as f64)
}

fn check_paired(a: &PointCloud, b: &PointCloud, mask: &InlierMask) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::CardinalityMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if mask.labels.len() != a.len() {
        return Err(Error::CardinalityMismatch {
            left: mask.labels.len(),
            right: a.len(),
        });
    }
    Ok(())
}

fn require_inliers(mask: &InlierMask) -> Result<usize> {
    let n = mask.inlier_count();
    if n == 0 {
        return Err(Error::NoInliers);
    }
    Ok(n)
}

// ---------------------------------------------------------------------------
// Joint evaluation with gradients
// ---------------------------------------------------------------------------

/// Free variables of the per-instance optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Variables {
    pub pose: PoseParams,
    pub deformation: DeformationField,
    /// Row-major |obs| x |prior| matching logits.
    pub logits: Vec<f64>,
    pub mirrored: Vec<Vec3>,
    pub mask_scores: Vec<f64>,
}

impl Variables {
    pub fn dim(&self) -> usize {
        12 + 3 * self.deformation.len() + self.logits.len() + 3 * self.mirrored.len()
            + self.mask_scores.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        for x in [
            self.pose.rx_raw,
            self.pose.ry_raw,
            self.pose.t_residual,
            self.pose.s_residual,
        ] {
            v.extend_from_slice(&[x.x, x.y, x.z]);
        }
        for d in &self.deformation.displacements {
            v.extend_from_slice(&[d.x, d.y, d.z]);
        }
        v.extend_from_slice(&self.logits);
        for m in &self.mirrored {
            v.extend_from_slice(&[m.x, m.y, m.z]);
        }
        v.extend_from_slice(&self.mask_scores);
        v
    }

    pub fn from_flat(template: &Variables, flat: &[f64]) -> Variables {
        assert_eq!(flat.len(), template.dim());
        let mut i = 0;
        let take3 = |i: &mut usize| {
            let v = Vec3::new(flat[*i], flat[*i + 1], flat[*i + 2]);
            *i += 3;
            v
        };
        let rx = take3(&mut i);
        let ry = take3(&mut i);
        let t = take3(&mut i);
        let s = take3(&mut i);
        let displacements = (0..template.deformation.len())
            .map(|_| take3(&mut i))
            .collect();
        let logits = flat[i..i + template.logits.len()].to_vec();
        i += template.logits.len();
        let mirrored = (0..template.mirrored.len()).map(|_| take3(&mut i)).collect();
        let mask_scores = flat[i..i + template.mask_scores.len()].to_vec();
        Variables {
            pose: PoseParams {
                rx_raw: rx,
                ry_raw: ry,
                t_residual: t,
                s_residual: s,
            },
            deformation: DeformationField { displacements },
            logits,
            mirrored,
            mask_scores,
        }
    }
}

/// Gradient blocks matching [`Variables`] layout.
#[derive(Debug, Clone)]
pub struct GradientBlocks {
    pub rx_raw: Vec3,
    pub ry_raw: Vec3,
    pub t_residual: Vec3,
    pub s_residual: Vec3,
    pub deformation: Vec<Vec3>,
    pub logits: Vec<f64>,
    pub mirrored: Vec<Vec3>,
    pub mask_scores: Vec<f64>,
}

impl GradientBlocks {
    fn zeros(vars: &Variables) -> Self {
        GradientBlocks {
            rx_raw: Vec3::zeros(),
            ry_raw: Vec3::zeros(),
            t_residual: Vec3::zeros(),
            s_residual: Vec3::zeros(),
            deformation: vec![Vec3::zeros(); vars.deformation.len()],
            logits: vec![0.0; vars.logits.len()],
            mirrored: vec![Vec3::zeros(); vars.mirrored.len()],
            mask_scores: vec![0.0; vars.mask_scores.len()],
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for x in [self.rx_raw, self.ry_raw, self.t_residual, self.s_residual] {
            v.extend_from_slice(&[x.x, x.y, x.z]);
        }
        for d in &self.deformation {
            v.extend_from_slice(&[d.x, d.y, d.z]);
        }
        v.extend_from_slice(&self.logits);
        for m in &self.mirrored {
            v.extend_from_slice(&[m.x, m.y, m.z]);
        }
        v.extend_from_slice(&self.mask_scores);
        v
    }
}

/// Which parts of the objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    /// Direct pose supervision term.
    pub enable_pose: bool,
    /// Shape-prior branch (coordinate + shape terms, regularizers).
    pub enable_prior: bool,
    /// Symmetry-aware variants of the shape-prior terms; when false the
    /// traditional single-candidate / unmirrored variants are used.
    pub use_sym_losses: bool,
    /// Symmetry reconstruction term.
    pub enable_recon: bool,
    /// Evaluate the reconstruction term against the predicted pose as
    /// well, coupling the reconstruction branch to the pose.
    pub recon_with_predicted_pose: bool,
    /// Mask supervision term.
    pub enable_mask: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            enable_pose: true,
            enable_prior: true,
            use_sym_losses: true,
            enable_recon: true,
            recon_with_predicted_pose: true,
            enable_mask: true,
        }
    }
}

/// Fixed per-instance data for objective evaluation.
#[derive(Debug, Clone)]
pub struct Scene<'a> {
    pub observed: &'a PointCloud,
    pub prior: &'a PointCloud,
    pub mean_size: Vec3,
    pub sym: SymmetryClass,
    /// Target of the direct pose term (ground truth, or a degraded
    /// pseudo-label when emulating an imperfect regression head).
    pub pose_supervision: Pose9,
    /// Exact ground truth used by candidate generation, mirror targets
    /// and canonicalization.
    pub pose_gt: Pose9,
    /// Restriction mask for the inlier-only terms.
    pub inliers: &'a [bool],
    pub weights: LossWeights,
    pub options: ObjectiveOptions,
}

/// Per-term values and the weighted total; gradients are present when
/// requested.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub pose: f64,
    pub sp_coordinate: f64,
    pub sp_shape: f64,
    pub sp_deform_reg: f64,
    pub sp_matching_reg: f64,
    pub sp_total: f64,
    pub mask: f64,
    pub reconstruction: f64,
    pub consistency: f64,
    pub total: f64,
    #[serde(skip)]
    pub gradients: Option<GradientBlocks>,
}

/// Evaluates every active term and (optionally) the analytic gradient
/// of the weighted total with respect to all variables.
pub fn evaluate(scene: &Scene, vars: &Variables, want_grad: bool) -> Result<LossReport> {
    let n = scene.observed.len();
    if scene.inliers.len() != n {
        return Err(Error::CardinalityMismatch {
            left: scene.inliers.len(),
            right: n,
        });
    }
    let p = scene.prior.len();
    let w = &scene.weights;
    let opt = &scene.options;
    let mut g = want_grad.then(|| GradientBlocks::zeros(vars));

    // recover the predicted pose when any term needs it
    let needs_pose = opt.enable_pose
        || (opt.enable_prior && opt.enable_pose)
        || (opt.enable_recon && opt.recon_with_predicted_pose);
    let pose_chain = if needs_pose {
        Some(PoseChain::forward(&vars.pose, scene.observed, &scene.mean_size)?)
    } else {
        None
    };

    let mut report = LossReport {
        pose: 0.0,
        sp_coordinate: 0.0,
        sp_shape: 0.0,
        sp_deform_reg: 0.0,
        sp_matching_reg: 0.0,
        sp_total: 0.0,
        mask: 0.0,
        reconstruction: 0.0,
        consistency: 0.0,
        total: 0.0,
        gradients: None,
    };

    // accumulated gradient on the predicted pose (R, t, s), chained
    // through Gram-Schmidt once at the end
    let mut grad_r = Mat3::zeros();
    let mut grad_t = Vec3::zeros();
    let mut grad_s = Vec3::zeros();

    if opt.enable_pose {
        let chain = pose_chain.as_ref().unwrap();
        let (value, gr, gt, gs) = pose_loss_grad(chain, &scene.pose_supervision, &scene.sym);
        report.pose = value;
        if want_grad {
            grad_r += w.pose * gr;
            grad_t += w.pose * gt;
            grad_s += w.pose * gs;
        }
    }

    // shape prior branch
    let (matching, deformed, coords) = if opt.enable_prior {
        let matching = MatchingMatrix::from_logits(n, p, &vars.logits);
        let deformed = deform(scene.prior, &vars.deformation)?;
        let coords = reconstruct(&matching, &deformed);
        (Some(matching), Some(deformed), Some(coords))
    } else {
        (None, None, None)
    };

    if opt.enable_prior {
        let coords = coords.as_ref().unwrap();
        let deformed = deformed.as_ref().unwrap();
        let mut dc = want_grad.then(|| vec![Vec3::zeros(); n]);

        // coordinate supervision (Eq. 8 or its single-candidate form)
        let (coord_value, coord_dc) = coordinate_loss_grad(
            coords,
            scene.observed,
            &scene.pose_gt,
            &scene.sym,
            opt.use_sym_losses,
            &mask_of(scene.inliers),
            want_grad,
        )?;
        report.sp_coordinate = coord_value;
        if let (Some(dc), Some(cdc)) = (dc.as_mut(), coord_dc) {
            for (a, b) in dc.iter_mut().zip(cdc) {
                *a += w.shape_prior * b;
            }
        }

        // shape recovery (Eq. 7): Chamfer against the (mirrored)
        // canonical observed inliers
        let target = canonical_inliers(scene, opt.use_sym_losses)?;
        let (shape_value, shape_dq) = chamfer_grad(deformed, &target, want_grad);
        report.sp_shape = shape_value;

        // regularizers
        report.sp_deform_reg = deformation_regularizer(&vars.deformation);
        report.sp_matching_reg = matching_regularizer(matching.as_ref().unwrap());

        report.sp_total = report.sp_coordinate
            + report.sp_shape
            + w.sp_deform_reg * report.sp_deform_reg
            + w.sp_matching_reg * report.sp_matching_reg;

        // consistency between the direct pose and the coordinates
        if opt.enable_pose {
            let chain = pose_chain.as_ref().unwrap();
            let (con_value, con_dc, gr, gt, gs) =
                consistency_grad(coords, scene.observed, chain, scene.inliers, want_grad)?;
            report.consistency = con_value;
            if want_grad {
                grad_r += w.consistency * gr;
                grad_t += w.consistency * gt;
                grad_s += w.consistency * gs;
                if let (Some(dc), Some(cdc)) = (dc.as_mut(), con_dc) {
                    for (a, b) in dc.iter_mut().zip(cdc) {
                        *a += w.consistency * b;
                    }
                }
            }
        }

        if let Some(g) = g.as_mut() {
            let matching = matching.as_ref().unwrap();
            let dc = dc.as_ref().unwrap();
            // chain dL/dC into the deformed prior and the logits
            let mut grad_deformed = vec![Vec3::zeros(); p];
            let mut grad_m = vec![0.0; n * p];
            for i in 0..n {
                let row = matching.row(i);
                let dci = dc[i];
                if dci == Vec3::zeros() {
                    continue;
                }
                for j in 0..p {
                    grad_deformed[j] += row[j] * dci;
                    grad_m[i * p + j] = dci.dot(&deformed.points[j]);
                }
            }
            // Chamfer and deformation regularizer act on the deformed
            // prior / field directly
            if let Some(dq) = shape_dq {
                for (a, b) in grad_deformed.iter_mut().zip(dq) {
                    *a += w.shape_prior * b;
                }
            }
            for (gd, d) in g.deformation.iter_mut().zip(&vars.deformation.displacements) {
                *gd += w.shape_prior * w.sp_deform_reg * 2.0 * d / p as f64;
            }
            for (gd, gq) in g.deformation.iter_mut().zip(&grad_deformed) {
                *gd += gq;
            }
            // entropy regularizer gradient w.r.t. M, then softmax chain
            let matching_ref = matching;
            let reg_scale = w.shape_prior * w.sp_matching_reg / n as f64;
            for i in 0..n {
                let row = matching_ref.row(i);
                let mut dot = 0.0;
                let mut gm_row = vec![0.0; p];
                for j in 0..p {
                    let mut gm = grad_m[i * p + j];
                    if row[j] > 0.0 {
                        gm += -reg_scale * (row[j].ln() + 1.0);
                    }
                    gm_row[j] = gm;
                    dot += row[j] * gm;
                }
                for j in 0..p {
                    g.logits[i * p + j] += row[j] * (gm_row[j] - dot);
                }
            }
        }
    }

    if opt.enable_recon {
        let mirrored_cloud = PointCloud::new(vars.mirrored.clone());
        if opt.recon_with_predicted_pose {
            let chain = pose_chain.as_ref().unwrap();
            let (v_gt, dm_gt, _, _) = recon_grad(
                &mirrored_cloud,
                scene.observed,
                &scene.pose_gt,
                &scene.sym,
                scene.inliers,
                want_grad,
                false,
            )?;
            let (v_pred, dm_pred, gr, gt) = recon_grad(
                &mirrored_cloud,
                scene.observed,
                &chain.pose,
                &scene.sym,
                scene.inliers,
                want_grad,
                true,
            )?;
            report.reconstruction = 0.5 * (v_gt + v_pred);
            if let Some(g) = g.as_mut() {
                for ((a, b1), b2) in g
                    .mirrored
                    .iter_mut()
                    .zip(dm_gt.unwrap())
                    .zip(dm_pred.unwrap())
                {
                    *a += w.reconstruction * 0.5 * (b1 + b2);
                }
                grad_r += w.reconstruction * 0.5 * gr.unwrap();
                grad_t += w.reconstruction * 0.5 * gt.unwrap();
            }
        } else {
            let (v_gt, dm_gt, _, _) = recon_grad(
                &mirrored_cloud,
                scene.observed,
                &scene.pose_gt,
                &scene.sym,
                scene.inliers,
                want_grad,
                false,
            )?;
            report.reconstruction = v_gt;
            if let Some(g) = g.as_mut() {
                for (a, b) in g.mirrored.iter_mut().zip(dm_gt.unwrap()) {
                    *a += w.reconstruction * b;
                }
            }
        }
    }

    if opt.enable_mask {
        let gt_mask = InlierMask {
            labels: scene.inliers.to_vec(),
            scores: scene.inliers.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect(),
        };
        // clamped parameterization: the raw variables are free, the
        // scores live in [0,1]. The labels sit exactly on the clamp
        // bounds, so a score that overshoots its label saturates there
        // with zero loss and zero gradient (the block freezes itself
        // instead of oscillating around the L1 kink).
        let clamped: Vec<f64> = vars.mask_scores.iter().map(|s| s.clamp(0.0, 1.0)).collect();
        report.mask = mask_loss(&clamped, &gt_mask)?;
        if let Some(g) = g.as_mut() {
            let n_f = clamped.len() as f64;
            for ((gs, s), l) in g.mask_scores.iter_mut().zip(&clamped).zip(&gt_mask.labels) {
                *gs += w.mask * sgn(s - if *l { 1.0 } else { 0.0 }) / n_f;
            }
        }
    }

    report.total = w.pose * report.pose
        + w.shape_prior * report.sp_total
        + w.mask * report.mask
        + w.reconstruction * report.reconstruction
        + w.consistency * report.consistency;

    if let Some(mut g_out) = g {
        if let Some(chain) = pose_chain.as_ref() {
            let (grx, gry, gtr, gsr) = chain.backprop(&grad_r, &grad_t, &grad_s);
            g_out.rx_raw = grx;
            g_out.ry_raw = gry;
            g_out.t_residual = gtr;
            g_out.s_residual = gsr;
        }
        report.gradients = Some(g_out);
    }
    Ok(report)
}

fn mask_of(labels: &[bool]) -> InlierMask {
    InlierMask {
        labels: labels.to_vec(),
        scores: labels.iter().map(|l| if *l { 1.0 } else { 0.0 }).collect(),
    }
}

fn reconstruct(m: &MatchingMatrix, deformed: &PointCloud) -> PointCloud {
    let mut out = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = m.row(r);
        let mut acc = Vec3::zeros();
        for (w, q) in row.iter().zip(&deformed.points) {
            acc += *w * q;
        }
        out.push(acc);
    }
    PointCloud::new(out)
}

/// Mirrored (or plain) canonical coordinates of the observed inliers
/// under the ground-truth pose; target of the shape recovery term.
fn canonical_inliers(scene: &Scene, mirrored: bool) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (p, inlier) in scene.observed.points.iter().zip(scene.inliers) {
        if *inlier {
            let c = nocs_coordinate(p, &scene.pose_gt);
            pts.push(if mirrored {
                mirror_point(&c, &scene.sym)
            } else {
                c
            });
        }
    }
    if pts.is_empty() {
        return Err(Error::NoInliers);
    }
    Ok(PointCloud::new(pts))
}

/// Full pose recovered from raw parameters (rotation via prioritized
/// Gram-Schmidt, translation and size from their residuals).
pub fn recovered_pose(
    params: &PoseParams,
    observed: &PointCloud,
    mean_size: &Vec3,
) -> Result<Pose9> {
    Ok(PoseChain::forward(params, observed, mean_size)?.pose)
}

// ---------------------------------------------------------------------------
// Pose recovery chain with backprop
// ---------------------------------------------------------------------------

/// Saved intermediates of the raw-params -> Pose9 map.
pub(crate) struct PoseChain {
    pub pose: Pose9,
    a: Vec3,
    b_norm: f64,
    u_norm: f64,
    c1: Vec3,
    c2: Vec3,
}

impl PoseChain {
    pub fn forward(params: &PoseParams, observed: &PointCloud, mean_size: &Vec3) -> Result<Self> {
        let rotation = recover_rotation(params)?;
        let translation = recover_translation(&params.t_residual, observed)?;
        let size = recover_size(&params.s_residual, mean_size)?;
        let b_norm = params.ry_raw.norm();
        let c2 = params.ry_raw / b_norm;
        let u = params.rx_raw - params.rx_raw.dot(&c2) * c2;
        Ok(PoseChain {
            pose: Pose9::new(rotation, translation, size)?,
            a: params.rx_raw,
            b_norm,
            u_norm: u.norm(),
            c1: rotation.column(0),
            c2,
        })
    }

    /// Chains gradients on (R, t, s) back to the raw parameters.
    pub fn backprop(&self, grad_r: &Mat3, grad_t: &Vec3, grad_s: &Vec3) -> (Vec3, Vec3, Vec3, Vec3) {
        let g1: Vec3 = grad_r.column(0).into();
        let g2: Vec3 = grad_r.column(1).into();
        let g3: Vec3 = grad_r.column(2).into();
        // c3 = c1 x c2
        let g1_bar = g1 + self.c2.cross(&g3);
        let g2_bar = g2 - self.c1.cross(&g3);
        // c1 = u / |u|
        let grad_u = (g1_bar - self.c1 * self.c1.dot(&g1_bar)) / self.u_norm;
        // u = a - (a . c2) c2
        let grad_a = grad_u - self.c2 * self.c2.dot(&grad_u);
        let grad_c2 =
            g2_bar - (self.a * self.c2.dot(&grad_u) + self.a.dot(&self.c2) * grad_u);
        // c2 = b / |b|
        let grad_b = (grad_c2 - self.c2 * self.c2.dot(&grad_c2)) / self.b_norm;
        (grad_a, grad_b, *grad_t, *grad_s)
    }
}

fn pose_loss_grad(
    chain: &PoseChain,
    target: &Pose9,
    sym: &SymmetryClass,
) -> (f64, Mat3, Vec3, Vec3) {
    let pred = &chain.pose;
    let dt = pred.translation - target.translation;
    let ds = pred.size - target.size;
    let mut value = l1(&dt) + l1(&ds);
    let mut grad_r = Mat3::zeros();
    let dy = pred.rotation.column(1) - target.rotation.column(1);
    value += l1(&dy);
    grad_r.set_column(1, &sign(&dy));
    if !sym.is_rotational() {
        let dx = pred.rotation.column(0) - target.rotation.column(0);
        value += l1(&dx);
        grad_r.set_column(0, &sign(&dx));
    }
    (value, grad_r, sign(&dt), sign(&ds))
}

#[allow(clippy::type_complexity)]
fn consistency_grad(
    coords: &PointCloud,
    observed: &PointCloud,
    chain: &PoseChain,
    inliers: &[bool],
    want_grad: bool,
) -> Result<(f64, Option<Vec<Vec3>>, Mat3, Vec3, Vec3)> {
    let pose = &chain.pose;
    let mask = mask_of(inliers);
    check_paired(coords, observed, &mask)?;
    let n_in = require_inliers(&mask)?;
    let inv = 1.0 / n_in as f64;
    let l = pose.diagonal();
    let r = pose.rotation;
    let mut value = 0.0;
    let mut dc = want_grad.then(|| vec![Vec3::zeros(); coords.len()]);
    let mut grad_r = Mat3::zeros();
    let mut grad_t = Vec3::zeros();
    let mut grad_l = 0.0;
    for (i, ((c, p), inlier)) in coords
        .points
        .iter()
        .zip(&observed.points)
        .zip(inliers)
        .enumerate()
    {
        if !*inlier {
            continue;
        }
        let d = p - pose.translation;
        let cp = r.apply_inverse(&d) / l;
        let res = cp - c;
        value += l1(&res);
        if want_grad {
            let s = sign(&res);
            dc.as_mut().unwrap()[i] = -inv * s;
            grad_r += (inv / l) * d * s.transpose();
            grad_t -= (inv / l) * r.apply(&s);
            grad_l -= inv * s.dot(&cp) / l;
        }
    }
    let grad_s = grad_l * pose.size / l;
    Ok((value * inv, dc, grad_r, grad_t, grad_s))
}

/// Eq. 8 (or its single-candidate form): value and dL/dC.
#[allow(clippy::type_complexity)]
fn coordinate_loss_grad(
    coords: &PointCloud,
    observed: &PointCloud,
    pose_gt: &Pose9,
    sym: &SymmetryClass,
    sym_mode: bool,
    mask: &InlierMask,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Vec3>>)> {
    check_paired(coords, observed, mask)?;
    let n_in = require_inliers(mask)?;
    let inv = 1.0 / n_in as f64;
    let l = pose_gt.diagonal();
    let candidates = if sym_mode {
        candidate_rotations(&pose_gt.rotation, sym)
    } else {
        vec![pose_gt.rotation]
    };
    // precompute (p - t) once
    let centered: Vec<Vec3> = observed
        .points
        .iter()
        .map(|p| p - pose_gt.translation)
        .collect();
    let mut best: Option<(f64, usize)> = None;
    for (k, rot) in candidates.iter().enumerate() {
        let mut total = 0.0;
        for ((c, d), inlier) in coords.points.iter().zip(&centered).zip(&mask.labels) {
            if *inlier {
                total += l1(&(rot.apply_inverse(d) / l - c));
            }
        }
        let total = total * inv;
        // ties broken by lowest candidate index
        if best.map_or(true, |(b, _)| total < b) {
            best = Some((total, k));
        }
    }
    let (value, k_star) = best.unwrap();
    let dc = want_grad.then(|| {
        let rot = &candidates[k_star];
        coords
            .points
            .iter()
            .zip(&centered)
            .zip(&mask.labels)
            .map(|((c, d), inlier)| {
                if *inlier {
                    -inv * sign(&(rot.apply_inverse(d) / l - c))
                } else {
                    Vec3::zeros()
                }
            })
            .collect()
    });
    Ok((value, dc))
}

/// Chamfer distance with gradient w.r.t. the first cloud.
fn chamfer_grad(a: &PointCloud, b: &PointCloud, want_grad: bool) -> (f64, Option<Vec<Vec3>>) {
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let mut grad = want_grad.then(|| vec![Vec3::zeros(); a.len()]);
    let mut forward = 0.0;
    for (i, p) in a.points.iter().enumerate() {
        let (j, d) = nearest(p, b);
        forward += d;
        if d > 0.0 {
            if let Some(g) = grad.as_mut() {
                g[i] += (p - b.points[j]) / (d * na);
            }
        }
    }
    let mut backward = 0.0;
    for q in &b.points {
        let (j, d) = nearest(q, a);
        backward += d;
        if d > 0.0 {
            if let Some(g) = grad.as_mut() {
                g[j] += (a.points[j] - q) / (d * nb);
            }
        }
    }
    (forward / na + backward / nb, grad)
}

fn nearest(p: &Vec3, cloud: &PointCloud) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (j, q) in cloud.points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if d2 < best.1 {
            best = (j, d2);
        }
    }
    (best.0, best.1.sqrt())
}

/// Reconstruction term under a given pose; optionally returns pose
/// gradients (R and t only: the mirror conjugation is scale-free).
#[allow(clippy::type_complexity)]
fn recon_grad(
    mirrored_pred: &PointCloud,
    observed: &PointCloud,
    pose: &Pose9,
    sym: &SymmetryClass,
    inliers: &[bool],
    want_grad: bool,
    want_pose_grad: bool,
) -> Result<(f64, Option<Vec<Vec3>>, Option<Mat3>, Option<Vec3>)> {
    let mask = mask_of(inliers);
    check_paired(mirrored_pred, observed, &mask)?;
    let n_in = require_inliers(&mask)?;
    let inv = 1.0 / n_in as f64;
    let r = pose.rotation;
    let f = match sym {
        SymmetryClass::None => Vec3::new(1.0, 1.0, 1.0),
        SymmetryClass::RotationalY { .. } => Vec3::new(-1.0, 1.0, -1.0),
        SymmetryClass::ReflectionXY => Vec3::new(1.0, 1.0, -1.0),
    };
    let fm = Mat3::from_diagonal(&f);
    let rfrt = r.matrix() * fm * r.matrix().transpose();
    let mut value = 0.0;
    let mut dm = want_grad.then(|| vec![Vec3::zeros(); mirrored_pred.len()]);
    let mut grad_r = Mat3::zeros();
    let mut grad_t = Vec3::zeros();
    for (i, ((m, p), inlier)) in mirrored_pred
        .points
        .iter()
        .zip(&observed.points)
        .zip(inliers)
        .enumerate()
    {
        if !*inlier {
            continue;
        }
        let d = p - pose.translation;
        let target = rfrt * d + pose.translation;
        let res = target - m;
        value += l1(&res);
        if want_grad {
            let s = sign(&res);
            dm.as_mut().unwrap()[i] = -inv * s;
            if want_pose_grad {
                // d(s^T R F R^T d)/dR = s d^T R F + d s^T R F  (F diagonal)
                grad_r += inv * (s * (d.transpose() * r.matrix() * fm)
                    + d * (s.transpose() * r.matrix() * fm));
                grad_t += inv * (s - rfrt.transpose() * s);
            }
        }
    }
    Ok((
        value * inv,
        dm,
        want_pose_grad.then_some(grad_r),
        want_pose_grad.then_some(grad_t),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{world_location, Rotation};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn simple_pose() -> Pose9 {
        Pose9::new(Rotation::identity(), Vec3::zeros(), v(0.6, 0.8, 1e-9)).unwrap()
    }

    #[test]
    fn gt_inliers_threshold_behavior() {
        let pose = simple_pose();
        let coords = PointCloud::new(vec![v(0.1, 0.0, 0.0), v(0.0, 0.2, 0.0), v(0.0, 0.0, 0.3)]);
        let mut observed = coords.map(|c| world_location(c, &pose));
        let mask = gt_inliers(&observed, &coords, &pose, 0.1).unwrap();
        assert!(mask.labels.iter().all(|l| *l));

        observed.points[1] += v(0.0, 0.2, 0.0);
        let mask = gt_inliers(&observed, &coords, &pose, 0.1).unwrap();
        assert_eq!(mask.labels, vec![true, false, true]);

        // boundary: displacement exactly at the threshold stays inlier
        observed.points[1] = world_location(&coords.points[1], &pose) + v(0.1, 0.0, 0.0);
        let mask = gt_inliers(&observed, &coords, &pose, 0.1).unwrap();
        assert!(mask.labels[1]);
    }

    #[test]
    fn pose_loss_examples() {
        let gt = simple_pose();
        assert_eq!(pose_loss(&gt, &gt, &SymmetryClass::None), 0.0);

        // rotating about y leaves the loss at zero for rotational symmetry
        let rotated = Pose9::new(
            gt.rotation.compose(&Rotation::rot_y(0.83)),
            gt.translation,
            gt.size,
        )
        .unwrap();
        assert_relative_eq!(
            pose_loss(&rotated, &gt, &SymmetryClass::rotational_default()),
            0.0,
            epsilon = 1e-12
        );

        let shifted = Pose9::new(gt.rotation, gt.translation + v(0.1, 0.0, 0.0), gt.size).unwrap();
        assert_relative_eq!(
            pose_loss(&shifted, &gt, &SymmetryClass::None),
            0.1,
            epsilon = 1e-12
        );
    }

    #[test]
    fn consistency_loss_examples() {
        let pose = simple_pose();
        let observed = PointCloud::new(vec![v(0.1, 0.0, 0.0), v(0.0, 0.2, 0.1), v(0.3, 0.1, 0.0)]);
        let coords = observed.map(|p| nocs_coordinate(p, &pose));
        let mask = InlierMask::all_inliers(3);
        assert_relative_eq!(
            consistency_loss(&coords, &observed, &pose, &mask).unwrap(),
            0.0,
            epsilon = 1e-15
        );

        let offset = coords.map(|c| c + v(0.1, 0.0, 0.0));
        assert_relative_eq!(
            consistency_loss(&offset, &observed, &pose, &mask).unwrap(),
            0.1,
            epsilon = 1e-12
        );

        // disagreement on outliers does not contribute
        let mut bad = coords.clone();
        bad.points[2] += v(5.0, 5.0, 5.0);
        let mask = InlierMask {
            labels: vec![true, true, false],
            scores: vec![1.0, 1.0, 0.0],
        };
        assert_relative_eq!(
            consistency_loss(&bad, &observed, &pose, &mask).unwrap(),
            0.0,
            epsilon = 1e-15
        );

        let empty = InlierMask {
            labels: vec![false; 3],
            scores: vec![0.0; 3],
        };
        assert!(matches!(
            consistency_loss(&coords, &observed, &pose, &empty),
            Err(Error::NoInliers)
        ));
    }

    #[test]
    fn sym_coordinate_loss_orbit() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sym = SymmetryClass::RotationalY { candidates: 36 };
        let pose = crate::geometry::tests::random_pose(&mut rng);
        let observed = PointCloud::new(
            (0..40)
                .map(|_| {
                    v(
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                        rng.gen_range(-0.3..0.3),
                    ) + pose.translation
                })
                .collect(),
        );
        let mask = InlierMask::all_inliers(40);

        // coordinates of candidate k have zero loss
        for k in [0usize, 7, 35] {
            let rot = candidate_rotations(&pose.rotation, &sym)[k];
            let cand_pose = Pose9::new(rot, pose.translation, pose.size).unwrap();
            let coords = observed.map(|p| nocs_coordinate(p, &cand_pose));
            let loss = sym_coordinate_loss(&coords, &observed, &pose, &sym, &mask).unwrap();
            assert!(loss < 1e-12, "candidate {k} loss {loss}");
        }

        // orbit permutation: shifting gt by one orbit step preserves the loss
        let coords = PointCloud::new(
            (0..40)
                .map(|_| {
                    v(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                    )
                })
                .collect(),
        );
        let l0 = sym_coordinate_loss(&coords, &observed, &pose, &sym, &mask).unwrap();
        let shifted = Pose9::new(
            pose.rotation
                .compose(&Rotation::rot_y(2.0 * std::f64::consts::PI / 36.0)),
            pose.translation,
            pose.size,
        )
        .unwrap();
        let l1 = sym_coordinate_loss(&coords, &observed, &shifted, &sym, &mask).unwrap();
        assert_relative_eq!(l0, l1, epsilon = 1e-12);

        // min over a set containing the k=0 candidate never exceeds the
        // plain coordinate loss
        let plain = coordinate_loss_grad(&coords, &observed, &pose, &sym, false, &mask, false)
            .unwrap()
            .0;
        assert!(l0 <= plain + 1e-15);
    }

    #[test]
    fn sym_shape_loss_examples() {
        let a = PointCloud::new(vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0)]);
        assert_eq!(sym_shape_loss(&a, &a).unwrap(), 0.0);

        let p = PointCloud::new(vec![v(0.0, 0.0, 0.0)]);
        let q = PointCloud::new(vec![v(0.0, 0.7, 0.0)]);
        assert_relative_eq!(sym_shape_loss(&p, &q).unwrap(), 1.4, epsilon = 1e-12);

        // brute-force O(N^2) oracle
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ca = PointCloud::new(
            (0..8)
                .map(|_| v(rng.gen(), rng.gen(), rng.gen()))
                .collect(),
        );
        let cb = PointCloud::new(
            (0..11)
                .map(|_| v(rng.gen(), rng.gen(), rng.gen()))
                .collect(),
        );
        let mut oracle = 0.0;
        for p in &ca.points {
            oracle += cb
                .points
                .iter()
                .map(|q| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
                / ca.len() as f64;
        }
        for q in &cb.points {
            oracle += ca
                .points
                .iter()
                .map(|p| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
                / cb.len() as f64;
        }
        assert_relative_eq!(sym_shape_loss(&ca, &cb).unwrap(), oracle, epsilon = 1e-14);

        assert!(matches!(
            sym_shape_loss(&PointCloud::new(vec![]), &a),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn reconstruction_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pose = crate::geometry::tests::random_pose(&mut rng);
        let sym = SymmetryClass::rotational_default();
        let observed = PointCloud::new(
            (0..10)
                .map(|_| v(rng.gen(), rng.gen(), rng.gen()))
                .collect(),
        );
        let mask = InlierMask::all_inliers(10);
        let mirrored = observed.map(|p| mirror_world(p, &pose, &sym));
        assert_relative_eq!(
            reconstruction_loss(&mirrored, &observed, &pose, &sym, &mask).unwrap(),
            0.0,
            epsilon = 1e-12
        );

        // no symmetry: predicting the input cloud itself is exact
        assert_relative_eq!(
            reconstruction_loss(&observed, &observed, &pose, &SymmetryClass::None, &mask).unwrap(),
            0.0,
            epsilon = 1e-12
        );

        let offset = mirrored.map(|m| m + v(0.05, 0.0, 0.0));
        assert_relative_eq!(
            reconstruction_loss(&offset, &observed, &pose, &sym, &mask).unwrap(),
            0.05,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mask_loss_examples() {
        let gt = InlierMask {
            labels: vec![true, false, true, true],
            scores: vec![1.0, 0.0, 1.0, 1.0],
        };
        assert_eq!(mask_loss(&[1.0, 0.0, 1.0, 1.0], &gt).unwrap(), 0.0);
        assert_relative_eq!(
            mask_loss(&[0.5; 4], &gt).unwrap(),
            0.5,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            mask_loss(&[0.0, 1.0, 0.0, 0.0], &gt).unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn total_loss_weighted_sum() {
        // with all predictions perfect every term vanishes
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let perfect = crate::gradcheck::perfect_scene_data(&mut rng, 12);
        let vars = perfect.perfect_variables();
        let report = evaluate(&perfect.scene(), &vars, false).unwrap();
        assert!(report.total.abs() < 1e-9, "total {}", report.total);

        // weighted-sum identity on random predictions
        let scene_data = crate::gradcheck::random_scene_data(&mut rng, 12, 5, true);
        let scene = scene_data.scene();
        let vars = scene_data.random_variables(&mut rng);
        let report = evaluate(&scene, &vars, false).unwrap();
        let w = &scene.weights;
        let resum = w.pose * report.pose
            + w.shape_prior * report.sp_total
            + w.mask * report.mask
            + w.reconstruction * report.reconstruction
            + w.consistency * report.consistency;
        assert_relative_eq!(report.total, resum, epsilon = 1e-12);
        let sp = report.sp_coordinate
            + report.sp_shape
            + w.sp_deform_reg * report.sp_deform_reg
            + w.sp_matching_reg * report.sp_matching_reg;
        assert_relative_eq!(report.sp_total, sp, epsilon = 1e-12);
    }

    #[test]
    fn outlier_modification_does_not_change_restricted_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let scene_data = crate::gradcheck::random_scene_data(&mut rng, 10, 4, true);
        let mut scene_data2 = scene_data.clone();
        // displace an outlier-labeled observed point
        let out_idx = scene_data
            .inliers
            .iter()
            .position(|l| !*l)
            .expect("scene has outliers");
        scene_data2.observed.points[out_idx] += v(3.0, -2.0, 1.0);
        let vars = scene_data.random_variables(&mut rng);
        let r1 = evaluate(&scene_data.scene(), &vars, false).unwrap();
        let r2 = evaluate(&scene_data2.scene(), &vars, false).unwrap();
        assert_eq!(r1.sp_coordinate, r2.sp_coordinate);
        assert_eq!(r1.sp_shape, r2.sp_shape);

        // with the predicted pose held fixed, the inlier-restricted
        // terms ignore outlier values entirely (the joint evaluation
        // re-anchors the translation on the shifted centroid, so it is
        // checked through the pose-explicit ops instead)
        let pose = scene_data.pose_gt;
        let coords = PointCloud::new(vec![v(0.1, 0.2, 0.0); 10]);
        let mirrored = PointCloud::new(vec![v(0.0, 0.1, -0.2); 10]);
        let mask = InlierMask {
            labels: scene_data.inliers.clone(),
            scores: scene_data
                .inliers
                .iter()
                .map(|l| if *l { 1.0 } else { 0.0 })
                .collect(),
        };
        assert_eq!(
            consistency_loss(&coords, &scene_data.observed, &pose, &mask).unwrap(),
            consistency_loss(&coords, &scene_data2.observed, &pose, &mask).unwrap()
        );
        assert_eq!(
            reconstruction_loss(&mirrored, &scene_data.observed, &pose, &scene_data.sym, &mask)
                .unwrap(),
            reconstruction_loss(&mirrored, &scene_data2.observed, &pose, &scene_data.sym, &mask)
                .unwrap()
        );
    }
}
