//! Shape-prior adaptation: deformation field, row-stochastic matching
//! matrix and the coordinate reconstruction C = M (P_prior + D).

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

const SIMPLEX_TOL: f64 = 1e-9;

/// Per-prior-point displacement vectors in NOCS scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub displacements: Vec<Vec3>,
}

impl DeformationField {
    pub fn zeros(n: usize) -> Self {
        DeformationField {
            displacements: vec![Vec3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }
}

/// Dense |obs| x |prior| matrix whose rows live on the probability
/// simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>, // row-major
}

impl MatchingMatrix {
    /// Validates the simplex invariant on every row.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        assert_eq!(data.len(), rows * cols);
        let m = MatchingMatrix { rows, cols, data };
        for r in 0..rows {
            let row = m.row(r);
            if let Some(neg) = row.iter().find(|x| **x < -SIMPLEX_TOL) {
                return Err(Error::SimplexViolation {
                    row: r,
                    detail: format!("negative entry {neg}"),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::SimplexViolation {
                    row: r,
                    detail: format!("row sum {sum}"),
                });
            }
        }
        Ok(m)
    }

    /// Row-wise softmax of unconstrained logits; rows land exactly on
    /// the simplex up to rounding.
    pub fn from_logits(rows: usize, cols: usize, logits: &[f64]) -> Self {
        assert_eq!(logits.len(), rows * cols);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &logits[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, l) in row.iter().enumerate() {
                let e = (l - max).exp();
                data[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                data[r * cols + j] /= sum;
            }
        }
        MatchingMatrix { rows, cols, data }
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        MatchingMatrix {
            rows,
            cols,
            data: vec![1.0 / cols as f64; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Pointwise sum of the prior and its deformation field.
pub fn deform(prior: &PointCloud, d: &DeformationField) -> Result<PointCloud> {
    if prior.len() != d.len() {
        return Err(Error::CardinalityMismatch {
            left: prior.len(),
            right: d.len(),
        });
    }
    Ok(PointCloud::new(
        prior
            .points
            .iter()
            .zip(&d.displacements)
            .map(|(p, dp)| p + dp)
            .collect(),
    ))
}

/// C = M (P_prior + D): each output point is a convex combination of
/// the deformed prior points.
pub fn reconstruct_coordinates(
    prior: &PointCloud,
    d: &DeformationField,
    m: &MatchingMatrix,
) -> Result<PointCloud> {
    let deformed = deform(prior, d)?;
    if m.cols() != deformed.len() {
        return Err(Error::CardinalityMismatch {
            left: m.cols(),
            right: deformed.len(),
        });
    }
    let mut out = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = m.row(r);
        let mut acc = Vec3::zeros();
        for (w, q) in row.iter().zip(&deformed.points) {
            acc += *w * q;
        }
        out.push(acc);
    }
    Ok(PointCloud::new(out))
}

/// Mean squared displacement magnitude; zero iff the field is zero.
pub fn deformation_regularizer(d: &DeformationField) -> f64 {
    if d.is_empty() {
        return 0.0;
    }
    d.displacements.iter().map(|v| v.norm_squared()).sum::<f64>() / d.len() as f64
}

/// Mean row entropy; zero on one-hot rows, ln(k) on uniform rows.
pub fn matching_regularizer(m: &MatchingMatrix) -> f64 {
    if m.rows() == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for r in 0..m.rows() {
        for w in m.row(r) {
            if *w > 0.0 {
                total -= w * w.ln();
            }
        }
    }
    total / m.rows() as f64
}
