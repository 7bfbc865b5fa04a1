//! Category-level 9DoF pose toolkit.
//!
//! Implements the geometric kernels of a prior-guided direct pose
//! estimation pipeline: rotation recovery from two raw columns, the
//! normalized-object-coordinate map, Umeyama/RANSAC similarity solving,
//! symmetry-aware loss terms with analytic gradients, a first-order
//! fitter with ablation presets, a synthetic instance generator and the
//! usual IoU / degree-centimeter evaluation metrics.

pub mod error;
pub mod geometry;
pub mod similarity;
pub mod symmetry;
pub mod prior;
pub mod objective;
pub mod gradcheck;
pub mod synthgen;
pub mod metrics;
pub mod fitter;
pub mod io;
pub mod config;

pub use error::Error;
pub use geometry::{PointCloud, Pose9, PoseParams, Rotation, Vec3};
pub use symmetry::{CategoryProfile, SymmetryClass};
