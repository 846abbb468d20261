//! Differentiable monocular 3D bounding-box fitting.
//!
//! This crate implements the geometric back end of a single-stage monocular
//! 3D object detector: per-pixel network outputs (26 redundant 2D/3D
//! regression targets with per-target scales) are turned into 7-parameter
//! oriented boxes by weighted nonlinear least squares, and the solver itself
//! is differentiable, so losses on the fitted boxes can be pushed back
//! through the optimizer into the network.
//!
//! The main pieces:
//!
//! * [`geometry`] — oriented boxes, pinhole cameras, 2D/BEV/3D IoU.
//! * [`targets`] — the 26-target encoding, its analytic Jacobian, and
//!   support-region bookkeeping.
//! * [`fitting`] — closed-form initialization and a Levenberg-Marquardt
//!   solver with parameter covariance.
//! * [`diffopt`] — implicit differentiation of the solver, IoU losses and
//!   gradients, and a toy end-to-end trainable regressor.
//! * [`detection`] — score thresholding, per-class NMS, and the per-image
//!   candidates-to-boxes pipeline.
//! * [`metrics`] — average precision (2D / BEV / 3D / localization) and
//!   orientation similarity.
//! * [`kitti`] — KITTI label/calibration I/O and a raw-prediction
//!   interchange format.
//! * [`synth`] — deterministic synthetic scene generation.
//!
//! # Example
//!
//! Encode a box into targets, then recover it with the solver:
//!
//! ```
//! use mono3d::geometry::{projected_envelope, Box3D};
//! use mono3d::synth::kitti_camera;
//! use mono3d::targets::{encode, TargetContext, TargetVector};
//! use mono3d::fitting::{initialize, solve, FitProblem, SolveOptions};
//! use mono3d::TargetVec;
//! use nalgebra::Vector2;
//!
//! let camera = kitti_camera();
//! let truth = Box3D::new(1.5, 1.7, 4.2, -1.0, 0.9, 14.0, 0.4);
//! let box2d = projected_envelope(&camera, &truth)?;
//! let ctx = TargetContext::new(box2d.center(), camera);
//! let y = encode(&truth, &box2d, &ctx)?;
//! let targets = TargetVector::new(y, TargetVec::repeat(1.0), ctx);
//!
//! let init = initialize(&targets)?;
//! let fit = solve(&FitProblem::new(targets), &init, &SolveOptions::default())?;
//! assert!(fit.converged);
//! assert!((fit.box3d.z_c - truth.z_c).abs() < 1e-6);
//! # Ok::<(), mono3d::Error>(())
//! ```

pub mod detection;
pub mod diffopt;
pub mod error;
pub mod fitting;
pub mod geometry;
pub mod kitti;
pub mod metrics;
pub mod synth;
pub mod targets;

pub use error::{Error, Result};

use nalgebra::{SMatrix, SVector};

pub use targets::NUM_TARGETS;

/// Box parameter vector `(h, w, l, x_c, y_c, z_c, theta)`.
pub type Vec7 = SVector<f64, 7>;
/// 7x7 matrix over the box parameters (covariances, Hessians).
pub type Mat7 = SMatrix<f64, 7, 7>;
/// Sensitivity of the 7 parameters to the 26 targets.
pub type Mat7x26 = SMatrix<f64, 7, 26>;
/// A 26-vector of target values or scales.
pub type TargetVec = SVector<f64, 26>;
/// Jacobian of the target function with respect to the box parameters.
pub type TargetJacobianMat = SMatrix<f64, 26, 7>;
/// Jacobian of the weighted residuals with respect to the box parameters.
pub type ResidualJacobianMat = SMatrix<f64, 26, 7>;
