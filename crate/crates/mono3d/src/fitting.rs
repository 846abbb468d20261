//! Weighted non-linear least-squares box fitting.
//!
//! Given a target vector `y` with per-target uncertainties `sigma`, the fit
//! minimizes
//!
//! ```text
//! E(b; y) = sum_i ( w_i (y_i - f_i(b)) )^2,   w_i = 1 / sigma_i
//! ```
//!
//! over the 7 box parameters, starting from a closed-form piecewise
//! initialization. The inverse Gauss-Newton Hessian at the optimum doubles as
//! the covariance of the estimate.

use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box3D};
use crate::targets::{residual_targets, target_jacobian, TargetVector, NUM_TARGETS};
use crate::{Mat7, ResidualJacobianMat, TargetVec, Vec7};

/// A box-fitting problem: targets, uncertainties and derived weights.
#[derive(Clone, Copy, Debug)]
pub struct FitProblem {
    pub targets: TargetVector,
}

impl FitProblem {
    pub fn new(targets: TargetVector) -> Self {
        Self { targets }
    }

    /// Confidence weights `w_i = 1 / sigma_i`.
    pub fn weights(&self) -> TargetVec {
        self.targets.sigma.map(|s| 1.0 / s)
    }
}

/// Result of a fit: the estimated box, its covariance (when the normal
/// equations are well conditioned), the final cost and iteration stats.
#[derive(Clone, Copy, Debug)]
pub struct FitResult {
    pub box3d: Box3D,
    pub covariance: Option<Mat7>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Levenberg-Marquardt settings.
#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the infinity norm of the cost gradient.
    pub gradient_tol: f64,
    /// Convergence threshold on the step norm.
    pub step_tol: f64,
    pub initial_damping: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            gradient_tol: 1e-8,
            step_tol: 1e-10,
            initial_damping: 1e-3,
        }
    }
}

impl SolveOptions {
    /// Tight tolerances for uses that differentiate through the solution.
    pub fn high_accuracy() -> Self {
        Self {
            max_iterations: 200,
            gradient_tol: 1e-11,
            step_tol: 1e-14,
            initial_damping: 1e-3,
        }
    }
}

/// Closed-form piecewise initialization from the targets alone.
///
/// The 2D box center is recovered from the anchor pixel and the box offsets,
/// back-projected through the intrinsics to a viewing ray, and scaled so the
/// center sits at the predicted distance. Dimensions come from the
/// log-estimates and the yaw from the observation angle.
pub fn initialize(targets: &TargetVector) -> Result<Box3D> {
    let y = &targets.y;
    let sin_cos_norm = (y[5] * y[5] + y[6] * y[6]).sqrt();
    if sin_cos_norm < 1e-6 {
        return Err(Error::DegenerateOrientation);
    }
    let d = y[4];
    if d <= 0.0 {
        return Err(Error::NonpositiveDistance(d));
    }
    let p = targets.context.pixel;
    let x1 = p.x - y[0];
    let y1 = p.y - y[1];
    let x2 = p.x + y[2];
    let y2 = p.y + y[3];
    let u = nalgebra::Vector2::new(0.5 * (x1 + x2), 0.5 * (y1 + y2));
    // A point projecting to `u` satisfies X = lambda * K^-1 (u, 1) - t with
    // t = K^-1 p_4 (the projection matrix's translation column). Intersect
    // that ray with the sphere |X| = d: a quadratic in lambda.
    let camera = &targets.context.camera;
    let ray: Vector3<f64> = camera.back_project(&u);
    let p4 = camera.matrix().column(3);
    let t: Vector3<f64> = camera.intrinsics_inv() * Vector3::new(p4[0], p4[1], p4[2]);
    let a = ray.norm_squared();
    let b = ray.dot(&t);
    let disc = b * b - a * (t.norm_squared() - d * d);
    let lambda = if disc >= 0.0 {
        // Far root: the point in front of the camera.
        (b + disc.sqrt()) / a
    } else {
        // The ray never reaches distance d; fall back to its closest point.
        b / a
    };
    let center = ray * lambda - t;
    let alpha = y[5].atan2(y[6]);
    let theta = normalize_angle(alpha + center.x.atan2(center.z));
    Ok(Box3D::new(
        y[7].exp(),
        y[8].exp(),
        y[9].exp(),
        center.x,
        center.y,
        center.z,
        theta,
    ))
}

/// Weighted residuals `r_i = w_i (y_i - f_i(b))`.
pub fn residuals(b: &Box3D, problem: &FitProblem) -> Result<TargetVec> {
    let f = residual_targets(b, &problem.targets.context)?;
    let w = problem.weights();
    Ok(w.component_mul(&(problem.targets.y - f)))
}

/// Jacobian of the weighted residuals with respect to the box parameters.
pub fn residual_jacobian(b: &Box3D, problem: &FitProblem) -> Result<ResidualJacobianMat> {
    let mut jac = target_jacobian(b, &problem.targets.context)?;
    let w = problem.weights();
    for i in 0..NUM_TARGETS {
        let row = (-jac.row(i) * w[i]).into_owned();
        jac.set_row(i, &row);
    }
    Ok(jac)
}

/// The least-squares cost `E(b; y)`.
pub fn cost(b: &Box3D, problem: &FitProblem) -> Result<f64> {
    Ok(residuals(b, problem)?.norm_squared())
}

/// Minimizes the weighted least-squares objective with Levenberg-Marquardt.
///
/// Accepted steps never increase the cost, so `E(result) <= E(init)`. When
/// the iteration budget runs out the best iterate is returned with
/// `converged = false`.
pub fn solve(problem: &FitProblem, init: &Box3D, opts: &SolveOptions) -> Result<FitResult> {
    let mut params = init.params();
    params[6] = normalize_angle(params[6]);
    let mut current_cost = cost(&Box3D::from_params(&params), problem)?;
    let mut damping = opts.initial_damping;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iterations {
        let b = Box3D::from_params(&params);
        let r = residuals(&b, problem)?;
        let jac = residual_jacobian(&b, problem)?;
        let gradient: Vec7 = 2.0 * jac.transpose() * r;
        if gradient.amax() < opts.gradient_tol {
            converged = true;
            break;
        }
        let hessian: Mat7 = jac.transpose() * jac;
        let rhs: Vec7 = -(jac.transpose() * r);

        // Inner damping loop: increase damping until a step is accepted or
        // the damping saturates.
        let mut accepted = false;
        for _ in 0..30 {
            let mut augmented = hessian;
            for i in 0..7 {
                augmented[(i, i)] += damping * hessian[(i, i)].max(1e-12);
            }
            let Some(chol) = nalgebra::Cholesky::new(augmented) else {
                damping *= 10.0;
                continue;
            };
            let step = chol.solve(&rhs);
            if step.norm() < opts.step_tol {
                converged = true;
                accepted = true;
                break;
            }
            let mut trial = params + step;
            trial[6] = normalize_angle(trial[6]);
            match cost(&Box3D::from_params(&trial), problem) {
                Ok(c) if c.is_finite() && c <= current_cost => {
                    // A relative decrease at rounding level means the cost
                    // is at its floating-point floor: stop rather than take
                    // noise-level steps until the iteration budget runs out.
                    if current_cost - c <= 1e-14 * current_cost {
                        converged = true;
                    }
                    params = trial;
                    current_cost = c;
                    damping = (damping / 10.0).max(1e-14);
                    accepted = true;
                    iterations += 1;
                    break;
                }
                _ => damping *= 10.0,
            }
        }
        if converged || !accepted {
            break;
        }
    }

    // Polish: a few undamped Gauss-Newton steps. LM's acceptance test cannot
    // see cost changes below rounding, which leaves the iterate a small
    // distance from the true stationary point; the GN fixed point is that
    // stationary point, and near it the iteration contracts fast. This makes
    // the returned minimizer reproducible (e.g. exactly invariant under a
    // common rescale of all sigmas) instead of rounding-noise dependent.
    if converged {
        for _ in 0..10 {
            let b = Box3D::from_params(&params);
            let (Ok(r), Ok(jac)) = (residuals(&b, problem), residual_jacobian(&b, problem))
            else {
                break;
            };
            let hessian: Mat7 = jac.transpose() * jac;
            let Some(chol) = nalgebra::Cholesky::new(hessian) else {
                break;
            };
            let step = chol.solve(&(-(jac.transpose() * r)));
            // Only trust the quadratic model very close to the optimum.
            if !step.iter().all(|v| v.is_finite()) || step.norm() > 1e-3 {
                break;
            }
            params += step;
            params[6] = normalize_angle(params[6]);
            if step.norm() < 1e-12 {
                break;
            }
        }
        if let Ok(c) = cost(&Box3D::from_params(&params), problem) {
            current_cost = c;
        }
    }

    let box3d = Box3D::from_params(&params);
    let covariance = covariance(&box3d, problem).ok();
    Ok(FitResult {
        box3d,
        covariance,
        cost: current_cost,
        iterations,
        converged,
    })
}

/// Covariance of the estimate: `(J^T J)^{-1}` of the weighted residual
/// Jacobian (the Gaussian maximum-likelihood convention).
pub fn covariance(at: &Box3D, problem: &FitProblem) -> Result<Mat7> {
    let jac = residual_jacobian(at, problem)?;
    let dense = DMatrix::from_fn(NUM_TARGETS, 7, |i, j| jac[(i, j)]);
    covariance_from_jacobian(&dense)
}

/// Covariance from an explicit residual Jacobian (any number of rows).
/// Fails with `RankDeficient` when `J` has column rank below 7.
pub fn covariance_from_jacobian(jac: &DMatrix<f64>) -> Result<Mat7> {
    let h = jac.transpose() * jac;
    let chol = h.clone().cholesky().ok_or(Error::RankDeficient)?;
    let inv = chol.inverse();
    let mut out = Mat7::zeros();
    for i in 0..7 {
        for j in 0..7 {
            out[(i, j)] = inv[(i, j)];
        }
    }
    // Cholesky succeeding on a numerically near-singular matrix can still
    // produce a junk inverse; reject those.
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient);
    }
    Ok(out)
}
