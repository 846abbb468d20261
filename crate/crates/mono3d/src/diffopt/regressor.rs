//! A minimal differentiable regressor and the end-to-end training chain.
//!
//! The regressor maps a per-object feature vector to the 26 regression
//! targets plus 26 log-uncertainties. It is deliberately tiny (an affine map,
//! optionally with one tanh hidden layer) with hand-written Jacobians, so the
//! full chain
//!
//! ```text
//! dL/dW = sum_d dL/db_d ( db_d/dy_d dy_d/dW + db_d/dsigma_d dsigma_d/dW )
//! ```
//!
//! can be assembled and verified against finite differences without any ML
//! framework.

use rand::Rng;

use crate::diffopt::{best_iou_match, implicit_jacobians, iou3d_grad, ImplicitJacobians};
use crate::error::{Error, Result};
use crate::fitting::{initialize, solve, FitProblem, SolveOptions};
use crate::geometry::Box3D;
use crate::targets::{TargetContext, TargetVector, NUM_TARGETS};
use crate::TargetVec;

/// Output width: 26 targets plus 26 log-sigmas.
pub const OUTPUT_DIM: usize = 2 * NUM_TARGETS;

/// A small differentiable map from features to (targets, log-uncertainties).
///
/// Uncertainties are parameterized as `sigma = exp(log_sigma)`, so they are
/// positive by construction and the weights stay unconstrained.
#[derive(Clone, Debug)]
pub struct ToyRegressor {
    input_dim: usize,
    hidden_dim: Option<usize>,
    params: Vec<f64>,
}

impl ToyRegressor {
    /// Affine map `features -> 52 outputs`.
    pub fn affine(input_dim: usize, rng: &mut impl Rng) -> Self {
        let n = OUTPUT_DIM * (input_dim + 1);
        let scale = (1.0 / input_dim as f64).sqrt();
        let params = (0..n).map(|_| rng.gen_range(-scale..scale) * 0.1).collect();
        Self {
            input_dim,
            hidden_dim: None,
            params,
        }
    }

    /// One tanh hidden layer of the given width.
    pub fn with_hidden(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        let n = hidden_dim * (input_dim + 1) + OUTPUT_DIM * (hidden_dim + 1);
        let scale = (1.0 / input_dim as f64).sqrt();
        let params = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Self {
            input_dim,
            hidden_dim: Some(hidden_dim),
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    // Parameter layout: [A1 (row-major), b1, A2 (row-major), b2] for the
    // hidden variant, [A, b] for the affine one.

    fn affine_forward(
        params: &[f64],
        rows: usize,
        cols: usize,
        x: &[f64],
        out: &mut [f64],
    ) {
        let bias_offset = rows * cols;
        for r in 0..rows {
            let mut acc = params[bias_offset + r];
            let row = &params[r * cols..(r + 1) * cols];
            for c in 0..cols {
                acc += row[c] * x[c];
            }
            out[r] = acc;
        }
    }

    /// Forward pass: returns the 26 targets and 26 log-sigmas.
    pub fn forward(&self, features: &[f64]) -> (TargetVec, TargetVec) {
        assert_eq!(features.len(), self.input_dim);
        let mut out = [0.0; OUTPUT_DIM];
        match self.hidden_dim {
            None => Self::affine_forward(&self.params, OUTPUT_DIM, self.input_dim, features, &mut out),
            Some(h) => {
                let split = h * (self.input_dim + 1);
                let mut hidden = vec![0.0; h];
                Self::affine_forward(&self.params[..split], h, self.input_dim, features, &mut hidden);
                for v in hidden.iter_mut() {
                    *v = v.tanh();
                }
                Self::affine_forward(&self.params[split..], OUTPUT_DIM, h, &hidden, &mut out);
            }
        }
        let y = TargetVec::from_fn(|i, _| out[i]);
        let log_sigma = TargetVec::from_fn(|i, _| out[NUM_TARGETS + i]);
        (y, log_sigma)
    }

    /// Sigmas implied by a forward pass.
    pub fn sigma(log_sigma: &TargetVec) -> TargetVec {
        log_sigma.map(f64::exp)
    }

    /// Accumulates `dL/dW` into `grad` given the upstream sensitivities to
    /// the raw outputs (targets and log-sigmas).
    pub fn backward(
        &self,
        features: &[f64],
        dl_dy: &TargetVec,
        dl_dlog_sigma: &TargetVec,
        grad: &mut [f64],
    ) {
        assert_eq!(grad.len(), self.params.len());
        let dl_dout: Vec<f64> = (0..OUTPUT_DIM)
            .map(|i| {
                if i < NUM_TARGETS {
                    dl_dy[i]
                } else {
                    dl_dlog_sigma[i - NUM_TARGETS]
                }
            })
            .collect();
        match self.hidden_dim {
            None => {
                let cols = self.input_dim;
                let bias_offset = OUTPUT_DIM * cols;
                for r in 0..OUTPUT_DIM {
                    for c in 0..cols {
                        grad[r * cols + c] += dl_dout[r] * features[c];
                    }
                    grad[bias_offset + r] += dl_dout[r];
                }
            }
            Some(h) => {
                let split = h * (self.input_dim + 1);
                let mut pre = vec![0.0; h];
                Self::affine_forward(&self.params[..split], h, self.input_dim, features, &mut pre);
                let act: Vec<f64> = pre.iter().map(|v| v.tanh()).collect();

                // Output layer.
                let bias2 = OUTPUT_DIM * h;
                for r in 0..OUTPUT_DIM {
                    for c in 0..h {
                        grad[split + r * h + c] += dl_dout[r] * act[c];
                    }
                    grad[split + bias2 + r] += dl_dout[r];
                }
                // Hidden layer through the tanh.
                let a2 = &self.params[split..split + OUTPUT_DIM * h];
                let bias1 = h * self.input_dim;
                for j in 0..h {
                    let mut dl_dact = 0.0;
                    for r in 0..OUTPUT_DIM {
                        dl_dact += dl_dout[r] * a2[r * h + j];
                    }
                    let dl_dpre = dl_dact * (1.0 - act[j] * act[j]);
                    for c in 0..self.input_dim {
                        grad[j * self.input_dim + c] += dl_dpre * features[c];
                    }
                    grad[bias1 + j] += dl_dpre;
                }
            }
        }
    }
}

/// One object of a toy training scene: its features and where its targets
/// live in the image.
#[derive(Clone, Debug)]
pub struct ToyObject {
    pub features: Vec<f64>,
    pub context: TargetContext,
}

/// A toy scene: labeled objects plus the ground-truth boxes of the frame.
#[derive(Clone, Debug)]
pub struct ToyScene {
    pub objects: Vec<ToyObject>,
    pub ground_truth: Vec<Box3D>,
}

/// Outcome of one end-to-end forward/backward pass.
#[derive(Clone, Debug)]
pub struct EndToEndGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Objects whose fit failed or did not converge; they contribute no
    /// gradient (and no detection).
    pub skipped: usize,
    /// Detections with zero intersection against every ground-truth box;
    /// they stay in the loss denominator but have zero gradient.
    pub zero_intersection: usize,
}

/// Fits one object's predicted targets. Returns `None` when the fit fails,
/// does not converge, or its implicit Jacobians are unavailable — the same
/// inclusion rule for the loss and the gradient, so finite differences of
/// `end_to_end_loss` are consistent with `end_to_end_grad`.
fn fit_object(
    regressor: &ToyRegressor,
    obj: &ToyObject,
    opts: &SolveOptions,
) -> Option<(FitProblem, crate::fitting::FitResult, ImplicitJacobians)> {
    let (y, log_sigma) = regressor.forward(&obj.features);
    let sigma = ToyRegressor::sigma(&log_sigma);
    let targets = TargetVector::new(y, sigma, obj.context);
    let problem = FitProblem::new(targets);
    let fit = initialize(&targets)
        .and_then(|init| solve(&problem, &init, opts))
        .ok()?;
    if !fit.converged {
        return None;
    }
    let ij = implicit_jacobians(&fit, &problem).ok()?;
    Some((problem, fit, ij))
}

/// Assembles the full IoU-loss gradient with respect to the regressor
/// parameters by chaining the per-box IoU gradient, the implicit Jacobians
/// of the fit and the regressor's own Jacobians.
pub fn end_to_end_grad(
    regressor: &ToyRegressor,
    scenes: &[ToyScene],
    opts: &SolveOptions,
) -> Result<EndToEndGrad> {
    struct Det {
        scene: usize,
        object: usize,
        problem: FitProblem,
        fit: crate::fitting::FitResult,
        ij: ImplicitJacobians,
    }

    let mut dets: Vec<Det> = Vec::new();
    let mut skipped = 0usize;
    for (s, scene) in scenes.iter().enumerate() {
        for (o, obj) in scene.objects.iter().enumerate() {
            match fit_object(regressor, obj, opts) {
                Some((problem, fit, ij)) => dets.push(Det {
                    scene: s,
                    object: o,
                    problem,
                    fit,
                    ij,
                }),
                None => skipped += 1,
            }
        }
    }
    if dets.is_empty() {
        return Err(Error::EmptyDetections);
    }

    // Loss over all detections; each is matched within its own scene.
    let n = dets.len() as f64;
    let mut loss = 1.0;
    let mut grad = vec![0.0; regressor.num_params()];
    let mut zero_intersection = 0usize;
    for det in &dets {
        let gts = &scenes[det.scene].ground_truth;
        let Some((g, iou)) = best_iou_match(&det.fit.box3d, gts) else {
            continue;
        };
        loss -= iou / n;
        let g_iou = iou3d_grad(&det.fit.box3d, &gts[g]);
        if g_iou.zero_intersection {
            zero_intersection += 1;
            continue;
        }
        // dL/db = -(1/n) dIoU/db.
        let dl_db = -g_iou.grad / n;
        let dl_dy: TargetVec = (dl_db.transpose() * det.ij.db_dy).transpose();
        let dl_dsigma: TargetVec = (dl_db.transpose() * det.ij.db_dsigma).transpose();
        // log-sigma parameterization: dL/d(log sigma) = dL/dsigma * sigma.
        let dl_dlog_sigma = dl_dsigma.component_mul(&det.problem.targets.sigma);
        let obj = &scenes[det.scene].objects[det.object];
        regressor.backward(&obj.features, &dl_dy, &dl_dlog_sigma, &mut grad);
    }

    Ok(EndToEndGrad {
        loss,
        grad,
        skipped,
        zero_intersection,
    })
}

/// Evaluates only the IoU loss of the current regressor on the given scenes
/// (used for finite differences and line searches). Uses the same detection
/// inclusion rule as [`end_to_end_grad`].
pub fn end_to_end_loss(
    regressor: &ToyRegressor,
    scenes: &[ToyScene],
    opts: &SolveOptions,
) -> Result<f64> {
    let mut boxes_per_scene: Vec<Vec<Box3D>> = vec![Vec::new(); scenes.len()];
    for (s, scene) in scenes.iter().enumerate() {
        for obj in &scene.objects {
            if let Some((_, fit, _)) = fit_object(regressor, obj, opts) {
                boxes_per_scene[s].push(fit.box3d);
            }
        }
    }
    let total: usize = boxes_per_scene.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::EmptyDetections);
    }
    let mut acc = 0.0;
    for (s, boxes) in boxes_per_scene.iter().enumerate() {
        for b in boxes {
            acc += best_iou_match(b, &scenes[s].ground_truth).map_or(0.0, |(_, iou)| iou);
        }
    }
    Ok(1.0 - acc / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_forward_backward_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let reg = ToyRegressor::affine(4, &mut rng);
        let x = [0.3, -1.2, 0.8, 2.0];
        let (y0, s0) = reg.forward(&x);

        // Backward against finite differences of a random linear functional.
        use rand::Rng;
        let cy = TargetVec::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let cs = TargetVec::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let mut grad = vec![0.0; reg.num_params()];
        reg.backward(&x, &cy, &cs, &mut grad);
        let eval = |reg: &ToyRegressor| {
            let (y, s) = reg.forward(&x);
            cy.dot(&y) + cs.dot(&s)
        };
        let base = eval(&reg);
        assert_relative_eq!(base, cy.dot(&y0) + cs.dot(&s0));
        let h = 1e-6;
        for k in (0..reg.num_params()).step_by(17) {
            let mut plus = reg.clone();
            plus.params_mut()[k] += h;
            let mut minus = reg.clone();
            minus.params_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert_relative_eq!(grad[k], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
    }

    #[test]
    fn hidden_layer_backward_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let reg = ToyRegressor::with_hidden(4, 8, &mut rng);
        let x = [0.3, -1.2, 0.8, 2.0];
        use rand::Rng;
        let cy = TargetVec::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let cs = TargetVec::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let mut grad = vec![0.0; reg.num_params()];
        reg.backward(&x, &cy, &cs, &mut grad);
        let eval = |reg: &ToyRegressor| {
            let (y, s) = reg.forward(&x);
            cy.dot(&y) + cs.dot(&s)
        };
        let h = 1e-6;
        for k in (0..reg.num_params()).step_by(23) {
            let mut plus = reg.clone();
            plus.params_mut()[k] += h;
            let mut minus = reg.clone();
            minus.params_mut()[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!(
                (grad[k] - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "param {k}: {} vs {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn sigma_is_positive_by_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let reg = ToyRegressor::affine(3, &mut rng);
        let (_, log_sigma) = reg.forward(&[10.0, -10.0, 3.0]);
        assert!(ToyRegressor::sigma(&log_sigma).iter().all(|&s| s > 0.0));
    }
}

