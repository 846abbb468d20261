//! Detection post-processing: score thresholding, greedy per-class NMS and
//! the per-image candidates -> fitted boxes pipeline.

use nalgebra::Vector2;

use crate::error::Error;
use crate::fitting::{covariance, initialize, solve, FitProblem, FitResult, SolveOptions};
use crate::geometry::{iou_2d, Box2D};
use crate::targets::TargetVector;
use crate::TargetVec;

/// A thresholded per-pixel prediction: one potential object.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub class: String,
    pub score: f64,
    pub box2d: Box2D,
    pub targets: TargetVector,
}

impl Candidate {
    /// Builds a candidate from an anchor-pixel target vector; the 2D box is
    /// decoded from the anchor and the box-offset targets.
    pub fn from_targets(class: impl Into<String>, score: f64, targets: TargetVector) -> Self {
        Self {
            class: class.into(),
            score,
            box2d: decode_box2d(&targets.context.pixel, &targets.y),
            targets,
        }
    }
}

/// Decodes the 2D box from an anchor pixel and the first four targets.
pub fn decode_box2d(pixel: &Vector2<f64>, y: &TargetVec) -> Box2D {
    Box2D::new(pixel.x - y[0], pixel.y - y[1], pixel.x + y[2], pixel.y + y[3])
}

/// A candidate with a fitted 3D box.
#[derive(Clone, Debug)]
pub struct Detection {
    pub candidate: Candidate,
    pub fit: FitResult,
}

/// Keeps candidates with `score >= min_score`. The boundary is inclusive:
/// only strictly lower scores are rejected.
pub fn threshold_candidates(candidates: Vec<Candidate>, min_score: f64) -> Vec<Candidate> {
    candidates
        .into_iter()
        .filter(|c| c.score >= min_score)
        .collect()
}

/// Greedy non-maximum suppression, run per class.
///
/// Candidates are visited in descending score (stable for ties); one is kept
/// unless its 2D IoU with an already-kept candidate of the same class
/// exceeds `iou_threshold`.
pub fn nms(candidates: Vec<Candidate>, iou_threshold: f64) -> Vec<Candidate> {
    // Group by class, preserving first-appearance order of classes.
    let mut classes: Vec<String> = Vec::new();
    for c in &candidates {
        if !classes.contains(&c.class) {
            classes.push(c.class.clone());
        }
    }
    let mut kept = Vec::new();
    for class in classes {
        let mut group: Vec<Candidate> = candidates
            .iter()
            .filter(|c| c.class == class)
            .cloned()
            .collect();
        group.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
        let mut selected: Vec<Candidate> = Vec::new();
        for cand in group {
            if selected
                .iter()
                .all(|s| iou_2d(&s.box2d, &cand.box2d) <= iou_threshold)
            {
                selected.push(cand);
            }
        }
        kept.extend(selected);
    }
    kept
}

/// Pipeline settings; defaults follow the detector conventions (score 0.7,
/// NMS IoU 0.3).
#[derive(Clone, Copy, Debug)]
pub struct PipelineConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub solve_options: SolveOptions,
    pub with_covariance: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.7,
            nms_threshold: 0.3,
            solve_options: SolveOptions::default(),
            with_covariance: true,
        }
    }
}

/// Per-image pipeline output: fitted detections plus non-fatal per-candidate
/// failures (index into the post-NMS candidate list).
#[derive(Debug, Default)]
pub struct PipelineReport {
    pub detections: Vec<Detection>,
    pub failures: Vec<(usize, Error)>,
}

/// Runs thresholding, NMS and box fitting over one image's candidates.
pub fn run_pipeline(candidates: Vec<Candidate>, config: &PipelineConfig) -> PipelineReport {
    let candidates = threshold_candidates(candidates, config.score_threshold);
    let candidates = nms(candidates, config.nms_threshold);
    let mut report = PipelineReport::default();
    for (idx, cand) in candidates.into_iter().enumerate() {
        let fitted = initialize(&cand.targets).and_then(|init| {
            solve(
                &FitProblem::new(cand.targets),
                &init,
                &config.solve_options,
            )
        });
        match fitted {
            Ok(mut fit) => {
                if !fit.converged {
                    report.failures.push((idx, Error::NotConverged));
                    continue;
                }
                if config.with_covariance && fit.covariance.is_none() {
                    fit.covariance =
                        covariance(&fit.box3d, &FitProblem::new(cand.targets)).ok();
                }
                report.detections.push(Detection {
                    candidate: cand,
                    fit,
                });
            }
            Err(e) => report.failures.push((idx, e)),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Camera;
    use crate::targets::TargetContext;

    fn candidate(class: &str, score: f64, box2d: Box2D) -> Candidate {
        let ctx = TargetContext::new(Vector2::new(0.0, 0.0), Camera::ideal());
        Candidate {
            class: class.into(),
            score,
            box2d,
            targets: TargetVector::new(TargetVec::repeat(1.0), TargetVec::repeat(1.0), ctx),
        }
    }

    #[test]
    fn threshold_boundary_inclusive() {
        let cands = vec![
            candidate("Car", 0.9, Box2D::new(0.0, 0.0, 10.0, 10.0)),
            candidate("Car", 0.7, Box2D::new(20.0, 0.0, 30.0, 10.0)),
            candidate("Car", 0.69, Box2D::new(40.0, 0.0, 50.0, 10.0)),
        ];
        let kept = threshold_candidates(cands, 0.7);
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|c| c.score >= 0.7));
    }

    #[test]
    fn threshold_trivial_cases() {
        assert!(threshold_candidates(vec![], 0.7).is_empty());
        let cands = vec![candidate("Car", 0.1, Box2D::new(0.0, 0.0, 1.0, 1.0))];
        assert_eq!(threshold_candidates(cands, 0.0).len(), 1);
    }

    #[test]
    fn nms_suppresses_overlap() {
        let cands = vec![
            candidate("Car", 0.8, Box2D::new(2.0, 0.0, 12.0, 10.0)),
            candidate("Car", 0.9, Box2D::new(0.0, 0.0, 10.0, 10.0)),
        ];
        let kept = nms(cands, 0.3);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_keeps_disjoint() {
        let cands = vec![
            candidate("Car", 0.9, Box2D::new(0.0, 0.0, 10.0, 10.0)),
            candidate("Car", 0.8, Box2D::new(100.0, 0.0, 110.0, 10.0)),
        ];
        assert_eq!(nms(cands, 0.3).len(), 2);
    }

    #[test]
    fn nms_chain_keeps_first_and_last() {
        // A-B and B-C overlap above the threshold, A-C disjoint, scores
        // A > B > C: greedy selection keeps A, suppresses B, then keeps C
        // because its only high-overlap competitor was never kept.
        let a = candidate("Car", 0.9, Box2D::new(0.0, 0.0, 10.0, 10.0));
        let b = candidate("Car", 0.8, Box2D::new(2.0, 0.0, 18.0, 10.0));
        let c = candidate("Car", 0.7, Box2D::new(10.0, 0.0, 20.0, 10.0));
        assert!(iou_2d(&a.box2d, &b.box2d) > 0.3);
        assert!(iou_2d(&b.box2d, &c.box2d) > 0.3);
        assert!(iou_2d(&a.box2d, &c.box2d) == 0.0);
        let kept = nms(vec![a, b, c], 0.3);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].score, 0.7);
    }

    #[test]
    fn nms_is_per_class() {
        let cands = vec![
            candidate("Car", 0.9, Box2D::new(0.0, 0.0, 10.0, 10.0)),
            candidate("Pedestrian", 0.8, Box2D::new(0.0, 0.0, 10.0, 10.0)),
        ];
        assert_eq!(nms(cands, 0.3).len(), 2);
    }

    #[test]
    fn nms_is_idempotent() {
        let cands = vec![
            candidate("Car", 0.9, Box2D::new(0.0, 0.0, 10.0, 10.0)),
            candidate("Car", 0.8, Box2D::new(6.0, 0.0, 16.0, 10.0)),
            candidate("Car", 0.7, Box2D::new(12.0, 0.0, 22.0, 10.0)),
            candidate("Cyclist", 0.6, Box2D::new(3.0, 0.0, 13.0, 10.0)),
        ];
        let once = nms(cands, 0.3);
        let twice = nms(once.clone(), 0.3);
        assert_eq!(once.len(), twice.len());
        for (a, b) in once.iter().zip(twice.iter()) {
            assert_eq!(a.score, b.score);
            assert_eq!(a.class, b.class);
        }
    }

    #[test]
    fn pipeline_rejects_all_below_threshold() {
        let cands = vec![candidate("Car", 0.5, Box2D::new(0.0, 0.0, 10.0, 10.0))];
        let report = run_pipeline(cands, &PipelineConfig::default());
        assert!(report.detections.is_empty());
        assert!(report.failures.is_empty());
    }
}
