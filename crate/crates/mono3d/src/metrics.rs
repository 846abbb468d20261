//! Detection evaluation: average precision under 2D / BEV / 3D IoU
//! criteria, average orientation similarity and average localization
//! precision.

use crate::geometry::{bev_iou, iou_2d, iou_3d, Box2D, Box3D};

/// Which overlap test decides whether a detection is a true positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CriterionKind {
    Iou2D,
    IouBev,
    Iou3D,
    /// Joint criterion: 2D IoU above the threshold and 3D center distance
    /// below `localization_threshold`.
    Alp,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalCriterion {
    pub kind: CriterionKind,
    pub iou_threshold: f64,
    /// Only used by the ALP criterion (meters).
    pub localization_threshold: f64,
}

impl EvalCriterion {
    pub fn iou_2d(threshold: f64) -> Self {
        Self {
            kind: CriterionKind::Iou2D,
            iou_threshold: threshold,
            localization_threshold: f64::INFINITY,
        }
    }

    pub fn iou_bev(threshold: f64) -> Self {
        Self {
            kind: CriterionKind::IouBev,
            iou_threshold: threshold,
            localization_threshold: f64::INFINITY,
        }
    }

    pub fn iou_3d(threshold: f64) -> Self {
        Self {
            kind: CriterionKind::Iou3D,
            iou_threshold: threshold,
            localization_threshold: f64::INFINITY,
        }
    }

    pub fn alp(iou_threshold: f64, max_distance: f64) -> Self {
        Self {
            kind: CriterionKind::Alp,
            iou_threshold,
            localization_threshold: max_distance,
        }
    }

    /// The similarity used to pick the most similar ground truth.
    fn similarity(&self, det: &EvalDetection, gt: &EvalGroundTruth) -> f64 {
        match self.kind {
            CriterionKind::Iou2D | CriterionKind::Alp => iou_2d(&det.box2d, &gt.box2d),
            CriterionKind::IouBev => bev_iou(&det.box3d, &gt.box3d),
            CriterionKind::Iou3D => iou_3d(&det.box3d, &gt.box3d),
        }
    }

    fn satisfied(&self, det: &EvalDetection, gt: &EvalGroundTruth) -> bool {
        match self.kind {
            CriterionKind::Alp => {
                iou_2d(&det.box2d, &gt.box2d) >= self.iou_threshold
                    && (det.box3d.center() - gt.box3d.center()).norm()
                        <= self.localization_threshold
            }
            _ => self.similarity(det, gt) >= self.iou_threshold,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalDetection {
    pub score: f64,
    pub box2d: Box2D,
    pub box3d: Box3D,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalGroundTruth {
    pub box2d: Box2D,
    pub box3d: Box3D,
    /// "Don't care" ground truth: matched detections count neither as true
    /// nor as false positives.
    pub ignore: bool,
}

/// One image worth of detections and labels.
#[derive(Clone, Debug, Default)]
pub struct Frame {
    pub detections: Vec<EvalDetection>,
    pub ground_truth: Vec<EvalGroundTruth>,
}

/// Per-detection matching outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Outcome {
    /// Matched ground-truth index and the orientation similarity
    /// `(1 + cos(delta alpha)) / 2` of the pair.
    TruePositive { gt: usize, orientation_sim: f64 },
    FalsePositive,
    /// Matched only a "don't care" region.
    Ignored,
}

/// Result of matching one frame.
#[derive(Clone, Debug)]
pub struct FrameMatch {
    /// Outcome per detection, in input order.
    pub outcomes: Vec<Outcome>,
    /// Number of ground-truth boxes that count toward recall.
    pub num_gt: usize,
}

/// Greedy score-descending matching: each detection is assigned to its most
/// similar not-yet-matched ground truth; it is a true positive iff that pair
/// satisfies the criterion.
pub fn match_detections(
    detections: &[EvalDetection],
    ground_truth: &[EvalGroundTruth],
    criterion: &EvalCriterion,
) -> FrameMatch {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut gt_taken = vec![false; ground_truth.len()];
    let mut outcomes = vec![Outcome::FalsePositive; detections.len()];
    for &d in &order {
        let det = &detections[d];
        // Most similar unmatched real ground truth.
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if gt_taken[g] || gt.ignore {
                continue;
            }
            let sim = criterion.similarity(det, gt);
            if best.is_none_or(|(_, s)| sim > s) {
                best = Some((g, sim));
            }
        }
        if let Some((g, _)) = best {
            if criterion.satisfied(det, &ground_truth[g]) {
                gt_taken[g] = true;
                let delta = detections[d].box3d.observation_angle()
                    - ground_truth[g].box3d.observation_angle();
                outcomes[d] = Outcome::TruePositive {
                    gt: g,
                    orientation_sim: 0.5 * (1.0 + delta.cos()),
                };
                continue;
            }
        }
        // Detections covering only don't-care regions are dropped from the
        // precision-recall bookkeeping.
        let hits_ignored = ground_truth
            .iter()
            .any(|gt| gt.ignore && criterion.satisfied(det, gt));
        outcomes[d] = if hits_ignored {
            Outcome::Ignored
        } else {
            Outcome::FalsePositive
        };
    }

    FrameMatch {
        outcomes,
        num_gt: ground_truth.iter().filter(|g| !g.ignore).count(),
    }
}

/// AP interpolation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Interpolation {
    /// Recall grid 0, 0.1, ..., 1.0 with interpolated precision
    /// max{p(r') : r' >= r}.
    #[default]
    ElevenPoint,
    /// Recall grid 1/40, 2/40, ..., 1.
    FortyPoint,
}

/// A precision-recall curve with its interpolated AP.
#[derive(Clone, Debug)]
pub struct PrCurve {
    /// One point per detection rank: (recall, precision).
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

#[derive(Clone, Copy, Debug)]
struct DetRecord {
    score: f64,
    /// None: ignored. Some(sim): matched with this orientation similarity
    /// (1.0 is used when orientation is not being scored).
    tp: Option<f64>,
    fp: bool,
}

fn pr_curve(mut records: Vec<DetRecord>, num_gt: usize, interp: Interpolation) -> PrCurve {
    records.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    let mut points = Vec::new();
    let mut tp_weight = 0.0;
    let mut tp_count = 0usize;
    let mut counted = 0usize;
    for r in &records {
        if let Some(sim) = r.tp {
            tp_weight += sim;
            tp_count += 1;
            counted += 1;
        } else if r.fp {
            counted += 1;
        } else {
            continue;
        }
        let recall = if num_gt == 0 {
            0.0
        } else {
            tp_count as f64 / num_gt as f64
        };
        points.push((recall, tp_weight / counted as f64));
    }

    let grid: Vec<f64> = match interp {
        Interpolation::ElevenPoint => (0..=10).map(|i| i as f64 / 10.0).collect(),
        Interpolation::FortyPoint => (1..=40).map(|i| i as f64 / 40.0).collect(),
    };
    let mut ap = 0.0;
    for &r in &grid {
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        ap += p / grid.len() as f64;
    }
    PrCurve { points, ap }
}

fn collect_records(
    frames: &[Frame],
    criterion: &EvalCriterion,
    orientation_weighted: bool,
) -> (Vec<DetRecord>, usize) {
    let mut records = Vec::new();
    let mut num_gt = 0usize;
    for frame in frames {
        let matched = match_detections(&frame.detections, &frame.ground_truth, criterion);
        num_gt += matched.num_gt;
        for (d, outcome) in matched.outcomes.iter().enumerate() {
            let record = match outcome {
                Outcome::TruePositive {
                    orientation_sim, ..
                } => DetRecord {
                    score: frame.detections[d].score,
                    tp: Some(if orientation_weighted {
                        *orientation_sim
                    } else {
                        1.0
                    }),
                    fp: false,
                },
                Outcome::FalsePositive => DetRecord {
                    score: frame.detections[d].score,
                    tp: None,
                    fp: true,
                },
                Outcome::Ignored => continue,
            };
            records.push(record);
        }
    }
    (records, num_gt)
}

/// Average precision over a set of frames.
pub fn average_precision(
    frames: &[Frame],
    criterion: &EvalCriterion,
    interp: Interpolation,
) -> PrCurve {
    let (records, num_gt) = collect_records(frames, criterion, false);
    pr_curve(records, num_gt, interp)
}

/// Average orientation similarity: AP-style aggregation under 2D-IoU
/// matching where every true positive contributes
/// `(1 + cos(delta alpha)) / 2` instead of 1.
pub fn average_orientation_similarity(
    frames: &[Frame],
    iou_threshold: f64,
    interp: Interpolation,
) -> PrCurve {
    let criterion = EvalCriterion::iou_2d(iou_threshold);
    let (records, num_gt) = collect_records(frames, &criterion, true);
    pr_curve(records, num_gt, interp)
}

/// Average localization precision: AP under the joint 2D-IoU +
/// center-distance criterion.
pub fn average_localization_precision(
    frames: &[Frame],
    iou_threshold: f64,
    max_distance: f64,
    interp: Interpolation,
) -> PrCurve {
    let criterion = EvalCriterion::alp(iou_threshold, max_distance);
    let (records, num_gt) = collect_records(frames, &criterion, false);
    pr_curve(records, num_gt, interp)
}

/// KITTI-style difficulty bin: caps on 2D height, occlusion and truncation.
/// The numbers come from the public benchmark definitions and are plain
/// configuration here.
#[derive(Clone, Copy, Debug)]
pub struct DifficultyConfig {
    pub min_height_px: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

impl DifficultyConfig {
    pub fn easy() -> Self {
        Self {
            min_height_px: 40.0,
            max_occlusion: 0,
            max_truncation: 0.15,
        }
    }

    pub fn moderate() -> Self {
        Self {
            min_height_px: 25.0,
            max_occlusion: 1,
            max_truncation: 0.30,
        }
    }

    pub fn hard() -> Self {
        Self {
            min_height_px: 25.0,
            max_occlusion: 2,
            max_truncation: 0.50,
        }
    }

    pub fn admits(&self, box2d_height: f64, occlusion: i32, truncation: f64) -> bool {
        box2d_height >= self.min_height_px
            && occlusion <= self.max_occlusion
            && truncation <= self.max_truncation
    }
}
