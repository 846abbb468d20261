//! Deterministic synthetic scene generation for testing and benchmarking
//! the fitting pipeline end to end.

use nalgebra::{Matrix3x4, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{iou_2d, projected_envelope, Box2D, Box3D, Camera};
use crate::kitti::{Label, RawPrediction};
use crate::targets::{encode, support_region, TargetContext, TargetVector};
use crate::TargetVec;

/// A camera with KITTI-like left color intrinsics (including the small
/// baseline translation), for a 1242 x 375 image.
pub fn kitti_camera() -> Camera {
    Camera::new(Matrix3x4::new(
        721.5377, 0.0, 609.5593, 44.85728, //
        0.0, 721.5377, 172.854, 0.2163791, //
        0.0, 0.0, 1.0, 0.002745884,
    ))
    .expect("fixed intrinsics are invertible")
}

/// Per-target-group noise scales (standard deviations), in the native unit
/// of each group.
#[derive(Clone, Copy, Debug)]
pub struct NoiseConfig {
    /// 2D box offsets, pixels.
    pub box_px: f64,
    /// Center distance, meters.
    pub distance_m: f64,
    /// Orientation (sin, cos) pair.
    pub sincos: f64,
    /// Log dimensions.
    pub log_dim: f64,
    /// Projected corner offsets, pixels.
    pub corner_px: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            box_px: 0.5,
            distance_m: 0.1,
            sincos: 0.01,
            log_dim: 0.02,
            corner_px: 0.5,
        }
    }
}

impl NoiseConfig {
    /// Expands the group scales to a full 26-vector.
    pub fn sigma_vector(&self) -> TargetVec {
        let mut s = TargetVec::zeros();
        for i in 0..4 {
            s[i] = self.box_px;
        }
        s[4] = self.distance_m;
        s[5] = self.sincos;
        s[6] = self.sincos;
        for i in 7..10 {
            s[i] = self.log_dim;
        }
        for i in 10..26 {
            s[i] = self.corner_px;
        }
        s
    }
}

/// Scene generation settings.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub camera: Camera,
    pub image_width: f64,
    pub image_height: f64,
    /// Inclusive range of objects per scene.
    pub min_objects: usize,
    pub max_objects: usize,
    /// When false, targets are exact and all scales are 1.
    pub noisy: bool,
    pub noise: NoiseConfig,
    /// Placement rejection: maximum allowed pairwise 2D IoU.
    pub max_pairwise_iou: f64,
    /// Placement attempts per object before giving up.
    pub max_attempts: usize,
    /// Output-grid stride used to snap anchor pixels.
    pub stride: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            camera: kitti_camera(),
            image_width: 1242.0,
            image_height: 375.0,
            min_objects: 3,
            max_objects: 8,
            noisy: false,
            noise: NoiseConfig::default(),
            max_pairwise_iou: 0.25,
            max_attempts: 1000,
            stride: 4.0,
        }
    }
}

/// One generated object with its ground truth and (possibly noisy) targets.
#[derive(Clone, Debug)]
pub struct SynthObject {
    pub box3d: Box3D,
    pub box2d: Box2D,
    /// Anchor pixel, snapped to the output grid, inside the support region.
    pub anchor: Vector2<f64>,
    pub score: f64,
    pub y: TargetVec,
    pub sigma: TargetVec,
}

impl SynthObject {
    pub fn target_vector(&self, camera: Camera) -> TargetVector {
        TargetVector::new(self.y, self.sigma, TargetContext::new(self.anchor, camera))
    }
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub camera: Camera,
    pub objects: Vec<SynthObject>,
}

impl SynthScene {
    /// Ground-truth labels in KITTI layout (fully visible cars).
    pub fn labels(&self) -> Vec<Label> {
        self.objects
            .iter()
            .map(|o| Label {
                class: "Car".into(),
                truncation: 0.0,
                occlusion: 0,
                alpha: o.box3d.observation_angle(),
                box2d: o.box2d,
                box3d: o.box3d,
                score: None,
            })
            .collect()
    }

    /// The objects as raw target predictions.
    pub fn predictions(&self) -> Vec<RawPrediction> {
        self.objects
            .iter()
            .map(|o| RawPrediction {
                class: "Car".into(),
                score: o.score,
                pixel: o.anchor,
                y: o.y,
                sigma: o.sigma,
            })
            .collect()
    }
}

/// Generates one scene.
///
/// Streams are independent per scene: the RNG is seeded with `seed` and
/// positioned on stream `scene_index`, so scenes can be generated in any
/// order (or in parallel) with identical results.
pub fn generate_scene(config: &SynthConfig, seed: u64, scene_index: u64) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_index);
    let camera = config.camera;

    let n = rng.gen_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<SynthObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _attempt in 0..config.max_attempts {
            let h = rng.gen_range(1.4..1.8);
            let w = rng.gen_range(1.5..1.9);
            let l = rng.gen_range(3.3..4.5);
            let z = rng.gen_range(8.0..40.0);
            let x = rng.gen_range(-0.3 * z..0.3 * z);
            // Wheels on a flat ground plane 1.65 m below the camera, with a
            // little jitter.
            let y_bottom = 1.65 + rng.gen_range(-0.05..0.05);
            let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let box3d = Box3D::new(h, w, l, x, y_bottom - h / 2.0, z, theta);

            let Ok(box2d) = projected_envelope(&camera, &box3d) else {
                continue;
            };
            let fully_visible = box2d.x1 >= 0.0
                && box2d.y1 >= 0.0
                && box2d.x2 <= config.image_width
                && box2d.y2 <= config.image_height
                && box2d.height() >= 25.0;
            if !fully_visible {
                continue;
            }
            if objects
                .iter()
                .any(|o| iou_2d(&o.box2d, &box2d) > config.max_pairwise_iou)
            {
                continue;
            }

            // Pick an anchor pixel uniformly from the support region.
            let region = support_region(&box2d, config.stride);
            let cells: Vec<(i64, i64)> = region.pixels().collect();
            let (gx, gy) = cells[rng.gen_range(0..cells.len())];
            let anchor = Vector2::new(gx as f64 * config.stride, gy as f64 * config.stride);

            let ctx = TargetContext::new(anchor, camera);
            let mut y = encode(&box3d, &box2d, &ctx)?;
            let sigma = if config.noisy {
                let s = config.noise.sigma_vector();
                for i in 0..26 {
                    let e: f64 = rng.sample(StandardNormal);
                    y[i] += s[i] * e;
                }
                s
            } else {
                TargetVec::repeat(1.0)
            };
            let score = rng.gen_range(0.75..1.0);

            objects.push(SynthObject {
                box3d,
                box2d,
                anchor,
                score,
                y,
                sigma,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::RejectionOverflow(config.max_attempts));
        }
    }

    Ok(SynthScene { camera, objects })
}
