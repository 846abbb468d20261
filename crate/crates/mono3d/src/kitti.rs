//! KITTI-format label and calibration I/O, plus a plain-text interchange
//! format for raw per-object target predictions.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3x4, Vector2};

use crate::error::{Error, Result};
use crate::geometry::{Box2D, Box3D, Camera};
use crate::targets::{TargetContext, TargetVector};
use crate::TargetVec;

/// One line of a KITTI label file.
///
/// The on-disk location is the center of the box *bottom* face; the stored
/// [`Box3D`] uses the volumetric center. Conversion happens at parse/emit.
#[derive(Clone, Debug, PartialEq)]
pub struct Label {
    pub class: String,
    pub truncation: f64,
    pub occlusion: i32,
    /// Observation angle of the object's heading, in (-pi, pi].
    pub alpha: f64,
    pub box2d: Box2D,
    pub box3d: Box3D,
    /// Optional trailing detection score (16th field).
    pub score: Option<f64>,
}

fn parse_field<T: std::str::FromStr>(fields: &[&str], idx: usize, line: usize) -> Result<T> {
    fields
        .get(idx)
        .ok_or(Error::MalformedLine {
            line,
            msg: format!("missing field {idx}"),
        })?
        .parse()
        .map_err(|_| Error::MalformedLine {
            line,
            msg: format!("unparseable field {idx}"),
        })
}

/// Parses the body of a label file (one object per line).
pub fn parse_labels(text: &str) -> Result<Vec<Label>> {
    let mut labels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 15 && fields.len() != 16 {
            return Err(Error::MalformedLine {
                line,
                msg: format!("expected 15 or 16 fields, got {}", fields.len()),
            });
        }
        let class = fields[0].to_string();
        let truncation: f64 = parse_field(&fields, 1, line)?;
        let occlusion: i32 = parse_field(&fields, 2, line)?;
        let alpha: f64 = parse_field(&fields, 3, line)?;
        let x0: f64 = parse_field(&fields, 4, line)?;
        let y0: f64 = parse_field(&fields, 5, line)?;
        let x1: f64 = parse_field(&fields, 6, line)?;
        let y1: f64 = parse_field(&fields, 7, line)?;
        let h: f64 = parse_field(&fields, 8, line)?;
        let w: f64 = parse_field(&fields, 9, line)?;
        let l: f64 = parse_field(&fields, 10, line)?;
        let x: f64 = parse_field(&fields, 11, line)?;
        let y: f64 = parse_field(&fields, 12, line)?;
        let z: f64 = parse_field(&fields, 13, line)?;
        let theta: f64 = parse_field(&fields, 14, line)?;
        let score = if fields.len() == 16 {
            Some(parse_field(&fields, 15, line)?)
        } else {
            None
        };
        labels.push(Label {
            class,
            truncation,
            occlusion,
            alpha,
            box2d: Box2D::new(x0, y0, x1, y1),
            // Bottom-face center -> volumetric center.
            box3d: Box3D::new(h, w, l, x, y - h / 2.0, z, theta),
            score,
        });
    }
    Ok(labels)
}

/// Serializes labels back to KITTI's 2-decimal fixed-point layout.
pub fn emit_labels(labels: &[Label]) -> String {
    let mut out = String::new();
    for label in labels {
        let b = &label.box3d;
        let bottom_y = b.y_c + b.h / 2.0;
        let _ = write!(
            out,
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            label.class,
            label.truncation,
            label.occlusion,
            label.alpha,
            label.box2d.x1,
            label.box2d.y1,
            label.box2d.x2,
            label.box2d.y2,
            b.h,
            b.w,
            b.l,
            b.x_c,
            bottom_y,
            b.z_c,
            b.theta,
        );
        if let Some(score) = label.score {
            let _ = write!(out, " {score:.2}");
        }
        out.push('\n');
    }
    out
}

pub fn read_labels(path: &Path) -> Result<Vec<Label>> {
    parse_labels(&std::fs::read_to_string(path)?)
}

pub fn write_labels(path: &Path, labels: &[Label]) -> Result<()> {
    std::fs::write(path, emit_labels(labels))?;
    Ok(())
}

/// Extracts the left color camera projection ("P2" line) from a KITTI
/// calibration file.
pub fn parse_calib(text: &str) -> Result<Camera> {
    for raw in text.lines() {
        let Some(rest) = raw.strip_prefix("P2:") else {
            continue;
        };
        let values: Vec<f64> = rest
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::MalformedLine {
                line: 0,
                msg: "unparseable P2 entry".into(),
            })?;
        if values.len() != 12 {
            return Err(Error::MalformedLine {
                line: 0,
                msg: format!("P2 must have 12 entries, got {}", values.len()),
            });
        }
        let p = Matrix3x4::from_row_slice(&values);
        return Camera::new(p);
    }
    Err(Error::MissingP2)
}

/// Emits a calibration file holding only the P2 line. Values round-trip
/// exactly: the shortest representation that reparses to the same f64.
pub fn emit_calib(camera: &Camera) -> String {
    let p = camera.matrix();
    let mut out = String::from("P2:");
    for r in 0..3 {
        for c in 0..4 {
            let _ = write!(out, " {}", p[(r, c)]);
        }
    }
    out.push('\n');
    out
}

pub fn read_calib(path: &Path) -> Result<Camera> {
    parse_calib(&std::fs::read_to_string(path)?)
}

pub fn write_calib(path: &Path, camera: &Camera) -> Result<()> {
    std::fs::write(path, emit_calib(camera))?;
    Ok(())
}

/// A raw network-style prediction for one object: class, score, anchor
/// pixel, 26 target values and 26 target scales.
#[derive(Clone, Debug)]
pub struct RawPrediction {
    pub class: String,
    pub score: f64,
    pub pixel: Vector2<f64>,
    pub y: TargetVec,
    pub sigma: TargetVec,
}

impl RawPrediction {
    pub fn to_target_vector(&self, camera: Camera) -> TargetVector {
        TargetVector::new(self.y, self.sigma, TargetContext::new(self.pixel, camera))
    }
}

/// Parses the prediction interchange format: per line
/// `class score px py y_0..y_25 sigma_0..sigma_25` (56 fields).
pub fn parse_predictions(text: &str) -> Result<Vec<RawPrediction>> {
    let mut preds = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 56 {
            return Err(Error::MalformedLine {
                line,
                msg: format!("expected 56 fields, got {}", fields.len()),
            });
        }
        let class = fields[0].to_string();
        let score: f64 = parse_field(&fields, 1, line)?;
        let px: f64 = parse_field(&fields, 2, line)?;
        let py: f64 = parse_field(&fields, 3, line)?;
        let mut y = TargetVec::zeros();
        let mut sigma = TargetVec::zeros();
        for j in 0..26 {
            y[j] = parse_field(&fields, 4 + j, line)?;
            sigma[j] = parse_field(&fields, 30 + j, line)?;
            if sigma[j] <= 0.0 {
                return Err(Error::MalformedLine {
                    line,
                    msg: format!("nonpositive sigma at target {j}"),
                });
            }
        }
        preds.push(RawPrediction {
            class,
            score,
            pixel: Vector2::new(px, py),
            y,
            sigma,
        });
    }
    Ok(preds)
}

/// Serializes predictions; numeric values use the shortest exact f64
/// representation so parse(emit(x)) == x bit-for-bit.
pub fn emit_predictions(preds: &[RawPrediction]) -> String {
    let mut out = String::new();
    for p in preds {
        let _ = write!(out, "{} {} {} {}", p.class, p.score, p.pixel.x, p.pixel.y);
        for j in 0..26 {
            let _ = write!(out, " {}", p.y[j]);
        }
        for j in 0..26 {
            let _ = write!(out, " {}", p.sigma[j]);
        }
        out.push('\n');
    }
    out
}

pub fn read_predictions(path: &Path) -> Result<Vec<RawPrediction>> {
    parse_predictions(&std::fs::read_to_string(path)?)
}

pub fn write_predictions(path: &Path, preds: &[RawPrediction]) -> Result<()> {
    std::fs::write(path, emit_predictions(preds))?;
    Ok(())
}
