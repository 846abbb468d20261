//! Oriented 3D boxes, pinhole cameras, projection and overlap measures.
//!
//! The camera frame follows the KITTI convention: x right, y down, z forward.
//! Boxes are upright (roll and pitch are zero); orientation is a single yaw
//! angle about the camera y-axis.

pub mod clip;

use nalgebra::{Matrix3, Matrix3x4, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::Vec7;

/// Minimum depth (in meters) accepted when projecting a point.
pub const EPS_DEPTH: f64 = 1e-6;

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let a = PI - (PI - theta).rem_euclid(2.0 * PI);
    // rem_euclid can return exactly 2*pi for inputs a hair below -pi.
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// An upright oriented 3D bounding box.
///
/// Dimensions `(h, w, l)` are in meters; the center `(x_c, y_c, z_c)` is in
/// the camera frame; `theta` is the yaw angle in radians, normalized to
/// `(-pi, pi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub x_c: f64,
    pub y_c: f64,
    pub z_c: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn new(h: f64, w: f64, l: f64, x_c: f64, y_c: f64, z_c: f64, theta: f64) -> Self {
        Self {
            h,
            w,
            l,
            x_c,
            y_c,
            z_c,
            theta: normalize_angle(theta),
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(self.x_c, self.y_c, self.z_c)
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }

    pub fn has_positive_dims(&self) -> bool {
        self.h > 0.0 && self.w > 0.0 && self.l > 0.0
    }

    /// Distance from the camera center to the box center.
    pub fn distance(&self) -> f64 {
        self.center().norm()
    }

    /// Observation angle `alpha = theta - atan2(x_c, z_c)`: the angle from
    /// which the camera views the object.
    pub fn observation_angle(&self) -> f64 {
        normalize_angle(self.theta - self.x_c.atan2(self.z_c))
    }

    /// Flat parameter vector `(h, w, l, x_c, y_c, z_c, theta)`.
    pub fn params(&self) -> Vec7 {
        Vec7::from_column_slice(&[
            self.h, self.w, self.l, self.x_c, self.y_c, self.z_c, self.theta,
        ])
    }

    pub fn from_params(p: &Vec7) -> Self {
        Self::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6])
    }
}

/// Yaw rotation about the camera y-axis (KITTI `rotation_y` convention).
pub fn rot_y(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Derivative of [`rot_y`] with respect to the angle.
pub fn rot_y_deriv(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

/// Corner offsets of the unit cube, in the fixed crate ordering: binary
/// counting over `(v1, v2, v3)` with `v1` the most significant bit and bit
/// value 0 mapping to -1.
pub fn unit_cube_corner(j: usize) -> Vector3<f64> {
    debug_assert!(j < 8);
    let bit = |b: usize| if (j >> b) & 1 == 1 { 1.0 } else { -1.0 };
    Vector3::new(bit(2), bit(1), bit(0))
}

/// The 8 corners of a box: `R_y(theta) * diag(h, w, l) * v_j / 2 + center`
/// for each unit cube corner `v_j`, in the ordering of [`unit_cube_corner`].
pub fn box_corners(b: &Box3D) -> [Vector3<f64>; 8] {
    let r = rot_y(b.theta);
    let c = b.center();
    std::array::from_fn(|j| {
        let v = unit_cube_corner(j);
        let scaled = Vector3::new(b.h * v.x, b.w * v.y, b.l * v.z) * 0.5;
        r * scaled + c
    })
}

/// A pinhole camera described by its 3x4 projection matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    p: Matrix3x4<f64>,
    k_inv: Matrix3<f64>,
}

impl Camera {
    /// Builds a camera from a projection matrix whose left 3x3 block
    /// (the intrinsics) must be invertible.
    pub fn new(p: Matrix3x4<f64>) -> Result<Self> {
        let k: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
        let k_inv = k.try_inverse().ok_or(Error::SingularIntrinsics)?;
        Ok(Self { p, k_inv })
    }

    /// The canonical camera `P = [I | 0]`.
    pub fn ideal() -> Self {
        Self::new(Matrix3x4::identity()).expect("identity intrinsics are invertible")
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.p
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        self.p.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn intrinsics_inv(&self) -> &Matrix3<f64> {
        &self.k_inv
    }

    /// Depth `lambda` of a point: the third homogeneous coordinate after
    /// applying `P`.
    pub fn depth(&self, point: &Vector3<f64>) -> f64 {
        let h = Vector4::new(point.x, point.y, point.z, 1.0);
        self.p.row(2).transpose().dot(&h)
    }

    /// Projects a 3D point to pixel coordinates.
    pub fn project(&self, point: &Vector3<f64>) -> Result<Vector2<f64>> {
        let h = Vector4::new(point.x, point.y, point.z, 1.0);
        let u = self.p * h;
        if u.z <= EPS_DEPTH {
            return Err(Error::DepthTooSmall(u.z));
        }
        Ok(Vector2::new(u.x / u.z, u.y / u.z))
    }

    /// Back-projects a pixel to a ray direction in the camera frame
    /// (`K^{-1} (u, v, 1)`).
    pub fn back_project(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        self.k_inv * Vector3::new(pixel.x, pixel.y, 1.0)
    }
}

/// An axis-aligned 2D box given by top-left and bottom-right corners,
/// in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }
}

/// Axis-aligned intersection-over-union. Returns 0 for degenerate boxes.
pub fn iou_2d(a: &Box2D, b: &Box2D) -> f64 {
    if a.area() <= 0.0 || b.area() <= 0.0 {
        return 0.0;
    }
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Bird's-eye-view footprint of a box: the rectangle in the (x, z) ground
/// plane, `w` across and `l` deep in the box frame, rotated by the yaw.
pub fn bev_corners(b: &Box3D) -> [Vector2<f64>; 4] {
    let (s, c) = b.theta.sin_cos();
    let half = [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)];
    std::array::from_fn(|i| {
        let (sx, sz) = half[i];
        let lx = 0.5 * b.w * sx;
        let lz = 0.5 * b.l * sz;
        Vector2::new(b.x_c + c * lx + s * lz, b.z_c - s * lx + c * lz)
    })
}

/// Area of the intersection of two BEV footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let pa = bev_corners(a);
    let pb = bev_corners(b);
    clip::area(&clip::clip_convex(&pa, &pb))
}

/// IoU of the BEV footprints of two boxes.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let area_a = a.w * a.l;
    let area_b = b.w * b.l;
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Oriented 3D intersection-over-union of two upright boxes.
///
/// The intersection volume is the convex BEV rectangle intersection (via
/// polygon clipping) times the overlap of the vertical extents
/// `[y_c - h/2, y_c + h/2]`.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let vol_a = a.volume();
    let vol_b = b.volume();
    if vol_a <= 0.0 || vol_b <= 0.0 {
        return 0.0;
    }
    let bev = bev_intersection_area(a, b);
    let y_lo = (a.y_c - 0.5 * a.h).max(b.y_c - 0.5 * b.h);
    let y_hi = (a.y_c + 0.5 * a.h).min(b.y_c + 0.5 * b.h);
    let dy = (y_hi - y_lo).max(0.0);
    let inter = bev * dy;
    let union = vol_a + vol_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Axis-aligned pixel envelope of the projected box corners.
pub fn projected_envelope(camera: &Camera, b: &Box3D) -> Result<Box2D> {
    let mut x1 = f64::INFINITY;
    let mut y1 = f64::INFINITY;
    let mut x2 = f64::NEG_INFINITY;
    let mut y2 = f64::NEG_INFINITY;
    for corner in box_corners(b) {
        let p = camera.project(&corner)?;
        x1 = x1.min(p.x);
        y1 = y1.min(p.y);
        x2 = x2.max(p.x);
        y2 = y2.max(p.y);
    }
    Ok(Box2D::new(x1, y1, x2, y2))
}
