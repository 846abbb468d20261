//! The 26 surrogate regression targets and their analytic Jacobian.
//!
//! Instead of regressing box parameters directly, the pipeline regresses
//! image-domain proxy quantities `f(b)`:
//!
//! | index   | target                                                   |
//! |---------|----------------------------------------------------------|
//! | 1..4    | 2D box offsets from the anchor pixel (pixels)            |
//! | 5       | distance from camera center to box center (meters)       |
//! | 6..7    | (sin, cos) of the observation angle                      |
//! | 8..10   | log of the box dimensions                                |
//! | 11..26  | projected-corner offsets from the anchor pixel (pixels)  |
//!
//! (Indices above are 1-based as is conventional; the code uses 0-based.)

use nalgebra::{Matrix2x3, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{
    box_corners, projected_envelope, rot_y, rot_y_deriv, unit_cube_corner, Box2D, Box3D, Camera,
};
use crate::{TargetJacobianMat, TargetVec};

/// Number of surrogate regression targets per object.
pub const NUM_TARGETS: usize = 26;

/// Where a target vector lives: its anchor pixel and camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetContext {
    pub pixel: Vector2<f64>,
    pub camera: Camera,
}

impl TargetContext {
    pub fn new(pixel: Vector2<f64>, camera: Camera) -> Self {
        Self { pixel, camera }
    }
}

/// The 26 regression values with per-value uncertainties and their context.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TargetVector {
    pub y: TargetVec,
    pub sigma: TargetVec,
    pub context: TargetContext,
}

impl TargetVector {
    /// Panics in debug builds if any sigma is not strictly positive.
    pub fn new(y: TargetVec, sigma: TargetVec, context: TargetContext) -> Self {
        debug_assert!(sigma.iter().all(|&s| s > 0.0), "sigma must be positive");
        Self { y, sigma, context }
    }
}

/// Encodes a box into the 26 targets relative to a given 2D box.
///
/// Use a labeled 2D box when available; [`residual_targets`] uses the
/// projected envelope instead, which is the model function fitted during
/// optimization.
pub fn encode(box3d: &Box3D, box2d: &Box2D, ctx: &TargetContext) -> Result<TargetVec> {
    if !box3d.has_positive_dims() {
        return Err(Error::NonpositiveDimensions);
    }
    let mut y = TargetVec::zeros();
    let p = ctx.pixel;
    y[0] = p.x - box2d.x1;
    y[1] = p.y - box2d.y1;
    y[2] = box2d.x2 - p.x;
    y[3] = box2d.y2 - p.y;
    y[4] = box3d.distance();
    let alpha = box3d.observation_angle();
    y[5] = alpha.sin();
    y[6] = alpha.cos();
    y[7] = box3d.h.ln();
    y[8] = box3d.w.ln();
    y[9] = box3d.l.ln();
    for (j, corner) in box_corners(box3d).iter().enumerate() {
        let q = ctx.camera.project(corner)?;
        y[10 + 2 * j] = q.x - p.x;
        y[11 + 2 * j] = q.y - p.y;
    }
    Ok(y)
}

/// The model function `f(b)` used inside the least-squares objective: the
/// encoding with the 2D box taken as the projected envelope of the box.
pub fn residual_targets(box3d: &Box3D, ctx: &TargetContext) -> Result<TargetVec> {
    let env = projected_envelope(&ctx.camera, box3d)?;
    encode(box3d, &env, ctx)
}

/// Jacobian `df/db` of [`residual_targets`] with respect to the 7 box
/// parameters `(h, w, l, x_c, y_c, z_c, theta)`.
///
/// The envelope rows differentiate through the active (argmin / argmax)
/// corner; at ties this is a subgradient, which is a measure-zero
/// configuration for random boxes.
pub fn target_jacobian(box3d: &Box3D, ctx: &TargetContext) -> Result<TargetJacobianMat> {
    if !box3d.has_positive_dims() {
        return Err(Error::NonpositiveDimensions);
    }
    let cam = &ctx.camera;
    let r = rot_y(box3d.theta);
    let r_dot = rot_y_deriv(box3d.theta);

    // Per-corner projected pixel and its 2x7 Jacobian.
    let mut pixels = [Vector2::zeros(); 8];
    let mut jacs = [nalgebra::SMatrix::<f64, 2, 7>::zeros(); 8];
    let corners = box_corners(box3d);
    for j in 0..8 {
        let v = unit_cube_corner(j);
        let x = corners[j];
        let h = Vector4::new(x.x, x.y, x.z, 1.0);
        let u = cam.matrix() * h;
        if u.z <= crate::geometry::EPS_DEPTH {
            return Err(Error::DepthTooSmall(u.z));
        }
        let px = u.x / u.z;
        let py = u.y / u.z;
        pixels[j] = Vector2::new(px, py);

        // dp/dX for the pinhole projection.
        let p3 = cam.matrix();
        let row = |i: usize| Vector3::new(p3[(i, 0)], p3[(i, 1)], p3[(i, 2)]);
        let dpx_dx = (row(0) - row(2) * px) / u.z;
        let dpy_dx = (row(1) - row(2) * py) / u.z;
        let dp_dx = Matrix2x3::from_rows(&[dpx_dx.transpose(), dpy_dx.transpose()]);

        // dX/db: dims scale the box-frame offset, center is additive, theta
        // rotates the scaled offset.
        let scaled = Vector3::new(box3d.h * v.x, box3d.w * v.y, box3d.l * v.z) * 0.5;
        let mut dx_db = nalgebra::SMatrix::<f64, 3, 7>::zeros();
        dx_db.set_column(0, &(r.column(0) * (0.5 * v.x)));
        dx_db.set_column(1, &(r.column(1) * (0.5 * v.y)));
        dx_db.set_column(2, &(r.column(2) * (0.5 * v.z)));
        dx_db.set_column(3, &Vector3::x());
        dx_db.set_column(4, &Vector3::y());
        dx_db.set_column(5, &Vector3::z());
        dx_db.set_column(6, &(r_dot * scaled));

        jacs[j] = dp_dx * dx_db;
    }

    // Active corners of the envelope.
    let argmin = |f: &dyn Fn(usize) -> f64| (0..8).fold(0, |b, j| if f(j) < f(b) { j } else { b });
    let argmax = |f: &dyn Fn(usize) -> f64| (0..8).fold(0, |b, j| if f(j) > f(b) { j } else { b });
    let jx1 = argmin(&|j| pixels[j].x);
    let jy1 = argmin(&|j| pixels[j].y);
    let jx2 = argmax(&|j| pixels[j].x);
    let jy2 = argmax(&|j| pixels[j].y);

    let mut jac = TargetJacobianMat::zeros();
    // f1 = p.x - x1, f2 = p.y - y1, f3 = x2 - p.x, f4 = y2 - p.y.
    jac.set_row(0, &(-jacs[jx1].row(0)).into_owned());
    jac.set_row(1, &(-jacs[jy1].row(1)).into_owned());
    jac.set_row(2, &jacs[jx2].row(0).into_owned());
    jac.set_row(3, &jacs[jy2].row(1).into_owned());

    // f5 = |center|.
    let d = box3d.distance();
    jac[(4, 3)] = box3d.x_c / d;
    jac[(4, 4)] = box3d.y_c / d;
    jac[(4, 5)] = box3d.z_c / d;

    // f6 = sin(alpha), f7 = cos(alpha) with
    // alpha = theta - atan2(x_c, z_c).
    let alpha = box3d.observation_angle();
    let r2 = box3d.x_c * box3d.x_c + box3d.z_c * box3d.z_c;
    let mut dalpha = nalgebra::RowSVector::<f64, 7>::zeros();
    dalpha[3] = -box3d.z_c / r2;
    dalpha[5] = box3d.x_c / r2;
    dalpha[6] = 1.0;
    jac.set_row(5, &(dalpha * alpha.cos()));
    jac.set_row(6, &(dalpha * -alpha.sin()));

    // f8..10 = log dims.
    jac[(7, 0)] = 1.0 / box3d.h;
    jac[(8, 1)] = 1.0 / box3d.w;
    jac[(9, 2)] = 1.0 / box3d.l;

    // f11..26: projected-corner offsets (anchor pixel is constant).
    for (j, cj) in jacs.iter().enumerate() {
        jac.set_row(10 + 2 * j, &cj.row(0).into_owned());
        jac.set_row(11 + 2 * j, &cj.row(1).into_owned());
    }
    Ok(jac)
}

/// A rectangle of output pixels carrying one object's regression targets.
///
/// Bounds are inclusive, in output-grid coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SupportRegion {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl SupportRegion {
    pub fn contains(&self, x: i64, y: i64) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn pixels(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        let xs = self.x0..=self.x1;
        xs.flat_map(move |x| (self.y0..=self.y1).map(move |y| (x, y)))
    }
}

/// Builds the support region of a 2D box: the centered rectangle with 20% of
/// the box width and height, discretized on the output-pixel grid.
///
/// `stride` is the ratio of input pixels to output pixels (4 for an output
/// resolution of one fourth of the input). The min corner is floored and the
/// max corner is ceiled; a box smaller than one output pixel collapses to the
/// single nearest pixel.
pub fn support_region(box2d: &Box2D, stride: f64) -> SupportRegion {
    let c = box2d.center();
    let hw = 0.1 * box2d.width();
    let hh = 0.1 * box2d.height();
    let x0 = ((c.x - hw) / stride).floor() as i64;
    let x1 = ((c.x + hw) / stride).ceil() as i64;
    let y0 = ((c.y - hh) / stride).floor() as i64;
    let y1 = ((c.y + hh) / stride).ceil() as i64;
    if x1 < x0 || y1 < y0 || box2d.width() <= 0.0 || box2d.height() <= 0.0 {
        let nx = (c.x / stride).round() as i64;
        let ny = (c.y / stride).round() as i64;
        return SupportRegion {
            x0: nx,
            y0: ny,
            x1: nx,
            y1: ny,
        };
    }
    SupportRegion { x0, y0, x1, y1 }
}

/// Assigns contested output pixels when support regions overlap: the closer
/// object wins. Returns the owning region index for every covered pixel.
pub fn resolve_overlaps(
    regions: &[(SupportRegion, f64)],
) -> std::collections::HashMap<(i64, i64), usize> {
    let mut owners: std::collections::HashMap<(i64, i64), usize> = std::collections::HashMap::new();
    for (idx, (region, distance)) in regions.iter().enumerate() {
        for px in region.pixels() {
            match owners.entry(px) {
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(idx);
                }
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    if *distance < regions[*e.get()].1 {
                        e.insert(idx);
                    }
                }
            }
        }
    }
    owners
}
