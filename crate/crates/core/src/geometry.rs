//! Pinhole camera model, rigid motions and ego-motion warping.
//!
//! Pixel coordinates are continuous with `(0, 0)` at the center of the
//! top-left pixel; `u` runs along columns and `v` along rows.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::grid::{DenseGrid, FeatureMap, Mask};

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel2 {
    pub u: f64,
    pub v: f64,
}

impl Pixel2 {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Focal lengths `(fx, fy)` and principal point `(cx, cy)`, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera intrinsics".into()));
        }
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::Parameter(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn principal_point(&self) -> Pixel2 {
        Pixel2::new(self.cx, self.cy)
    }
}

/// `p' = R p + t`, with `R` a proper rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("rigid transform".into()));
        }
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho_err >= ROTATION_TOL {
            return Err(Error::Parameter(format!("rotation is not orthonormal (error {ortho_err:e})")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(Error::Parameter(format!("rotation determinant is {det}, expected +1")));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::from(t) }
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length), then translation.
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Result<Self> {
        let axis = Vector3::from(axis);
        let norm = axis.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Parameter("rotation axis must be non-zero".into()));
        }
        let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis / norm), angle);
        Self::new(*rot.matrix(), Vector3::from(translation))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        Point3::from_vector(self.rotation * p.to_vector() + self.translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Largest absolute entry difference of the `[R | t]` blocks.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.rotation - other.rotation).amax().max((self.translation - other.translation).amax())
    }

    /// Three CSV lines `r00,r01,r02,t0` ... (the `3x4` block `[R | t]`).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..3 {
            let row = [self.rotation[(r, 0)], self.rotation[(r, 1)], self.rotation[(r, 2)], self.translation[r]];
            let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let block = crate::grid::read_csv_grid(text)?;
        if block.height() != 3 || block.width() != 4 {
            return Err(Error::Format(format!(
                "rigid transform needs a 3x4 block, got {}x{}",
                block.height(),
                block.width()
            )));
        }
        let rotation = Matrix3::from_fn(|r, c| block.get(r, c, 0));
        let translation = Vector3::from_fn(|r, _| block.get(r, 3, 0));
        Self::new(rotation, translation)
    }
}

/// Camera operator: `(fx X/Z + cx, fy Y/Z + cy)`.
pub fn project(point: Point3, intr: &CameraIntrinsics) -> Result<Pixel2> {
    if point.z <= 0.0 {
        return Err(Error::BehindCamera { z: point.z });
    }
    Ok(Pixel2::new(intr.fx * point.x / point.z + intr.cx, intr.fy * point.y / point.z + intr.cy))
}

/// Lifts a pixel at depth `depth` (meters, along the optical axis) to 3D.
pub fn backproject(pixel: Pixel2, depth: f64, intr: &CameraIntrinsics) -> Result<Point3> {
    if depth <= 0.0 || !depth.is_finite() {
        return Err(Error::InvalidDepth(depth));
    }
    Ok(Point3::new(depth * (pixel.u - intr.cx) / intr.fx, depth * (pixel.v - intr.cy) / intr.fy, depth))
}

/// Where pixel `q` with depth `depth` lands after the camera moves by `motion`.
pub fn warp_pixel(q: Pixel2, depth: f64, motion: &RigidTransform, intr: &CameraIntrinsics) -> Result<Pixel2> {
    let p = motion.apply(backproject(q, depth, intr)?);
    project(p, intr)
}

/// Coordinates this close outside the lattice are treated as lying on its edge,
/// so round-off in `project(backproject(q))` does not drop border pixels.
pub const EDGE_TOLERANCE: f64 = 1e-9;

fn snap_to_lattice(x: f64, extent: usize) -> Option<f64> {
    let hi = extent as f64 - 1.0;
    if extent == 0 || !(x >= -EDGE_TOLERANCE && x <= hi + EDGE_TOLERANCE) {
        return None;
    }
    Some(x.clamp(0.0, hi))
}

/// Bilinear blend of the four lattice neighbours of `p`.
pub fn bilinear_sample(grid: &FeatureMap, p: Pixel2) -> Result<Vec<f64>> {
    let mut out = vec![0.0; grid.channels()];
    bilinear_sample_into(grid, p, &mut out)?;
    Ok(out)
}

fn bilinear_sample_into(grid: &FeatureMap, p: Pixel2, out: &mut [f64]) -> Result<()> {
    let (w, h) = (grid.width(), grid.height());
    let (Some(u), Some(v)) = (snap_to_lattice(p.u, w), snap_to_lattice(p.v, h)) else {
        return Err(Error::OutOfBounds { u: p.u, v: p.v });
    };
    let p = Pixel2::new(u, v);
    let (x0, y0) = (p.u.floor() as usize, p.v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (p.u - x0 as f64, p.v - y0 as f64);
    let weights =
        [(y0, x0, (1.0 - fx) * (1.0 - fy)), (y0, x1, fx * (1.0 - fy)), (y1, x0, (1.0 - fx) * fy), (y1, x1, fx * fy)];
    out.iter_mut().for_each(|v| *v = 0.0);
    for (r, c, wgt) in weights {
        if wgt == 0.0 {
            continue;
        }
        for (o, &s) in out.iter_mut().zip(grid.pixel(r, c)) {
            *o += wgt * s;
        }
    }
    Ok(())
}

/// Rebuilds a view by sampling `src` at every warped pixel location.
///
/// `depth` is a single-channel grid of the same height and width as `src`.
/// Pixels with non-positive depth, behind-camera targets or targets outside
/// the lattice are zero in the output and `false` in the returned mask.
pub fn warp_map(
    src: &FeatureMap,
    depth: &DenseGrid,
    motion: &RigidTransform,
    intr: &CameraIntrinsics,
) -> Result<(FeatureMap, Mask)> {
    if depth.channels() != 1 || depth.height() != src.height() || depth.width() != src.width() {
        return Err(Error::Dimension("depth must be a single-channel grid matching the source".into()));
    }
    let (h, w, ch) = (src.height(), src.width(), src.channels());
    let mut data = vec![0.0; h * w * ch];
    let mut valid = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let d = depth.get(r, c, 0);
            let Ok(target) = warp_pixel(Pixel2::new(c as f64, r as f64), d, motion, intr) else {
                continue;
            };
            let i = r * w + c;
            if bilinear_sample_into(src, target, &mut data[i * ch..(i + 1) * ch]).is_ok() {
                valid[i] = true;
            }
        }
    }
    Ok((FeatureMap::new(h, w, ch, data)?, Mask::new(h, w, valid)?))
}
