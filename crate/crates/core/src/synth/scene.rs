use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidTransform};
use crate::grid::{DenseGrid, FeatureMap, SparseDepthMap};

/// Upper bound of scene depth, metres.
pub const MAX_DEPTH: f64 = 80.0;
/// Largest rotation of the generated camera motion, radians (2 degrees).
pub const MAX_ROTATION: f64 = 2.0 * std::f64::consts::PI / 180.0;
/// Largest translation of the generated camera motion, metres.
pub const MAX_TRANSLATION: f64 = 0.5;

/// Stream ids for [`ChaCha8Rng::set_stream`]; each consumer of a seed gets its own.
pub mod streams {
    pub const LAYOUT: u64 = 1;
    pub const ALBEDO: u64 = 2;
    pub const MOTION: u64 = 3;
    pub const SAMPLING: u64 = 4;
    pub const ATTENTION: u64 = 5;
}

/// A ChaCha8 generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Rectangular cells of constant depth.
    Planes,
    /// One slanted plane spanning the depth range.
    SlantedRamp,
    /// Constant-depth boxes in front of a ramp background.
    Boxes,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planes" => Ok(Self::Planes),
            "slanted-ramp" | "ramp" => Ok(Self::SlantedRamp),
            "boxes" => Ok(Self::Boxes),
            _ => Err(Error::Parameter(format!("unknown layout '{s}' (planes, slanted-ramp, boxes)"))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Planes => "planes",
            Self::SlantedRamp => "slanted-ramp",
            Self::Boxes => "boxes",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub layout: Layout,
    pub depth_range: (f64, f64),
    pub intrinsics: CameraIntrinsics,
    pub seed: u64,
}

impl SceneSpec {
    /// Default camera: focal length equal to the width, centred principal point.
    pub fn new(height: usize, width: usize, layout: Layout, seed: u64) -> Result<Self> {
        let intrinsics =
            CameraIntrinsics::new(width as f64, width as f64, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)?;
        Ok(Self { height, width, layout, depth_range: (2.0, 60.0), intrinsics, seed })
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && lo < hi && hi <= MAX_DEPTH) {
            return Err(Error::Parameter(format!(
                "depth range ({lo}, {hi}) must satisfy 0 < min < max <= {MAX_DEPTH}"
            )));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::Parameter(format!("scene {}x{} is too small", self.height, self.width)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// Three-channel rendering in `[0, 1]`.
    pub image: FeatureMap,
    /// Single-channel ground-truth depth, metres.
    pub depth: DenseGrid,
    pub intrinsics: CameraIntrinsics,
    /// Camera motion from the reference frame to a second view.
    pub motion: RigidTransform,
}

/// Depth plus a region label per pixel, used for the albedo.
struct LayoutMap {
    depth: Vec<f64>,
    label: Vec<usize>,
    labels: usize,
}

/// Sorted cut positions splitting `0..len` into `parts` non-empty bands.
fn cuts(rng: &mut ChaCha8Rng, len: usize, parts: usize) -> Vec<usize> {
    let parts = parts.min(len);
    let mut inner: Vec<usize> = index::sample(rng, len - 1, parts - 1).into_iter().map(|i| i + 1).collect();
    inner.sort_unstable();
    let mut all = vec![0];
    all.extend(inner);
    all.push(len);
    all
}

fn band(cuts: &[usize], x: usize) -> usize {
    cuts.partition_point(|&c| c <= x) - 1
}

fn ramp(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> Vec<f64> {
    let tr: f64 = rng.random_range(0.0..1.0);
    let tc = 1.0 - tr;
    let flip_r = rng.random_bool(0.5);
    let flip_c = rng.random_bool(0.5);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let fr = r as f64 / (h - 1) as f64;
        let fr = if flip_r { 1.0 - fr } else { fr };
        for c in 0..w {
            let fc = c as f64 / (w - 1) as f64;
            let fc = if flip_c { 1.0 - fc } else { fc };
            let t = (tr * fr + tc * fc).clamp(0.0, 1.0);
            out.push(lo + (hi - lo) * t);
        }
    }
    out
}

fn layout_map(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> LayoutMap {
    let (h, w) = (spec.height, spec.width);
    let (lo, hi) = spec.depth_range;
    match spec.layout {
        Layout::Planes => {
            let (row_parts, col_parts) = (rng.random_range(1..=3), rng.random_range(2..=4));
            let row_cuts = cuts(rng, h, row_parts);
            let col_cuts = cuts(rng, w, col_parts);
            let cols = col_cuts.len() - 1;
            let cells = (row_cuts.len() - 1) * cols;
            let depths: Vec<f64> = (0..cells).map(|_| rng.random_range(lo..=hi)).collect();
            let label: Vec<usize> =
                (0..h * w).map(|p| band(&row_cuts, p / w) * cols + band(&col_cuts, p % w)).collect();
            LayoutMap { depth: label.iter().map(|&l| depths[l]).collect(), label, labels: cells }
        }
        Layout::SlantedRamp => LayoutMap { depth: ramp(rng, h, w, lo, hi), label: vec![0; h * w], labels: 1 },
        Layout::Boxes => {
            // Background occupies the far half of the range, boxes the near half.
            let mid = lo + (hi - lo) / 2.0;
            let mut depth = ramp(rng, h, w, mid, hi);
            let mut label = vec![0; h * w];
            let boxes = rng.random_range(2..=5);
            for b in 1..=boxes {
                let bh = rng.random_range(h.div_ceil(8)..=h.div_ceil(3));
                let bw = rng.random_range(w.div_ceil(8)..=w.div_ceil(3));
                let r0 = rng.random_range(0..=h - bh);
                let c0 = rng.random_range(0..=w - bw);
                let d = rng.random_range(lo..=mid);
                for r in r0..r0 + bh {
                    for c in c0..c0 + bw {
                        // Nearer surfaces occlude farther ones.
                        if label[r * w + c] == 0 || d < depth[r * w + c] {
                            depth[r * w + c] = d;
                            label[r * w + c] = b;
                        }
                    }
                }
            }
            LayoutMap { depth, label, labels: boxes + 1 }
        }
    }
}

fn random_motion(rng: &mut ChaCha8Rng) -> Result<RigidTransform> {
    let mut unit = || loop {
        let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    };
    let axis = unit();
    let dir = unit();
    let angle = rng.random_range(0.0..=MAX_ROTATION);
    let len = rng.random_range(0.0..=MAX_TRANSLATION);
    RigidTransform::from_axis_angle(axis, angle, dir.map(|x| x * len))
}

pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let layout = layout_map(spec, &mut rng_for(spec.seed, streams::LAYOUT));

    let mut rng = rng_for(spec.seed, streams::ALBEDO);
    let albedo: Vec<[f64; 3]> =
        (0..layout.labels).map(|_| std::array::from_fn(|_| rng.random_range(0.2..0.9))).collect();
    let freq = (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6));
    let (lo, hi) = spec.depth_range;
    let d = &layout.depth;
    let image = DenseGrid::from_fn(h, w, 3, |r, c, ch| {
        let p = r * w + c;
        let gx = d[r * w + (c + 1).min(w - 1)] - d[p];
        let gy = d[(r + 1).min(h - 1) * w + c] - d[p];
        let shading = 0.6 + 0.4 * (-(gx.abs() + gy.abs()) / (hi - lo) * 8.0).exp();
        let texture = 0.8 + 0.2 * (freq.0 * c as f64 + freq.1 * r as f64 + ch as f64).sin();
        (albedo[layout.label[p]][ch] * shading * texture).clamp(0.0, 1.0)
    })?;
    let depth = DenseGrid::new(h, w, 1, layout.depth.iter().map(|v| v.clamp(lo, hi)).collect())?;
    let motion = random_motion(&mut rng_for(spec.seed, streams::MOTION))?;
    Ok(Scene { image, depth, intrinsics: spec.intrinsics, motion })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleMode {
    /// Keep `round(f * H * W)` pixels, `f` in `(0, 1]`.
    Fraction(f64),
    /// Keep exactly `n` pixels.
    Count(usize),
}

/// Uniform sampling without replacement of valid depths.
pub fn sample_sparse(depth: &DenseGrid, mode: SampleMode, seed: u64) -> Result<SparseDepthMap> {
    if depth.channels() != 1 {
        return Err(Error::Dimension(format!("depth has {} channels", depth.channels())));
    }
    let total = depth.pixels();
    let keep = match mode {
        SampleMode::Fraction(f) if f > 0.0 && f <= 1.0 => (f * total as f64).round() as usize,
        SampleMode::Fraction(f) => return Err(Error::Parameter(format!("sampling fraction {f} outside (0, 1]"))),
        SampleMode::Count(n) if n <= total => n,
        SampleMode::Count(n) => return Err(Error::Parameter(format!("cannot sample {n} of {total} pixels"))),
    };
    let mut valid = vec![false; total];
    for i in index::sample(&mut rng_for(seed, streams::SAMPLING), total, keep) {
        valid[i] = true;
    }
    let values = depth.data().iter().zip(&valid).map(|(&d, &v)| if v { d } else { 0.0 }).collect();
    SparseDepthMap::new(depth.height(), depth.width(), values, valid)
}
