//! Sparse-to-dense depth references: morphological dilation with square or
//! cross structuring elements, and scattered-data interpolation baselines.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::SparseDepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelShape {
    Square,
    Cross,
}

/// Structuring element: a symmetric set of `(dy, dx)` offsets containing the origin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DilationKernel {
    shape: KernelShape,
    size: usize,
    offsets: Vec<(isize, isize)>,
}

impl DilationKernel {
    pub fn new(shape: KernelShape, size: usize) -> Result<Self> {
        if size < 3 || size.is_multiple_of(2) {
            return Err(Error::Parameter(format!("kernel size must be odd and >= 3, got {size}")));
        }
        let r = (size / 2) as isize;
        let offsets = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
            .filter(|&(dy, dx)| shape == KernelShape::Square || dy == 0 || dx == 0)
            .collect();
        Ok(Self { shape, size, offsets })
    }

    pub fn shape(&self) -> KernelShape {
        self.shape
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }
}

pub fn make_kernel(shape: KernelShape, size: usize) -> Result<DilationKernel> {
    DilationKernel::new(shape, size)
}

impl fmt::Display for DilationKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.shape {
            KernelShape::Square => "square",
            KernelShape::Cross => "cross",
        };
        write!(f, "{name}{}", self.size)
    }
}

/// Parses `square5`, `cross3`, ...
impl FromStr for DilationKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (shape, digits) = if let Some(rest) = s.strip_prefix("square") {
            (KernelShape::Square, rest)
        } else if let Some(rest) = s.strip_prefix("cross") {
            (KernelShape::Cross, rest)
        } else {
            return Err(Error::Parameter(format!("unknown kernel '{s}', expected e.g. square5 or cross3")));
        };
        let size = digits.parse().map_err(|_| Error::Parameter(format!("kernel '{s}' has no valid size")))?;
        Self::new(shape, size)
    }
}

/// Fills every invalid pixel that sees at least one valid pixel through the
/// kernel with the smallest (closest-surface) depth it sees. Valid pixels are
/// never modified.
pub fn dilate(sparse: &SparseDepthMap, kernel: &DilationKernel) -> SparseDepthMap {
    let (h, w) = (sparse.height() as isize, sparse.width() as isize);
    let mut depth = sparse.depths().to_vec();
    let mut valid = sparse.validity().to_vec();
    for r in 0..h {
        for c in 0..w {
            let i = (r * w + c) as usize;
            if sparse.validity()[i] {
                continue;
            }
            let mut best = f64::INFINITY;
            for &(dy, dx) in kernel.offsets() {
                let (rr, cc) = (r + dy, c + dx);
                if rr < 0 || cc < 0 || rr >= h || cc >= w {
                    continue;
                }
                if let Some(d) = sparse.get(rr as usize, cc as usize) {
                    best = best.min(d);
                }
            }
            if best.is_finite() {
                depth[i] = best;
                valid[i] = true;
            }
        }
    }
    SparseDepthMap::new(sparse.height(), sparse.width(), depth, valid).expect("dilation keeps depths positive")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterpMethod {
    /// Depth of the Euclidean-nearest valid pixel.
    Nearest,
    /// Inverse-distance blend of the four nearest valid pixels.
    Bilinear,
}

impl FromStr for InterpMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            _ => Err(Error::Parameter(format!("unknown interpolation '{s}'"))),
        }
    }
}

impl fmt::Display for InterpMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nearest => "nearest",
            Self::Bilinear => "bilinear",
        })
    }
}

/// Produces a fully valid map. Distance ties resolve to the valid pixel that
/// comes first in scan order.
pub fn interpolate(sparse: &SparseDepthMap, method: InterpMethod) -> Result<SparseDepthMap> {
    let index = ValidIndex::build(sparse)?;
    let k = match method {
        InterpMethod::Nearest => 1,
        InterpMethod::Bilinear => 4,
    };
    let (h, w) = (sparse.height(), sparse.width());
    let mut depth = Vec::with_capacity(h * w);
    let mut found = Vec::with_capacity(k);
    for r in 0..h {
        for c in 0..w {
            if let Some(d) = sparse.get(r, c) {
                depth.push(d);
                continue;
            }
            index.k_nearest(r, c, k, &mut found);
            if let [only] = found.as_slice() {
                depth.push(only.depth);
                continue;
            }
            let (mut num, mut den) = (0.0, 0.0);
            for n in &found {
                let wgt = 1.0 / (n.dist2 as f64).sqrt();
                num += wgt * n.depth;
                den += wgt;
            }
            depth.push(num / den);
        }
    }
    SparseDepthMap::new(h, w, depth, vec![true; h * w])
}

/// Fraction of valid pixels.
pub fn density(sparse: &SparseDepthMap) -> f64 {
    sparse.density()
}

/// Any of the densification methods, addressable by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Densifier {
    Dilate(DilationKernel),
    Interpolate(InterpMethod),
}

impl Densifier {
    pub fn apply(&self, sparse: &SparseDepthMap) -> Result<SparseDepthMap> {
        match self {
            Self::Dilate(k) => Ok(dilate(sparse, k)),
            Self::Interpolate(m) => interpolate(sparse, *m),
        }
    }
}

impl FromStr for Densifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<InterpMethod>() {
            Ok(m) => Ok(Self::Interpolate(m)),
            Err(_) => s.parse().map(Self::Dilate),
        }
    }
}

impl fmt::Display for Densifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dilate(k) => k.fmt(f),
            Self::Interpolate(m) => m.fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Neighbor {
    dist2: u64,
    row: usize,
    col: usize,
    depth: f64,
}

impl Neighbor {
    fn key(&self) -> (u64, usize, usize) {
        (self.dist2, self.row, self.col)
    }
}

/// Valid pixels bucketed on a coarse grid for ring-by-ring neighbour search.
struct ValidIndex {
    cell: usize,
    rows: usize,
    cols: usize,
    buckets: Vec<Vec<(usize, usize, f64)>>,
}

impl ValidIndex {
    fn build(sparse: &SparseDepthMap) -> Result<Self> {
        let n = sparse.valid_count();
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        let area = (sparse.height() * sparse.width()) as f64;
        let cell = ((area / n as f64).sqrt().ceil() as usize).max(1);
        let rows = sparse.height().div_ceil(cell);
        let cols = sparse.width().div_ceil(cell);
        let mut buckets = vec![Vec::new(); rows * cols];
        for (r, c, d) in sparse.iter_valid() {
            buckets[(r / cell) * cols + c / cell].push((r, c, d));
        }
        Ok(Self { cell, rows, cols, buckets })
    }

    /// The `k` nearest valid pixels ordered by `(distance, row, col)`.
    fn k_nearest(&self, row: usize, col: usize, k: usize, out: &mut Vec<Neighbor>) {
        out.clear();
        let (br, bc) = ((row / self.cell) as isize, (col / self.cell) as isize);
        let max_ring = self.rows.max(self.cols) as isize;
        for ring in 0..=max_ring {
            for dr in -ring..=ring {
                for dc in -ring..=ring {
                    if dr.abs() != ring && dc.abs() != ring {
                        continue;
                    }
                    let (r, c) = (br + dr, bc + dc);
                    if r < 0 || c < 0 || r >= self.rows as isize || c >= self.cols as isize {
                        continue;
                    }
                    for &(vr, vc, depth) in &self.buckets[r as usize * self.cols + c as usize] {
                        let dy = vr.abs_diff(row) as u64;
                        let dx = vc.abs_diff(col) as u64;
                        let cand = Neighbor { dist2: dy * dy + dx * dx, row: vr, col: vc, depth };
                        let pos = out.partition_point(|n| n.key() < cand.key());
                        if pos < k {
                            out.insert(pos, cand);
                            out.truncate(k);
                        }
                    }
                }
            }
            // Anything beyond this ring is at least ring*cell + 1 away along one axis.
            if out.len() == k {
                let bound = ring as u64 * self.cell as u64 + 1;
                if out[k - 1].dist2 < bound * bound {
                    break;
                }
            }
        }
    }
}
