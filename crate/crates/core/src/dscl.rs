//! Absolute depth as relative depth times a region-wise scale field, and the
//! closed-form least-squares rescaling used to check that a scale factor can
//! always reduce the sparse L2 loss.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::grid::{DenseGrid, FeatureMap, SparseDepthMap};

/// Relative depths below this are flushed up so the range stays `(0, 1]`.
pub const MIN_RELATIVE: f64 = 1e-12;

/// Positive scale factors on a uniform `rows x cols` tiling of the depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleField {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ScaleField {
    /// `values` is row-major over the region grid.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Parameter(format!("scale grid {rows}x{cols} is empty")));
        }
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} scale grid needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::Range(format!("scale values must be positive and finite, got {v}")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn uniform(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.rows, self.cols, self.values.iter().map(|v| v * factor).collect())
    }

    /// First line `rows,cols`, then one line per region row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{}\n", self.rows, self.cols);
        for row in self.values.chunks_exact(self.cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Format("empty scale field".into()))?;
        let dims: Vec<usize> = header
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|e| Error::Parse(format!("header '{header}': {e}"))))
            .collect::<Result<_>>()?;
        let [rows, cols] = dims[..] else {
            return Err(Error::Format(format!("header must be 'rows,cols', got '{header}'")));
        };
        let mut values = Vec::with_capacity(rows * cols);
        for line in lines {
            let row: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| Error::Parse(format!("'{t}': {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != cols {
                return Err(Error::Format(format!("expected {cols} values per line, got {}", row.len())));
            }
            values.extend(row);
        }
        Self::new(rows, cols, values)
    }

    /// Region cell containing pixel `(row, col)` of an `height x width` map.
    /// The caller guarantees divisibility (see [`check_tiling`]).
    fn cell_of(&self, height: usize, width: usize, row: usize, col: usize) -> (usize, usize) {
        (row / (height / self.rows), col / (width / self.cols))
    }
}

/// Rejects region grids that do not tile the map exactly.
pub fn check_tiling(height: usize, width: usize, rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 || !height.is_multiple_of(rows) || !width.is_multiple_of(cols) {
        return Err(Error::Dimension(format!("{rows}x{cols} regions do not tile a {height}x{width} map")));
    }
    Ok(())
}

/// One cell of a uniform region tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub rows: usize,
    pub cols: usize,
    pub row: usize,
    pub col: usize,
}

impl Region {
    pub fn new(rows: usize, cols: usize, row: usize, col: usize) -> Result<Self> {
        if row >= rows || col >= cols {
            return Err(Error::Parameter(format!("region ({row}, {col}) outside a {rows}x{cols} grid")));
        }
        Ok(Self { rows, cols, row, col })
    }

    fn contains(&self, height: usize, width: usize, r: usize, c: usize) -> bool {
        r / (height / self.rows) == self.row && c / (width / self.cols) == self.col
    }
}

/// Single-channel depth in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeDepth(DenseGrid);

impl RelativeDepth {
    pub fn new(grid: DenseGrid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::Dimension(format!("relative depth has 1 channel, got {}", grid.channels())));
        }
        if let Some(v) = grid.data().iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::Range(format!("relative depth must lie in (0, 1], got {v}")));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &DenseGrid {
        &self.0
    }

    pub fn into_grid(self) -> DenseGrid {
        self.0
    }
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn to_relative(latent: &DenseGrid) -> Result<RelativeDepth> {
    RelativeDepth::new(latent.map(|z| sigmoid(z).max(MIN_RELATIVE))?)
}

/// Adaptive average pooling to `rows x cols` cells followed by
/// `exp(readout . pooled)`. Cell `i` spans `floor(i H / rows) .. ceil((i + 1) H / rows)`.
pub fn scale_head(feature: &FeatureMap, rows: usize, cols: usize, readout: &[f64]) -> Result<ScaleField> {
    let (h, w, c) = (feature.height(), feature.width(), feature.channels());
    if rows == 0 || cols == 0 || rows > h || cols > w {
        return Err(Error::Dimension(format!("cannot pool a {h}x{w} feature to {rows}x{cols}")));
    }
    if readout.len() != c {
        return Err(Error::Dimension(format!("readout has {} weights for {c} channels", readout.len())));
    }
    let mut values = Vec::with_capacity(rows * cols);
    let mut pooled = vec![0.0; c];
    for i in 0..rows {
        let (r0, r1) = (i * h / rows, ((i + 1) * h).div_ceil(rows));
        for j in 0..cols {
            let (c0, c1) = (j * w / cols, ((j + 1) * w).div_ceil(cols));
            pooled.fill(0.0);
            for r in r0..r1 {
                for col in c0..c1 {
                    for (p, x) in pooled.iter_mut().zip(feature.pixel(r, col)) {
                        *p += x;
                    }
                }
            }
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            let logit: f64 = pooled.iter().zip(readout).map(|(p, w)| p / count * w).sum();
            let value = logit.exp();
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::NonFinite(format!("scale exp({logit}) in cell ({i}, {j})")));
            }
            values.push(value);
        }
    }
    ScaleField::new(rows, cols, values)
}

/// `D(q) = s(region of q) * d(q)`.
pub fn compose_depth(d: &RelativeDepth, s: &ScaleField) -> Result<DenseGrid> {
    let g = d.grid();
    let (h, w) = (g.height(), g.width());
    check_tiling(h, w, s.rows, s.cols)?;
    DenseGrid::from_fn(h, w, 1, |r, c, _| {
        let (i, j) = s.cell_of(h, w, r, c);
        s.get(i, j) * g.get(r, c, 0)
    })
}

fn support<'a>(
    pred: &'a DenseGrid,
    target: &'a SparseDepthMap,
    region: Option<Region>,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    let (h, w) = (pred.height(), pred.width());
    if pred.channels() != 1 || target.height() != h || target.width() != w {
        return Err(Error::Dimension(format!(
            "prediction {h}x{w}x{} vs target {}x{}",
            pred.channels(),
            target.height(),
            target.width()
        )));
    }
    if let Some(reg) = region {
        check_tiling(h, w, reg.rows, reg.cols)?;
    }
    Ok(target
        .iter_valid()
        .filter(move |&(r, c, _)| region.is_none_or(|reg| reg.contains(h, w, r, c)))
        .map(|(r, c, t)| (t, pred.get(r, c, 0))))
}

/// Least-squares scale `sum(D_t D) / sum(D^2)` over valid target pixels,
/// optionally restricted to one region.
pub fn optimal_scale(pred: &DenseGrid, target: &SparseDepthMap, region: Option<Region>) -> Result<f64> {
    let mut n = 0usize;
    let (mut num, mut den) = (0.0, 0.0);
    for (t, d) in support(pred, target, region)? {
        n += 1;
        num += t * d;
        den += d * d;
    }
    if n == 0 {
        return Err(Error::NoSupport);
    }
    if den == 0.0 {
        return Err(Error::Degenerate);
    }
    Ok(num / den)
}

/// Squared error before and after applying the optimal scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescaleCheck {
    pub loss_before: f64,
    pub loss_after: f64,
    pub alpha: f64,
}

pub fn rescale_check(pred: &DenseGrid, target: &SparseDepthMap, region: Option<Region>) -> Result<RescaleCheck> {
    let alpha = optimal_scale(pred, target, region)?;
    let (mut before, mut after) = (0.0, 0.0);
    for (t, d) in support(pred, target, region)? {
        before += (t - d) * (t - d);
        after += (t - alpha * d) * (t - alpha * d);
    }
    Ok(RescaleCheck { loss_before: before, loss_after: after, alpha })
}
