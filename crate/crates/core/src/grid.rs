//! Grid containers shared by every other module, plus the file codecs for
//! depth maps (16-bit KITTI PNG) and plain numeric grids (CSV).
//!
//! All grids use one layout: row-major scan order with the channel index
//! varying fastest, i.e. element `(row, col, ch)` lives at
//! `(row * width + col) * channels + ch`.

use std::io::Cursor;

use crate::error::{Error, Result};

/// An `H x W x C` grid of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Feature maps, images and single-channel depth grids all share the dense container.
pub type FeatureMap = DenseGrid;

impl DenseGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Dimension("grid needs at least one channel".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{channels} grid needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid element {i} is {}", data[i])));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0).expect("zero grid is well formed")
    }

    /// Builds a grid from `f(row, col, ch)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..channels {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of pixels, `H * W`.
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.index(row, col, ch)]
    }

    /// The channel vector at one pixel.
    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = self.index(row, col, 0);
        &self.data[start..start + self.channels]
    }

    pub fn same_shape(&self, other: &DenseGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.height, self.width, self.channels, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise sum of two equally shaped grids.
    pub fn add(&self, other: &DenseGrid) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::Dimension(format!(
                "cannot add {}x{}x{} and {}x{}x{} grids",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self::new(self.height, self.width, self.channels, data)
    }

    pub fn max_abs_diff(&self, other: &DenseGrid) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// A boolean `H x W` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} mask needs {} cells, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.count() as f64 / self.data.len() as f64
    }
}

/// Sparse metric depth: valid pixels carry a positive finite depth in meters,
/// invalid pixels carry exactly `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl SparseDepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if depth.len() != n || valid.len() != n {
            return Err(Error::Dimension(format!(
                "{height}x{width} depth map needs {n} depths and flags, got {} and {}",
                depth.len(),
                valid.len()
            )));
        }
        for (i, (&d, &v)) in depth.iter().zip(&valid).enumerate() {
            if !d.is_finite() {
                return Err(Error::NonFinite(format!("depth at index {i} is {d}")));
            }
            if v && d <= 0.0 {
                return Err(Error::Format(format!("valid pixel {i} has non-positive depth {d}")));
            }
            if !v && d != 0.0 {
                return Err(Error::Format(format!("invalid pixel {i} carries depth {d}")));
            }
        }
        Ok(Self { height, width, depth, valid })
    }

    /// Zero marks an invalid pixel; every positive value is a measurement.
    pub fn from_depths(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        if let Some(&d) = depth.iter().find(|d| **d < 0.0) {
            return Err(Error::Format(format!("negative depth {d}")));
        }
        let valid = depth.iter().map(|&d| d > 0.0).collect();
        Self::new(height, width, depth, valid)
    }

    /// A fully valid map from a strictly positive single-channel grid.
    pub fn from_dense(grid: &DenseGrid) -> Result<Self> {
        if grid.channels() != 1 {
            return Err(Error::Dimension("depth grids are single-channel".into()));
        }
        let valid = vec![true; grid.pixels()];
        Self::new(grid.height(), grid.width(), grid.data().to_vec(), valid)
    }

    /// Keeps only the pixels where `keep` is true.
    pub fn from_dense_masked(grid: &DenseGrid, keep: &Mask) -> Result<Self> {
        if grid.channels() != 1 || grid.height() != keep.height() || grid.width() != keep.width() {
            return Err(Error::Dimension("mask does not match the depth grid".into()));
        }
        let depth = grid.data().iter().zip(keep.data()).map(|(&d, &k)| if k { d } else { 0.0 }).collect();
        Self::new(grid.height(), grid.width(), depth, keep.data().to_vec())
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, depth: vec![0.0; height * width], valid: vec![false; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    /// Depth at a pixel, `None` when invalid.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.valid[i].then_some(self.depth[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Fraction of valid pixels.
    pub fn density(&self) -> f64 {
        if self.valid.is_empty() {
            return 0.0;
        }
        self.valid_count() as f64 / self.valid.len() as f64
    }

    pub fn mask(&self) -> Mask {
        Mask { height: self.height, width: self.width, data: self.valid.clone() }
    }

    /// Single-channel dense view with zeros at invalid pixels.
    pub fn to_dense(&self) -> DenseGrid {
        DenseGrid::new(self.height, self.width, 1, self.depth.clone()).expect("depths are finite")
    }

    /// Iterates `(row, col, depth)` over valid pixels in scan order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let w = self.width;
        self.valid.iter().enumerate().filter(|(_, &v)| v).map(move |(i, _)| (i / w, i % w, self.depth[i]))
    }
}

/// Meters per raw unit in the KITTI 16-bit depth convention.
pub const KITTI_DEPTH_SCALE: f64 = 256.0;

/// Decodes a 16-bit single-channel PNG; `depth = raw / 256`, raw 0 is invalid.
pub fn read_kitti_png(bytes: &[u8]) -> Result<SparseDepthMap> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::Codec(e.to_string()))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if depth != png::BitDepth::Sixteen {
        return Err(Error::Format(format!("expected 16-bit PNG, got {depth:?}")));
    }
    if color != png::ColorType::Grayscale {
        return Err(Error::Format(format!("expected single-channel PNG, got {color:?}")));
    }
    let size = reader.output_buffer_size().ok_or_else(|| Error::Codec("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::Codec(e.to_string()))?;
    let (width, height) = (frame.width as usize, frame.height as usize);
    let mut depths = Vec::with_capacity(width * height);
    for row in buf[..frame.buffer_size()].chunks_exact(frame.line_size) {
        for px in row[..2 * width].chunks_exact(2) {
            let raw = u16::from_be_bytes([px[0], px[1]]);
            depths.push(f64::from(raw) / KITTI_DEPTH_SCALE);
        }
    }
    SparseDepthMap::from_depths(height, width, depths)
}

/// Quantizes a valid depth to its 16-bit raw value, rounding half up.
///
/// Depths below half a quantum still encode as 1 so that a valid pixel never
/// turns into the invalid marker.
pub fn quantize_depth(depth: f64) -> Result<u16> {
    let raw = (depth * KITTI_DEPTH_SCALE + 0.5).floor();
    if depth >= 256.0 || raw > f64::from(u16::MAX) {
        return Err(Error::Range(format!("depth {depth} m does not fit the 16-bit range")));
    }
    Ok((raw as u16).max(1))
}

/// Encodes a depth map as a 16-bit grayscale PNG.
pub fn write_kitti_png(map: &SparseDepthMap) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(2 * map.depth.len());
    for (&d, &v) in map.depth.iter().zip(&map.valid) {
        let raw = if v { quantize_depth(d)? } else { 0 };
        payload.extend_from_slice(&raw.to_be_bytes());
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, map.width as u32, map.height as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Sixteen);
        let mut writer = encoder.write_header().map_err(|e| Error::Codec(e.to_string()))?;
        writer.write_image_data(&payload).map_err(|e| Error::Codec(e.to_string()))?;
        writer.finish().map_err(|e| Error::Codec(e.to_string()))?;
    }
    Ok(out)
}

/// Parses a rectangular comma-separated table into a single-channel grid.
pub fn read_csv_grid(text: &str) -> Result<DenseGrid> {
    read_csv_grid_channels(text, 1)
}

/// Parses a table whose rows hold `width * channels` values each.
pub fn read_csv_grid_channels(text: &str, channels: usize) -> Result<DenseGrid> {
    if channels == 0 {
        return Err(Error::Dimension("grid needs at least one channel".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut data = Vec::new();
    let mut row_len = None;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        match row_len {
            None => row_len = Some(record.len()),
            Some(n) if n != record.len() => {
                return Err(Error::Format(format!("ragged table: row {rows} has {} cells, expected {n}", record.len())))
            }
            _ => {}
        }
        for cell in record.iter() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse(format!("row {rows}: '{cell}' is not a number")))?;
            data.push(v);
        }
        rows += 1;
    }
    let row_len = row_len.ok_or_else(|| Error::Format("empty table".into()))?;
    if row_len % channels != 0 {
        return Err(Error::Format(format!("{row_len} cells per row is not a multiple of {channels}")));
    }
    DenseGrid::new(rows, row_len / channels, channels, data)
}

/// One line per grid row, channels interleaved. Values use the shortest
/// decimal form that parses back to the same `f64`.
pub fn write_csv_grid(grid: &DenseGrid) -> String {
    let mut out = String::new();
    let row_len = grid.width * grid.channels;
    for row in grid.data.chunks(row_len.max(1)).take(grid.height) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Any-reduction of `factor x factor` blocks.
pub fn downsample_mask(valid: &Mask, factor: usize) -> Result<Mask> {
    if factor == 0 || !valid.height.is_multiple_of(factor) || !valid.width.is_multiple_of(factor) {
        return Err(Error::Dimension(format!("factor {factor} does not divide {}x{}", valid.height, valid.width)));
    }
    let (h, w) = (valid.height / factor, valid.width / factor);
    Ok(Mask::from_fn(h, w, |r, c| {
        (0..factor).any(|dr| (0..factor).any(|dc| valid.get(r * factor + dr, c * factor + dc)))
    }))
}
