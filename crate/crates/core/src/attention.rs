//! Conventional self-attention (CA), dense-to-sparse attention (DSA) and the
//! linear-cost fast variant (FDSA), with analytic backward passes.
//!
//! Feature maps are flattened to `N = H * W` tokens of `C` channels. All
//! variants are residual: the query-side input is added back to the attended
//! values, so a zero value projection returns the query input unchanged.
//!
//! DSA attends every sparse-side query token over every dense-side key token
//! (`O(N^2 C)`). FDSA strip-pools the dense keys per row and the sparse queries
//! per column, correlates the two into an `H x W` matrix normalized by one
//! global softmax, and uses `N * softmax` as a per-pixel gate on the dense
//! values (`O(N C)`). The optional binary mask removes dense-side cells from
//! key pooling and zeroes their values.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Ca,
    Dsa,
    Fdsa,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Ca, Variant::Dsa, Variant::Fdsa];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Ca => "ca",
            Variant::Dsa => "dsa",
            Variant::Fdsa => "fdsa",
        }
    }

    /// Multiply-adds spent forming and applying the correlation matrix.
    pub fn flop_estimate(&self, height: usize, width: usize, channels: usize) -> u64 {
        let n = (height * width) as u64;
        let c = channels as u64;
        match self {
            Variant::Ca | Variant::Dsa => 2 * n * n * c,
            Variant::Fdsa => 2 * n * c,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ca" => Ok(Variant::Ca),
            "dsa" => Ok(Variant::Dsa),
            "fdsa" => Ok(Variant::Fdsa),
            _ => Err(Error::Parameter(format!("unknown attention variant '{s}'"))),
        }
    }
}

/// Query/key/value projections, each `C x C`, applied as `X W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

impl AttentionParams {
    pub fn new(wq: Array2<f64>, wk: Array2<f64>, wv: Array2<f64>) -> Result<Self> {
        let c = wq.nrows();
        for (name, w) in [("wq", &wq), ("wk", &wk), ("wv", &wv)] {
            if w.dim() != (c, c) || c == 0 {
                return Err(Error::Dimension(format!("{name} must be {c}x{c}, got {:?}", w.dim())));
            }
            if !w.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self { wq, wk, wv })
    }

    pub fn identity(channels: usize) -> Self {
        let eye = Array2::eye(channels);
        Self { wq: eye.clone(), wk: eye.clone(), wv: eye }
    }

    /// Entries uniform in `[-1, 1] / sqrt(C)`.
    pub fn random(channels: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (channels as f64).sqrt();
        let mut draw = || Array2::from_shape_fn((channels, channels), |_| rng.random_range(-1.0..1.0) * scale);
        let wq = draw();
        let wk = draw();
        let wv = draw();
        Self { wq, wk, wv }
    }

    pub fn channels(&self) -> usize {
        self.wq.nrows()
    }

    /// Softmax temperature, `sqrt(C)`.
    pub fn temperature(&self) -> f64 {
        (self.channels() as f64).sqrt()
    }
}

/// What each variant attends over.
///
/// * CA: `query` alone, or `query + reference` when a reference is given.
/// * DSA / FDSA: sparse-side `query`, dense-side `reference`, optional FDSA `mask`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a> {
    pub query: &'a FeatureMap,
    pub reference: Option<&'a FeatureMap>,
    pub mask: Option<&'a Mask>,
}

impl<'a> AttentionInputs<'a> {
    pub fn single(x: &'a FeatureMap) -> Self {
        Self { query: x, reference: None, mask: None }
    }

    pub fn pair(sparse: &'a FeatureMap, dense: &'a FeatureMap) -> Self {
        Self { query: sparse, reference: Some(dense), mask: None }
    }

    pub fn with_mask(mut self, mask: &'a Mask) -> Self {
        self.mask = Some(mask);
        self
    }
}

/// Softmax-normalized correlation, `rows x cols` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Correlation {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub updated: FeatureMap,
    /// `N x N` for CA/DSA, `H x W` for FDSA. Only kept on request.
    pub weights: Option<Correlation>,
    pub flop_estimate: u64,
}

/// Gradients of `sum(upstream * updated)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub query: FeatureMap,
    /// `None` when the inputs had no reference.
    pub reference: Option<FeatureMap>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

pub fn ca_forward(x: &FeatureMap, params: &AttentionParams) -> Result<AttentionOutput> {
    forward(Variant::Ca, &AttentionInputs::single(x), params, true)
}

pub fn dsa_forward(sparse: &FeatureMap, dense: &FeatureMap, params: &AttentionParams) -> Result<AttentionOutput> {
    forward(Variant::Dsa, &AttentionInputs::pair(sparse, dense), params, true)
}

pub fn fdsa_forward(
    sparse: &FeatureMap,
    dense: &FeatureMap,
    mask: Option<&Mask>,
    params: &AttentionParams,
) -> Result<AttentionOutput> {
    let inputs = AttentionInputs { query: sparse, reference: Some(dense), mask };
    forward(Variant::Fdsa, &inputs, params, true)
}

/// Runs one variant. `keep_weights` retains the correlation matrix, which
/// for CA/DSA costs `N^2` memory.
pub fn forward(
    variant: Variant,
    inputs: &AttentionInputs<'_>,
    params: &AttentionParams,
    keep_weights: bool,
) -> Result<AttentionOutput> {
    let prepared = Prepared::new(variant, inputs, params)?;
    let (h, w, c) = (prepared.height, prepared.width, prepared.channels);
    let (updated, weights) = match variant {
        Variant::Ca | Variant::Dsa => {
            let q = prepared.query_view().dot(&params.wq);
            let k = prepared.key_view().dot(&params.wk);
            let v = prepared.key_view().dot(&params.wv);
            let mut attended = vec![0.0; h * w * c];
            let scale = 1.0 / params.temperature();
            attend(as_slice(&q), as_slice(&k), as_slice(&v), c, scale, &mut attended);
            let weights = keep_weights.then(|| correlation(as_slice(&q), as_slice(&k), c, scale));
            let data = prepared.query.iter().zip(&attended).map(|(a, b)| a + b).collect();
            let n = h * w;
            (data, weights.map(|data| Correlation { rows: n, cols: n, data }))
        }
        Variant::Fdsa => {
            let f = FdsaForward::run(&prepared, params);
            let n = (h * w) as f64;
            let mut data = prepared.query.clone();
            for p in 0..h * w {
                let gate = n * f.softmax[p];
                for ch in 0..c {
                    data[p * c + ch] += gate * f.value[(p, ch)];
                }
            }
            let weights = keep_weights.then_some(Correlation { rows: h, cols: w, data: f.softmax });
            (data, weights)
        }
    };
    Ok(AttentionOutput {
        updated: FeatureMap::new(h, w, c, updated)?,
        weights,
        flop_estimate: variant.flop_estimate(h, w, c),
    })
}

/// Analytic gradients of `sum(upstream * forward(...).updated)` with respect
/// to both inputs and all three projections.
pub fn attention_backward(
    variant: Variant,
    inputs: &AttentionInputs<'_>,
    params: &AttentionParams,
    upstream: &FeatureMap,
) -> Result<AttentionGrads> {
    let prepared = Prepared::new(variant, inputs, params)?;
    if !upstream.same_shape(inputs.query) {
        return Err(Error::Dimension("upstream gradient must match the query shape".into()));
    }
    let (h, w, c) = (prepared.height, prepared.width, prepared.channels);
    let n = h * w;
    let g = ArrayView2::from_shape((n, c), upstream.data()).expect("shape checked");
    let xq = prepared.query_view();
    let xk = prepared.key_view();
    let inv_tau = 1.0 / params.temperature();

    // Gradients with respect to the query-side input and the key-side input
    // (identical arrays for single-input CA).
    let (d_xq, d_xk, d_wq, d_wk, d_wv) = match variant {
        Variant::Ca | Variant::Dsa => {
            let q = xq.dot(&params.wq);
            let k = xk.dot(&params.wk);
            let v = xk.dot(&params.wv);
            let (dq, dk, dv) = attend_backward(as_slice(&q), as_slice(&k), as_slice(&v), g, c, inv_tau);
            let d_xq = &g + &dq.dot(&params.wq.t());
            let d_xk = dk.dot(&params.wk.t()) + dv.dot(&params.wv.t());
            (d_xq, d_xk, xq.t().dot(&dq), xk.t().dot(&dk), xk.t().dot(&dv))
        }
        Variant::Fdsa => {
            let f = FdsaForward::run(&prepared, params);
            let nf = n as f64;
            // updated = xq + N * a(p) * value(p)
            let mut dvalue = Array2::<f64>::zeros((n, c));
            let mut da = vec![0.0; n];
            for p in 0..n {
                let gate = nf * f.softmax[p];
                let mut dot = 0.0;
                for ch in 0..c {
                    dvalue[(p, ch)] = gate * g[(p, ch)];
                    dot += g[(p, ch)] * f.value[(p, ch)];
                }
                da[p] = nf * dot;
            }
            // global softmax
            let s: f64 = f.softmax.iter().zip(&da).map(|(a, d)| a * d).sum();
            let dlogit: Vec<f64> = f.softmax.iter().zip(&da).map(|(a, d)| a * (d - s)).collect();
            // logit(r, col) = k_rows[r] . q_cols[col] / tau
            let mut dk_rows = Array2::<f64>::zeros((h, c));
            let mut dq_cols = Array2::<f64>::zeros((w, c));
            for r in 0..h {
                for col in 0..w {
                    let dl = dlogit[r * w + col] * inv_tau;
                    for ch in 0..c {
                        dk_rows[(r, ch)] += dl * f.q_cols[(col, ch)];
                        dq_cols[(col, ch)] += dl * f.k_rows[(r, ch)];
                    }
                }
            }
            // un-pool
            let mut dq = Array2::<f64>::zeros((n, c));
            let mut dk = Array2::<f64>::zeros((n, c));
            for r in 0..h {
                for col in 0..w {
                    let p = r * w + col;
                    let key_weight = f.key_pool_weight(r, col);
                    for ch in 0..c {
                        dq[(p, ch)] = dq_cols[(col, ch)] / h as f64;
                        dk[(p, ch)] = dk_rows[(r, ch)] * key_weight;
                    }
                }
            }
            // value = keep * (xk wv)
            let dv_raw = Array2::from_shape_fn((n, c), |(p, ch)| f.keep[p] * dvalue[(p, ch)]);
            let d_xq = &g + &dq.dot(&params.wq.t());
            let d_xk = dk.dot(&params.wk.t()) + dv_raw.dot(&params.wv.t());
            (d_xq, d_xk, xq.t().dot(&dq), xk.t().dot(&dk), xk.t().dot(&dv_raw))
        }
    };

    let to_map = |a: Array2<f64>| FeatureMap::new(h, w, c, a.into_iter().collect());
    let (query, reference) = match (variant, inputs.reference) {
        (Variant::Ca, None) => (to_map(&d_xq + &d_xk)?, None),
        (Variant::Ca, Some(_)) => {
            let total = to_map(&d_xq + &d_xk)?;
            (total.clone(), Some(total))
        }
        _ => (to_map(d_xq)?, Some(to_map(d_xk)?)),
    };
    Ok(AttentionGrads { query, reference, wq: d_wq, wk: d_wk, wv: d_wv })
}

/// Validated, flattened inputs.
struct Prepared<'a> {
    height: usize,
    width: usize,
    channels: usize,
    query: Vec<f64>,
    key: Vec<f64>,
    mask: Option<&'a Mask>,
}

impl<'a> Prepared<'a> {
    fn new(variant: Variant, inputs: &AttentionInputs<'a>, params: &AttentionParams) -> Result<Self> {
        let x = inputs.query;
        let (height, width, channels) = (x.height(), x.width(), x.channels());
        if channels != params.channels() {
            return Err(Error::Dimension(format!(
                "features have {channels} channels, projections expect {}",
                params.channels()
            )));
        }
        if height * width == 0 {
            return Err(Error::Dimension("attention needs at least one pixel".into()));
        }
        if let Some(r) = inputs.reference {
            if !r.same_shape(x) {
                return Err(Error::Dimension(format!(
                    "reference is {}x{}x{}, query is {height}x{width}x{channels}",
                    r.height(),
                    r.width(),
                    r.channels()
                )));
            }
        }
        if let Some(m) = inputs.mask {
            if m.height() != height || m.width() != width {
                return Err(Error::Dimension("mask does not match the feature grid".into()));
            }
        }
        let (query, key) = match variant {
            Variant::Ca => {
                let fused = match inputs.reference {
                    Some(r) => x.add(r)?.into_data(),
                    None => x.data().to_vec(),
                };
                (fused.clone(), fused)
            }
            Variant::Dsa | Variant::Fdsa => {
                let r =
                    inputs.reference.ok_or_else(|| Error::Parameter(format!("{variant} needs a dense reference")))?;
                (x.data().to_vec(), r.data().to_vec())
            }
        };
        let mask = if variant == Variant::Fdsa { inputs.mask } else { None };
        Ok(Self { height, width, channels, query, key, mask })
    }

    fn query_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.height * self.width, self.channels), &self.query).expect("sized")
    }

    fn key_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.height * self.width, self.channels), &self.key).expect("sized")
    }
}

fn as_slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// Intermediate values of the pooled path.
struct FdsaForward {
    width: usize,
    /// `H x C` pooled keys.
    k_rows: Array2<f64>,
    /// `W x C` pooled queries.
    q_cols: Array2<f64>,
    /// `N` global softmax over the `H x W` correlation.
    softmax: Vec<f64>,
    /// `N x C` masked value projection.
    value: Array2<f64>,
    /// 1.0 where the dense cell is kept, 0.0 where masked out.
    keep: Vec<f64>,
    /// Per row: number of kept cells pooled, or `None` when the row falls
    /// back to the plain average.
    row_count: Vec<Option<usize>>,
}

impl FdsaForward {
    fn run(prep: &Prepared<'_>, params: &AttentionParams) -> Self {
        let (h, w, c) = (prep.height, prep.width, prep.channels);
        let q = prep.query_view().dot(&params.wq);
        let k = prep.key_view().dot(&params.wk);
        let v = prep.key_view().dot(&params.wv);
        let keep: Vec<f64> = match prep.mask {
            Some(m) => m.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            None => vec![1.0; h * w],
        };

        let mut k_rows = Array2::<f64>::zeros((h, c));
        let mut row_count = Vec::with_capacity(h);
        for r in 0..h {
            let kept = (0..w).filter(|&col| keep[r * w + col] > 0.0).count();
            let count = (kept > 0).then_some(kept);
            for col in 0..w {
                let p = r * w + col;
                if count.is_some() && keep[p] == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    k_rows[(r, ch)] += k[(p, ch)];
                }
            }
            let denom = count.unwrap_or(w) as f64;
            k_rows.row_mut(r).mapv_inplace(|x| x / denom);
            row_count.push(count);
        }

        let mut q_cols = Array2::<f64>::zeros((w, c));
        for r in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    q_cols[(col, ch)] += q[(r * w + col, ch)];
                }
            }
        }
        q_cols.mapv_inplace(|x| x / h as f64);

        let logits = k_rows.dot(&q_cols.t()) / params.temperature();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut softmax: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = softmax.iter().sum();
        softmax.iter_mut().for_each(|a| *a /= total);

        let value = Array2::from_shape_fn((h * w, c), |(p, ch)| keep[p] * v[(p, ch)]);
        Self { width: w, k_rows, q_cols, softmax, value, keep, row_count }
    }

    /// d k_rows[r] / d key(r, col)
    fn key_pool_weight(&self, r: usize, col: usize) -> f64 {
        match self.row_count[r] {
            Some(n) => self.keep[r * self.width + col] / n as f64,
            None => 1.0 / self.width as f64,
        }
    }
}

/// Queries processed together against one cached key block.
const QUERY_BLOCK: usize = 16;
/// Keys per block; a block of keys and values stays cache-resident.
const KEY_BLOCK: usize = 128;
/// Independent accumulators in the row reductions (fixed reduction tree).
const LANES: usize = 8;

/// Blocked online-softmax attention:
/// `out[i] = sum_j softmax_j(q_i . k_j * scale) v[j]`.
///
/// Memory is `O(N C)`; the `N x N` correlation is never formed. Keys are
/// transposed to channel-major once so logit rows vectorize across keys.
fn attend(q: &[f64], k: &[f64], v: &[f64], c: usize, scale: f64, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { attend_fma(q, k, v, c, scale, out) };
            return;
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            unsafe { attend_avx2(q, k, v, c, scale, out) };
            return;
        }
    }
    attend_dispatch::<false>(q, k, v, c, scale, out);
}

/// Same arithmetic as the portable path, just wider vectors.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn attend_avx2(q: &[f64], k: &[f64], v: &[f64], c: usize, scale: f64, out: &mut [f64]) {
    attend_dispatch::<false>(q, k, v, c, scale, out);
}

/// Fused multiply-add variant. Results differ from the portable path in the
/// last bits but are fixed for a given machine.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn attend_fma(q: &[f64], k: &[f64], v: &[f64], c: usize, scale: f64, out: &mut [f64]) {
    attend_dispatch::<true>(q, k, v, c, scale, out);
}

/// `a * b + c`, fused when `F` is set. Only instantiate `F = true` inside an
/// `fma` target-feature context, otherwise it falls back to a slow libm call.
#[inline(always)]
fn madd<const F: bool>(a: f64, b: f64, c: f64) -> f64 {
    if F {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[inline(always)]
fn attend_dispatch<const F: bool>(q: &[f64], k: &[f64], v: &[f64], c: usize, scale: f64, out: &mut [f64]) {
    match c {
        1 => attend_fixed::<1, F>(q, k, v, scale, out),
        2 => attend_fixed::<2, F>(q, k, v, scale, out),
        4 => attend_fixed::<4, F>(q, k, v, scale, out),
        8 => attend_fixed::<8, F>(q, k, v, scale, out),
        16 => attend_fixed::<16, F>(q, k, v, scale, out),
        _ => attend_blocked(q, k, v, c, scale, out, |acc, e, vj| {
            for (a, &x) in acc.iter_mut().zip(vj) {
                *a += e * x;
            }
        }),
    }
}

/// Queries sharing one register tile in the fixed-width kernel.
const MICRO: usize = 4;

/// Fixed-width kernel: queries are register-blocked `MICRO` at a time so each
/// key and value load feeds several queries. Keys are zero-padded to a multiple
/// of `LANES` and the padded logits are set to `-inf`.
#[inline(always)]
fn attend_fixed<const C: usize, const F: bool>(q: &[f64], k: &[f64], v: &[f64], scale: f64, out: &mut [f64]) {
    let n = q.len() / C;
    let m = k.len() / C;
    let m_pad = m.next_multiple_of(LANES);
    let mut kt = vec![0.0; C * m_pad];
    for j in 0..m {
        for ch in 0..C {
            kt[ch * m_pad + j] = k[j * C + ch];
        }
    }
    let mut vp = vec![[0.0; C]; m_pad];
    for (dst, src) in vp.iter_mut().zip(v.as_chunks::<C>().0) {
        *dst = *src;
    }
    let n_pad = n.next_multiple_of(QUERY_BLOCK);
    let mut qs = vec![[0.0; C]; n_pad];
    for (dst, src) in qs.iter_mut().zip(q.as_chunks::<C>().0) {
        for ch in 0..C {
            dst[ch] = src[ch] * scale;
        }
    }

    let mut tile = vec![0.0; QUERY_BLOCK * KEY_BLOCK];
    for q0 in (0..n_pad).step_by(QUERY_BLOCK) {
        let mut run_max = [f64::NEG_INFINITY; QUERY_BLOCK];
        let mut run_sum = [0.0; QUERY_BLOCK];
        let mut acc = [[0.0; C]; QUERY_BLOCK];
        for k0 in (0..m_pad).step_by(KEY_BLOCK) {
            let kb = KEY_BLOCK.min(m_pad - k0);
            for i0 in (0..QUERY_BLOCK).step_by(MICRO) {
                let qm: [[f64; C]; MICRO] = std::array::from_fn(|r| qs[q0 + i0 + r]);
                for j0 in (0..kb).step_by(LANES) {
                    let mut a = [[0.0; LANES]; MICRO];
                    for (ch, keys) in kt.chunks_exact(m_pad).enumerate() {
                        let kv: &[f64; LANES] = keys[k0 + j0..k0 + j0 + LANES].try_into().expect("lane block");
                        for r in 0..MICRO {
                            let qv = qm[r][ch];
                            for l in 0..LANES {
                                a[r][l] = madd::<F>(qv, kv[l], a[r][l]);
                            }
                        }
                    }
                    for (r, acc) in a.iter().enumerate() {
                        let at = (i0 + r) * KEY_BLOCK + j0;
                        tile[at..at + LANES].copy_from_slice(acc);
                    }
                }
            }
            if k0 + kb > m {
                for i in 0..QUERY_BLOCK {
                    tile[i * KEY_BLOCK + (m - k0)..i * KEY_BLOCK + kb].fill(f64::NEG_INFINITY);
                }
            }
            for i in 0..QUERY_BLOCK {
                let row = &mut tile[i * KEY_BLOCK..i * KEY_BLOCK + kb];
                let new_max = run_max[i].max(lane_max(row));
                let shrink = exp_core::<F>(run_max[i] - new_max);
                let block_sum = exp_shifted::<F>(row, new_max);
                run_sum[i] = run_sum[i] * shrink + block_sum;
                run_max[i] = new_max;
                for a in acc[i].iter_mut() {
                    *a *= shrink;
                }
            }
            for i0 in (0..QUERY_BLOCK).step_by(MICRO) {
                let mut a: [[f64; C]; MICRO] = std::array::from_fn(|r| acc[i0 + r]);
                for (j, vj) in vp[k0..k0 + kb].iter().enumerate() {
                    for r in 0..MICRO {
                        let e = tile[(i0 + r) * KEY_BLOCK + j];
                        for ch in 0..C {
                            a[r][ch] = madd::<F>(e, vj[ch], a[r][ch]);
                        }
                    }
                }
                acc[i0..i0 + MICRO].copy_from_slice(&a);
            }
        }
        for i in 0..QUERY_BLOCK.min(n.saturating_sub(q0)) {
            let inv = 1.0 / run_sum[i];
            for ch in 0..C {
                out[(q0 + i) * C + ch] = acc[i][ch] * inv;
            }
        }
    }
}

#[inline(always)]
fn attend_blocked(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    c: usize,
    scale: f64,
    out: &mut [f64],
    accumulate: impl Fn(&mut [f64], f64, &[f64]),
) {
    let n = q.len() / c;
    let m = k.len() / c;
    let mut kt = vec![0.0; m * c];
    for j in 0..m {
        for ch in 0..c {
            kt[ch * m + j] = k[j * c + ch];
        }
    }
    let mut tile = vec![0.0; QUERY_BLOCK * KEY_BLOCK];
    let mut run_max = [f64::NEG_INFINITY; QUERY_BLOCK];
    let mut run_sum = [0.0; QUERY_BLOCK];
    let mut acc = vec![0.0; QUERY_BLOCK * c];
    for q0 in (0..n).step_by(QUERY_BLOCK) {
        let qb = QUERY_BLOCK.min(n - q0);
        run_max.fill(f64::NEG_INFINITY);
        run_sum.fill(0.0);
        acc.fill(0.0);
        for k0 in (0..m).step_by(KEY_BLOCK) {
            let kb = KEY_BLOCK.min(m - k0);
            for i in 0..qb {
                let qi = &q[(q0 + i) * c..(q0 + i + 1) * c];
                let row = &mut tile[i * KEY_BLOCK..i * KEY_BLOCK + kb];
                row.fill(0.0);
                for (ch, &qv) in qi.iter().enumerate() {
                    let qv = qv * scale;
                    for (l, &kv) in row.iter_mut().zip(&kt[ch * m + k0..ch * m + k0 + kb]) {
                        *l += qv * kv;
                    }
                }
                let new_max = run_max[i].max(lane_max(row));
                let shrink = exp_nonpositive(run_max[i] - new_max);
                let block_sum = exp_shifted_in_place(row, new_max);
                run_sum[i] = run_sum[i] * shrink + block_sum;
                run_max[i] = new_max;
                let acc_i = &mut acc[i * c..(i + 1) * c];
                acc_i.iter_mut().for_each(|a| *a *= shrink);
                for (&e, vj) in row.iter().zip(v[k0 * c..(k0 + kb) * c].chunks_exact(c)) {
                    accumulate(acc_i, e, vj);
                }
            }
        }
        for i in 0..qb {
            let inv = 1.0 / run_sum[i];
            for (o, a) in out[(q0 + i) * c..(q0 + i + 1) * c].iter_mut().zip(&acc[i * c..(i + 1) * c]) {
                *o = a * inv;
            }
        }
    }
}

/// Full softmax correlation rows, `N x M`. Only for diagnostics on small grids.
fn correlation(q: &[f64], k: &[f64], c: usize, scale: f64) -> Vec<f64> {
    let m = k.len() / c;
    let mut out = Vec::with_capacity(q.len() / c * m);
    let mut row = vec![0.0; m];
    for qi in q.chunks_exact(c) {
        for (l, kj) in row.iter_mut().zip(k.chunks_exact(c)) {
            *l = dot(qi, kj) * scale;
        }
        let max = lane_max(&row);
        let inv = 1.0 / exp_shifted_in_place(&mut row, max);
        out.extend(row.iter().map(|e| e * inv));
    }
    out
}

#[inline(always)]
fn lane_max(row: &[f64]) -> f64 {
    let mut lanes = [f64::NEG_INFINITY; LANES];
    let chunks = row.chunks_exact(LANES);
    let tail = chunks.remainder();
    for chunk in chunks {
        for i in 0..LANES {
            lanes[i] = if chunk[i] > lanes[i] { chunk[i] } else { lanes[i] };
        }
    }
    tail.iter().chain(&lanes).fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a })
}

/// Replaces every `x` with `exp(x - max)` and returns the sum. Requires
/// `max >= x` for all entries.
#[inline(always)]
fn exp_shifted_in_place(row: &mut [f64], max: f64) -> f64 {
    exp_shifted::<false>(row, max)
}

#[inline(always)]
fn exp_shifted<const F: bool>(row: &mut [f64], max: f64) -> f64 {
    let mut lanes = [0.0; LANES];
    let mut chunks = row.chunks_exact_mut(LANES);
    for chunk in &mut chunks {
        for i in 0..LANES {
            chunk[i] = exp_core::<F>(chunk[i] - max);
            lanes[i] += chunk[i];
        }
    }
    let mut tail_sum = 0.0;
    for x in chunks.into_remainder() {
        *x = exp_core::<F>(*x - max);
        tail_sum += *x;
    }
    lanes.iter().sum::<f64>() + tail_sum
}

/// `exp(x)` for `x <= 0`, branch-free so that the softmax loops vectorize.
///
/// Range reduction `x = n ln2 + r`, `|r| <= ln2 / 2`, then a degree-12
/// Taylor polynomial (truncation error below 2e-16 relative). Results under
/// `2^-1022` flush to zero.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    exp_core::<false>(x)
}

#[inline(always)]
fn exp_core<const F: bool>(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // Adding 1.5 * 2^52 rounds to the nearest integer and leaves it in the low mantissa bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    const INV_FACT: [f64; 13] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5040.0,
        1.0 / 40320.0,
        1.0 / 362880.0,
        1.0 / 3628800.0,
        1.0 / 39916800.0,
        1.0 / 479001600.0,
    ];
    let x = if x < -708.0 { -708.0 } else { x };
    let shifted = x * LOG2E + SHIFTER;
    let n = shifted - SHIFTER;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Estrin evaluation keeps the dependency chain short.
    let c = INV_FACT;
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let p01 = madd::<F>(c[1], r, c[0]);
    let p23 = madd::<F>(c[3], r, c[2]);
    let p45 = madd::<F>(c[5], r, c[4]);
    let p67 = madd::<F>(c[7], r, c[6]);
    let p89 = madd::<F>(c[9], r, c[8]);
    let p1011 = madd::<F>(c[11], r, c[10]);
    let lo = madd::<F>(madd::<F>(p67, r2, p45), r4, madd::<F>(p23, r2, p01));
    let hi = madd::<F>(c[12], r4, madd::<F>(p1011, r2, p89));
    let p = madd::<F>(hi, r8, lo);
    let biased = (shifted.to_bits() as i64).wrapping_add(1023) as u64;
    let scale = f64::from_bits(biased << 52);
    let y = p * scale;
    if x <= -708.0 {
        0.0
    } else {
        y
    }
}

/// Backward of [`attend`] given upstream `g` on its output. Returns the
/// gradients for `q`, `k` and `v` (scale folded in).
fn attend_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: ArrayView2<'_, f64>,
    c: usize,
    scale: f64,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let n = q.len() / c;
    let m = k.len() / c;
    let mut dq = Array2::<f64>::zeros((n, c));
    let mut dk = Array2::<f64>::zeros((m, c));
    let mut dv = Array2::<f64>::zeros((m, c));
    let mut a = vec![0.0; m];
    let mut da = vec![0.0; m];
    for i in 0..n {
        let qi = &q[i * c..(i + 1) * c];
        let gi = g.row(i);
        let gi = gi.as_slice().expect("contiguous");
        let mut max = f64::NEG_INFINITY;
        for (aj, kj) in a.iter_mut().zip(k.chunks_exact(c)) {
            *aj = dot(qi, kj) * scale;
            max = max.max(*aj);
        }
        let sum = exp_shifted_in_place(&mut a, max);
        let mut s = 0.0;
        for ((aj, daj), vj) in a.iter_mut().zip(da.iter_mut()).zip(v.chunks_exact(c)) {
            *aj /= sum;
            *daj = dot(gi, vj);
            s += *aj * *daj;
        }
        for j in 0..m {
            let ds = a[j] * (da[j] - s) * scale;
            let kj = &k[j * c..(j + 1) * c];
            for ch in 0..c {
                dq[(i, ch)] += ds * kj[ch];
                dk[(j, ch)] += ds * qi[ch];
                dv[(j, ch)] += a[j] * gi[ch];
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
