//! Depth error metrics over valid ground-truth pixels. Linear errors are
//! reported in millimetres, inverse-depth errors in 1/km.

use crate::error::{Error, Result};
use crate::grid::{DenseGrid, SparseDepthMap};

/// Metric values plus the pooled sums they derive from, so that results
/// can be recombined exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub rmse_mm: f64,
    pub mae_mm: f64,
    pub irmse_per_km: f64,
    pub imae_per_km: f64,
    pub n_valid: usize,
    /// `sum e^2`, `e` in mm.
    pub sum_sq_mm: f64,
    /// `sum |e|`, mm.
    pub sum_abs_mm: f64,
    /// `sum ie^2`, `ie` in 1/km.
    pub sum_sq_inv: f64,
    /// `sum |ie|`, 1/km.
    pub sum_abs_inv: f64,
}

impl EvalResult {
    pub const CSV_HEADER: &'static str = "rmse_mm,mae_mm,irmse_km,imae_km,n_valid";

    fn from_sums(n: usize, sum_sq_mm: f64, sum_abs_mm: f64, sum_sq_inv: f64, sum_abs_inv: f64) -> Self {
        let n_f = n as f64;
        Self {
            rmse_mm: (sum_sq_mm / n_f).sqrt(),
            mae_mm: sum_abs_mm / n_f,
            irmse_per_km: (sum_sq_inv / n_f).sqrt(),
            imae_per_km: sum_abs_inv / n_f,
            n_valid: n,
            sum_sq_mm,
            sum_abs_mm,
            sum_sq_inv,
            sum_abs_inv,
        }
    }

    pub fn csv_row(&self) -> String {
        format!("{:?},{:?},{:?},{:?},{}", self.rmse_mm, self.mae_mm, self.irmse_per_km, self.imae_per_km, self.n_valid)
    }
}

pub fn evaluate(pred: &DenseGrid, gt: &SparseDepthMap) -> Result<EvalResult> {
    if pred.channels() != 1 || pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Dimension(format!(
            "prediction {}x{}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            pred.channels(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut n, mut sq, mut abs, mut isq, mut iabs) = (0usize, 0.0, 0.0, 0.0, 0.0);
    for (r, c, t) in gt.iter_valid() {
        let p = pred.get(r, c, 0);
        if p <= 0.0 {
            return Err(Error::InverseDomain(p));
        }
        let e = (p - t) * 1000.0;
        let ie = (1.0 / p - 1.0 / t) * 1000.0;
        n += 1;
        sq += e * e;
        abs += e.abs();
        isq += ie * ie;
        iabs += ie.abs();
    }
    if n == 0 {
        return Err(Error::NoSupport);
    }
    Ok(EvalResult::from_sums(n, sq, abs, isq, iabs))
}

/// Recombines per-frame results from their pooled sums, each frame weighted
/// by its valid-pixel count.
pub fn aggregate(results: &[EvalResult]) -> Result<EvalResult> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut acc = (0usize, 0.0, 0.0, 0.0, 0.0);
    for r in results {
        acc.0 += r.n_valid;
        acc.1 += r.sum_sq_mm;
        acc.2 += r.sum_abs_mm;
        acc.3 += r.sum_sq_inv;
        acc.4 += r.sum_abs_inv;
    }
    if acc.0 == 0 {
        return Err(Error::NoSupport);
    }
    Ok(EvalResult::from_sums(acc.0, acc.1, acc.2, acc.3, acc.4))
}
