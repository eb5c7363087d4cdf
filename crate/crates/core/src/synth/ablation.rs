use crate::densify::{density, Densifier};
use crate::error::{Error, Result};
use crate::grid::{DenseGrid, SparseDepthMap};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub config: Densifier,
    pub density: f64,
    /// Pixels that were invalid in the input and valid after densification.
    pub filled: usize,
    /// Mean absolute error on the filled pixels, metres (0 when none were filled).
    pub fill_mae: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "config,density,filled,fill_mae_m";

    pub fn csv_row(&self) -> String {
        format!("{},{:?},{},{:?}", self.config, self.density, self.filled, self.fill_mae)
    }
}

/// Density and fill error of each densifier against the dense ground truth.
pub fn dilation_ablation(gt: &DenseGrid, sparse: &SparseDepthMap, configs: &[Densifier]) -> Result<Vec<AblationRow>> {
    if gt.channels() != 1 || gt.height() != sparse.height() || gt.width() != sparse.width() {
        return Err(Error::Dimension("ground truth does not match the sparse map".into()));
    }
    configs
        .iter()
        .map(|cfg| {
            let dense = cfg.apply(sparse)?;
            let (mut filled, mut abs) = (0usize, 0.0);
            for (r, c, d) in dense.iter_valid() {
                if !sparse.is_valid(r, c) {
                    filled += 1;
                    abs += (d - gt.get(r, c, 0)).abs();
                }
            }
            let fill_mae = if filled == 0 { 0.0 } else { abs / filled as f64 };
            Ok(AblationRow { config: cfg.clone(), density: density(&dense), filled, fill_mae })
        })
        .collect()
}
