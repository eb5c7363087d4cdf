use std::fmt;
use std::str::FromStr;

use crate::dscl::{self, check_tiling, compose_depth, sigmoid, to_relative, Region, ScaleField};
use crate::error::{Error, Result};
use crate::grid::{DenseGrid, SparseDepthMap};
use crate::loss::{l2_sparse_loss, single_view_loss, total_loss, LossParts, LossReport, LossTerm, LossWeights};
use crate::metrics::{evaluate, EvalResult};

/// Depth ceiling of the direct parameterization `D = 80 sigmoid(z)`.
pub const DIRECT_DEPTH_SCALE: f64 = 80.0;
/// Consecutive step halvings before a step is abandoned.
const MAX_HALVINGS: usize = 64;
/// Largest change of any latent in one step. Longer steps are halved like
/// increasing ones; without the cap a region scale can collapse to zero depth.
pub const MAX_LATENT_STEP: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Per-pixel latent, `D = 80 sigmoid(z)`.
    Direct,
    /// Per-pixel relative depth `sigmoid(z)` times a per-region scale `exp(s)`.
    Dscl,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "dscl" => Ok(Self::Dscl),
            _ => Err(Error::Parameter(format!("unknown mode '{s}' (direct, dscl)"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Direct => "direct",
            Self::Dscl => "dscl",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub scale_regions: (usize, usize),
    pub steps: usize,
    pub step_size: f64,
    pub smoothness_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Dscl,
            scale_regions: (2, 2),
            steps: 500,
            step_size: 1.0,
            smoothness_weight: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Parameter(format!("step size {} must be positive", self.step_size)));
        }
        if !(self.smoothness_weight.is_finite() && self.smoothness_weight >= 0.0) {
            return Err(Error::Parameter(format!("smoothness weight {} must be >= 0", self.smoothness_weight)));
        }
        let (rows, cols) = self.scale_regions;
        if rows == 0 || cols == 0 {
            return Err(Error::Parameter(format!("scale regions {rows}x{cols} are empty")));
        }
        Ok(())
    }

    /// Loss weights of the objective: the second-order term carries the
    /// smoothness weight, the edge-aware term is off, terms are per-pixel means.
    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.smoothness_weight, beta: 0.0, gamma: 1.0, normalize: true }
    }
}

/// Starting point of the optimization.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    /// `z = 0`, and `s = ln 80` in dscl mode: 40 m everywhere.
    Neutral,
    /// Latents reproducing the given depth map.
    FromDepth(&'a DenseGrid),
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Transpose of the replicate-boundary forward difference along one axis.
fn forward_diff_t(y: &[f64], h: usize, w: usize, along_cols: bool, out: &mut [f64]) {
    let (len, stride) = if along_cols { (w, 1) } else { (h, w) };
    for r in 0..h {
        for c in 0..w {
            let i = if along_cols { c } else { r };
            let p = r * w + c;
            let prev = if i >= 1 { y[p - stride] } else { 0.0 };
            let own = if i + 1 < len { y[p] } else { 0.0 };
            out[p] = prev - own;
        }
    }
}

fn forward_diff(x: &[f64], h: usize, w: usize, along_cols: bool, out: &mut [f64]) {
    for r in 0..h {
        for c in 0..w {
            let (nr, nc) = if along_cols { (r, (c + 1).min(w - 1)) } else { ((r + 1).min(h - 1), c) };
            out[r * w + c] = x[nr * w + nc] - x[r * w + c];
        }
    }
}

/// The training objective `mean l2 + lambda mean |d2 D|` as a function of
/// the flat parameter vector: `HW` pixel latents, then `rows * cols` scale
/// latents in dscl mode.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    mode: TrainMode,
    regions: (usize, usize),
    height: usize,
    width: usize,
    target: &'a SparseDepthMap,
    weights: LossWeights,
}

impl<'a> Objective<'a> {
    pub fn new(config: &TrainConfig, target: &'a SparseDepthMap) -> Result<Self> {
        config.validate()?;
        let (h, w) = (target.height(), target.width());
        if config.mode == TrainMode::Dscl {
            check_tiling(h, w, config.scale_regions.0, config.scale_regions.1)?;
        }
        Ok(Self {
            mode: config.mode,
            regions: config.scale_regions,
            height: h,
            width: w,
            target,
            weights: config.weights(),
        })
    }

    pub fn param_count(&self) -> usize {
        let pixels = self.height * self.width;
        match self.mode {
            TrainMode::Direct => pixels,
            TrainMode::Dscl => pixels + self.regions.0 * self.regions.1,
        }
    }

    pub fn init(&self, init: Init<'_>) -> Result<Vec<f64>> {
        let (h, w) = (self.height, self.width);
        let (rows, cols) = self.regions;
        match init {
            Init::Neutral => {
                let mut p = vec![0.0; h * w];
                if self.mode == TrainMode::Dscl {
                    p.extend(std::iter::repeat_n(DIRECT_DEPTH_SCALE.ln(), rows * cols));
                }
                Ok(p)
            }
            Init::FromDepth(depth) => {
                if depth.channels() != 1 || depth.height() != h || depth.width() != w {
                    return Err(Error::Dimension("initial depth does not match the target".into()));
                }
                if let Some(d) = depth.data().iter().find(|d| !(**d > 0.0 && **d < DIRECT_DEPTH_SCALE)) {
                    return Err(Error::Range(format!("initial depth {d} outside (0, {DIRECT_DEPTH_SCALE})")));
                }
                match self.mode {
                    TrainMode::Direct => Ok(depth.data().iter().map(|d| logit(d / DIRECT_DEPTH_SCALE)).collect()),
                    TrainMode::Dscl => {
                        // Region scale leaves headroom so relative depth stays below 1.
                        let (rh, rw) = (h / rows, w / cols);
                        let mut scale = vec![0.0f64; rows * cols];
                        for (p, d) in depth.data().iter().enumerate() {
                            let k = (p / w / rh) * cols + (p % w) / rw;
                            scale[k] = scale[k].max(d / 0.9);
                        }
                        let mut params: Vec<f64> = depth
                            .data()
                            .iter()
                            .enumerate()
                            .map(|(p, d)| logit(d / scale[(p / w / rh) * cols + (p % w) / rw]))
                            .collect();
                        params.extend(scale.iter().map(|s| s.ln()));
                        Ok(params)
                    }
                }
            }
        }
    }

    fn check_len(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension(format!("{} parameters, expected {}", params.len(), self.param_count())));
        }
        Ok(())
    }

    fn scale_field(&self, params: &[f64]) -> Result<ScaleField> {
        let s = &params[self.height * self.width..];
        ScaleField::new(self.regions.0, self.regions.1, s.iter().map(|v| v.exp()).collect())
    }

    /// Dense depth for a parameter vector.
    pub fn depth(&self, params: &[f64]) -> Result<DenseGrid> {
        self.check_len(params)?;
        let z = DenseGrid::new(self.height, self.width, 1, params[..self.height * self.width].to_vec())?;
        let d = to_relative(&z)?;
        match self.mode {
            TrainMode::Direct => d.grid().map(|v| v * DIRECT_DEPTH_SCALE),
            TrainMode::Dscl => compose_depth(&d, &self.scale_field(params)?),
        }
    }

    fn report_for(&self, depth: &DenseGrid) -> Result<LossReport> {
        let parts = LossParts {
            cross: LossTerm::zero(),
            single: single_view_loss(depth, depth, &self.weights)?,
            l2: l2_sparse_loss(depth, self.target)?,
        };
        total_loss(&parts, &self.weights)
    }

    pub fn value(&self, params: &[f64]) -> Result<LossReport> {
        self.report_for(&self.depth(params)?)
    }

    /// Gradient of `value(params).total`. `|x|` is differentiated as `sign(x)`.
    pub fn gradient(&self, params: &[f64]) -> Result<Vec<f64>> {
        let depth = self.depth(params)?;
        let (h, w) = (self.height, self.width);
        let n = h * w;
        let d = depth.data();
        let mut g_depth = vec![0.0; n];
        let n_l2 = self.target.valid_count();
        if n_l2 > 0 {
            for (r, c, t) in self.target.iter_valid() {
                g_depth[r * w + c] = -2.0 * (t - d[r * w + c]) / n_l2 as f64;
            }
        }
        let lambda = self.weights.alpha / n as f64;
        if lambda > 0.0 {
            let (mut d1, mut d2, mut t1, mut t2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for along_cols in [true, false] {
                forward_diff(d, h, w, along_cols, &mut d1);
                forward_diff(&d1, h, w, along_cols, &mut d2);
                for v in d2.iter_mut() {
                    *v = if *v > 0.0 {
                        1.0
                    } else if *v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                forward_diff_t(&d2, h, w, along_cols, &mut t1);
                forward_diff_t(&t1, h, w, along_cols, &mut t2);
                for (g, t) in g_depth.iter_mut().zip(&t2) {
                    *g += lambda * t;
                }
            }
        }
        let z = &params[..n];
        let mut grad = vec![0.0; self.param_count()];
        match self.mode {
            TrainMode::Direct => {
                for p in 0..n {
                    let s = sigmoid(z[p]);
                    let ds = if s < dscl::MIN_RELATIVE { 0.0 } else { s * (1.0 - s) };
                    grad[p] = g_depth[p] * DIRECT_DEPTH_SCALE * ds;
                }
            }
            TrainMode::Dscl => {
                let field = self.scale_field(params)?;
                let (rows, cols) = self.regions;
                let (rh, rw) = (h / rows, w / cols);
                for p in 0..n {
                    let k = (p / w / rh) * cols + (p % w) / rw;
                    let s = sigmoid(z[p]);
                    let ds = if s < dscl::MIN_RELATIVE { 0.0 } else { s * (1.0 - s) };
                    grad[p] = g_depth[p] * field.values()[k] * ds;
                    grad[n + k] += g_depth[p] * d[p];
                }
            }
        }
        Ok(grad)
    }
}

/// One accepted step of the learning curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub step_size: f64,
    pub report: LossReport,
    /// Raw `sum (D_t - D)^2` at this point.
    pub l2_sum: f64,
    /// The same sum after replacing each region scale by its least-squares
    /// optimum. Only in dscl mode.
    pub l2_rescaled_sum: Option<f64>,
}

impl CurvePoint {
    pub fn csv_header() -> String {
        format!("step,step_size,{},l2_sum,l2_rescaled_sum", LossReport::CSV_HEADER)
    }

    pub fn csv_row(&self) -> String {
        let rescaled = self.l2_rescaled_sum.map(|v| format!("{v:?}")).unwrap_or_default();
        format!("{},{:?},{},{:?},{}", self.step, self.step_size, self.report.csv_row(), self.l2_sum, rescaled)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub depth: DenseGrid,
    pub params: Vec<f64>,
    pub curve: Vec<CurvePoint>,
    /// Against the full dense ground truth.
    pub eval: EvalResult,
}

fn curve_point(
    objective: &Objective<'_>,
    config: &TrainConfig,
    step: usize,
    step_size: f64,
    depth: &DenseGrid,
    report: LossReport,
) -> Result<CurvePoint> {
    let l2_sum = l2_sparse_loss(depth, objective.target)?.value;
    let l2_rescaled_sum = match config.mode {
        TrainMode::Direct => None,
        TrainMode::Dscl => {
            let (rows, cols) = config.scale_regions;
            let mut sum = 0.0;
            for row in 0..rows {
                for col in 0..cols {
                    match dscl::rescale_check(depth, objective.target, Some(Region::new(rows, cols, row, col)?)) {
                        Ok(chk) => sum += chk.loss_after,
                        Err(Error::NoSupport) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
            Some(sum)
        }
    };
    Ok(CurvePoint { step, step_size, report, l2_sum, l2_rescaled_sum })
}

/// Gradient descent with backtracking: a step that would increase the
/// objective, make it non-finite, or move a latent by more than
/// [`MAX_LATENT_STEP`] is retried at half the step size, and the reduced step
/// size is kept.
pub fn train_toy(
    gt: &DenseGrid,
    sparse: &SparseDepthMap,
    config: &TrainConfig,
    init: Init<'_>,
) -> Result<TrainOutcome> {
    let objective = Objective::new(config, sparse)?;
    let mut params = objective.init(init)?;
    let mut depth = objective.depth(&params)?;
    let mut report = objective.report_for(&depth)?;
    if !report.total.is_finite() {
        return Err(Error::Divergence { step: 0 });
    }
    let mut eta = config.step_size;
    let mut curve = vec![curve_point(&objective, config, 0, eta, &depth, report)?];
    for step in 1..=config.steps {
        let grad = objective.gradient(&params)?;
        let g_max = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut accepted = None;
        let mut any_finite = false;
        for _ in 0..MAX_HALVINGS {
            if eta * g_max > MAX_LATENT_STEP {
                any_finite = true;
                eta /= 2.0;
                continue;
            }
            let cand: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - eta * g).collect();
            let evaluated = objective.depth(&cand).and_then(|d| objective.report_for(&d).map(|r| (d, r)));
            match evaluated {
                Ok((d, r)) if r.total.is_finite() => {
                    any_finite = true;
                    if r.total <= report.total {
                        accepted = Some((cand, d, r));
                        break;
                    }
                }
                Ok(_) | Err(Error::NonFinite(_)) | Err(Error::Range(_)) => {}
                Err(e) => return Err(e),
            }
            eta /= 2.0;
        }
        match accepted {
            Some((p, d, r)) => {
                params = p;
                depth = d;
                report = r;
            }
            None if !any_finite => return Err(Error::Divergence { step }),
            // No descent along the gradient at any tried step: stay put.
            None => {}
        }
        curve.push(curve_point(&objective, config, step, eta, &depth, report)?);
    }
    let eval = evaluate(&depth, &SparseDepthMap::from_dense(gt)?)?;
    Ok(TrainOutcome { depth, params, curve, eval })
}
