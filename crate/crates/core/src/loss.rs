//! Reconstruction and sparse supervision losses, their weighted total, and a
//! central-difference gradient checker.
//!
//! All terms are plain sums over pixels. Derivatives are forward differences
//! with a replicated last row/column, so the first difference vanishes on the
//! far border and the second difference is the first applied twice per axis.

use crate::error::{Error, Result};
use crate::grid::{DenseGrid, FeatureMap, Mask, SparseDepthMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Second-order smoothness weight.
    pub alpha: f64,
    /// Edge-aware first-order weight.
    pub beta: f64,
    /// Weight of the sparse L2 term in the total.
    pub gamma: f64,
    /// Divide each term by its pixel count before weighting.
    pub normalize: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1e-3, beta: 1e-3, gamma: 1.0, normalize: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Parameter(format!("loss weight {name} = {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// One summed loss term. `empty` flags a term evaluated on no pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub count: usize,
    pub empty: bool,
}

impl LossTerm {
    pub fn new(value: f64, count: usize) -> Self {
        Self { value, count, empty: count == 0 }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0)
    }

    /// Mean over the counted pixels, 0 when empty.
    pub fn normalized(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.value / self.count as f64
        }
    }
}

fn check_shapes(a: &DenseGrid, b: &DenseGrid) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// L1 feature distance summed over mask-true pixels and channels.
pub fn cross_view_loss(warped_target: &FeatureMap, source: &FeatureMap, mask: &Mask) -> Result<LossTerm> {
    check_shapes(warped_target, source)?;
    if mask.height() != source.height() || mask.width() != source.width() {
        return Err(Error::Dimension("mask does not match the feature maps".into()));
    }
    let c = source.channels();
    let mut sum = 0.0;
    let mut count = 0;
    for (p, _) in mask.data().iter().enumerate().filter(|(_, m)| **m) {
        let a = &warped_target.data()[p * c..(p + 1) * c];
        let b = &source.data()[p * c..(p + 1) * c];
        sum += a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        count += 1;
    }
    Ok(LossTerm::new(sum, count))
}

/// The three raw sums of the single-view loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleViewTerms {
    /// `sum |I - O|`.
    pub l1: f64,
    /// `sum |d2 O|` over both axes.
    pub second_order: f64,
    /// `sum exp(-|d1 I|) |d1 O|` over both axes, channel sums inside the exponent.
    pub edge_aware: f64,
}

impl SingleViewTerms {
    pub fn combine(&self, w: &LossWeights) -> f64 {
        self.l1 + w.alpha * self.second_order - w.beta * self.edge_aware
    }
}

/// Forward difference along one axis with replicate boundary: `x[i+1] - x[i]`,
/// zero on the last index.
fn forward_diff(g: &[f64], h: usize, w: usize, c: usize, along_cols: bool) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    for r in 0..h {
        for col in 0..w {
            let (nr, nc) = if along_cols { (r, (col + 1).min(w - 1)) } else { ((r + 1).min(h - 1), col) };
            for ch in 0..c {
                out[(r * w + col) * c + ch] = g[(nr * w + nc) * c + ch] - g[(r * w + col) * c + ch];
            }
        }
    }
    out
}

pub fn single_view_terms(image: &FeatureMap, recon: &FeatureMap) -> Result<SingleViewTerms> {
    check_shapes(image, recon)?;
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let l1 = image.data().iter().zip(recon.data()).map(|(a, b)| (a - b).abs()).sum();
    let mut second_order = 0.0;
    let mut edge_aware = 0.0;
    for along_cols in [true, false] {
        let di = forward_diff(image.data(), h, w, c, along_cols);
        let d_o = forward_diff(recon.data(), h, w, c, along_cols);
        let d2 = forward_diff(&d_o, h, w, c, along_cols);
        second_order += d2.iter().map(|x| x.abs()).sum::<f64>();
        for (gi, go) in di.chunks_exact(c).zip(d_o.chunks_exact(c)) {
            let weight = (-gi.iter().map(|x| x.abs()).sum::<f64>()).exp();
            edge_aware += weight * go.iter().map(|x| x.abs()).sum::<f64>();
        }
    }
    Ok(SingleViewTerms { l1, second_order, edge_aware })
}

/// `sum |I - O| + alpha sum |d2 O| - beta sum exp(-|d1 I|) |d1 O|`.
/// The edge-aware term enters with a negative sign, so the value can be below zero.
pub fn single_view_loss(image: &FeatureMap, recon: &FeatureMap, weights: &LossWeights) -> Result<LossTerm> {
    let terms = single_view_terms(image, recon)?;
    Ok(LossTerm::new(terms.combine(weights), image.pixels()))
}

/// `sum (D_t - D)^2` over valid target pixels.
pub fn l2_sparse_loss(pred: &DenseGrid, target: &SparseDepthMap) -> Result<LossTerm> {
    if pred.channels() != 1 || pred.height() != target.height() || pred.width() != target.width() {
        return Err(Error::Dimension(format!(
            "prediction {}x{}x{} vs target {}x{}",
            pred.height(),
            pred.width(),
            pred.channels(),
            target.height(),
            target.width()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (r, c, t) in target.iter_valid() {
        let e = t - pred.get(r, c, 0);
        sum += e * e;
        count += 1;
    }
    Ok(LossTerm::new(sum, count))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub cross: LossTerm,
    pub single: LossTerm,
    pub l2: LossTerm,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_cross: f64,
    pub l_single: f64,
    pub l_2: f64,
    pub total: f64,
    pub n_cross: usize,
    pub n_single: usize,
    pub n_l2: usize,
    pub weights: LossWeights,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "l_cross,l_single,l_2,total,n_cross,n_single,n_l2,alpha,beta,gamma,normalize";

    pub fn csv_row(&self) -> String {
        format!(
            "{:?},{:?},{:?},{:?},{},{},{},{:?},{:?},{:?},{}",
            self.l_cross,
            self.l_single,
            self.l_2,
            self.total,
            self.n_cross,
            self.n_single,
            self.n_l2,
            self.weights.alpha,
            self.weights.beta,
            self.weights.gamma,
            self.weights.normalize
        )
    }
}

/// `total = l_cross + l_single + gamma l_2`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let value = |t: &LossTerm| if weights.normalize { t.normalized() } else { t.value };
    let (l_cross, l_single, l_2) = (value(&parts.cross), value(&parts.single), value(&parts.l2));
    Ok(LossReport {
        l_cross,
        l_single,
        l_2,
        total: l_cross + l_single + weights.gamma * l_2,
        n_cross: parts.cross.count,
        n_single: parts.single.count,
        n_l2: parts.l2.count,
        weights: *weights,
    })
}

/// Central-difference gradient of `f` at `params`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Parameter(format!("finite-difference step {eps} outside (0, 1e-3]")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let hi = f(&p);
        p[i] = orig - eps;
        let lo = f(&p);
        p[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Evaluation(format!("non-finite value around coordinate {i}: {hi}, {lo}")));
        }
        grad.push((hi - lo) / (2.0 * eps));
    }
    Ok(grad)
}

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check(f: impl FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64> {
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!("{} gradient entries for {} parameters", analytic.len(), params.len())));
    }
    let numeric = numeric_gradient(f, params, eps)?;
    Ok(numeric.iter().zip(analytic).fold(0.0, |worst, (n, a)| worst.max((a - n).abs() / n.abs().max(1.0))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, c: usize, v: Vec<f64>) -> DenseGrid {
        DenseGrid::new(h, w, c, v).unwrap()
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.gamma, w.normalize), (1e-3, 1e-3, 1.0, false));
        assert!(LossWeights { gamma: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn cross_view_examples() {
        let a = grid(2, 3, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let all = Mask::filled(2, 3, true);
        assert_eq!(cross_view_loss(&a, &a, &all).unwrap().value, 0.0);
        let shifted = a.map(|x| x + 0.5).unwrap();
        let some = Mask::new(2, 3, vec![true, false, true, true, false, false]).unwrap();
        let t = cross_view_loss(&shifted, &a, &some).unwrap();
        assert_eq!((t.value, t.count, t.empty), (1.5, 3, false));
        let none = cross_view_loss(&shifted, &a, &Mask::filled(2, 3, false)).unwrap();
        assert_eq!((none.value, none.empty), (0.0, true));
        assert!(cross_view_loss(&a, &grid(3, 2, 1, vec![0.0; 6]), &all).is_err());
    }

    #[test]
    fn single_view_constant_is_zero() {
        let i = DenseGrid::filled(4, 5, 3, 0.7).unwrap();
        assert_eq!(single_view_loss(&i, &i, &LossWeights::default()).unwrap().value, 0.0);
    }

    /// Independent evaluation on a 3x3 single-channel grid, with every
    /// difference written out by index.
    fn ramp_oracle(img: &[[f64; 3]; 3], alpha: f64, beta: f64) -> f64 {
        let at = |r: usize, c: usize| img[r.min(2)][c.min(2)];
        let dx = |r: usize, c: usize| at(r, c + 1) - at(r, c);
        let dy = |r: usize, c: usize| at(r + 1, c) - at(r, c);
        let mut second = 0.0;
        let mut edge = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                let dxx = if c == 2 { 0.0 } else { dx(r, c + 1) - dx(r, c) };
                let dyy = if r == 2 { 0.0 } else { dy(r + 1, c) - dy(r, c) };
                second += dxx.abs() + dyy.abs();
                edge += (-dx(r, c).abs()).exp() * dx(r, c).abs() + (-dy(r, c).abs()).exp() * dy(r, c).abs();
            }
        }
        alpha * second - beta * edge
    }

    #[test]
    fn single_view_ramp_matches_oracle() {
        let img = [[0.0, 1.0, 4.0], [0.5, 0.5, 2.0], [3.0, 1.0, 0.0]];
        let g = grid(3, 3, 1, img.iter().flatten().copied().collect());
        let w = LossWeights { alpha: 0.3, beta: 0.2, ..LossWeights::default() };
        let got = single_view_loss(&g, &g, &w).unwrap().value;
        assert_relative_eq!(got, ramp_oracle(&img, 0.3, 0.2), max_relative = 1e-14);
        let w = LossWeights::default();
        assert_relative_eq!(
            single_view_loss(&g, &g, &w).unwrap().value,
            ramp_oracle(&img, 1e-3, 1e-3),
            max_relative = 1e-14
        );
    }

    #[test]
    fn single_view_without_regularizers_is_l1() {
        let a = grid(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let b = a.map(|x| x * x).unwrap();
        let w = LossWeights { alpha: 0.0, beta: 0.0, ..LossWeights::default() };
        let l1: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert_eq!(single_view_loss(&a, &b, &w).unwrap().value, l1);
    }

    #[test]
    fn l2_examples() {
        let target = SparseDepthMap::from_depths(1, 3, vec![5.0, 0.0, 2.0]).unwrap();
        let exact = grid(1, 3, 1, vec![5.0, 9.0, 2.0]);
        assert_eq!(l2_sparse_loss(&exact, &target).unwrap().value, 0.0);
        let one = SparseDepthMap::from_depths(1, 3, vec![0.0, 4.0, 0.0]).unwrap();
        let t = l2_sparse_loss(&grid(1, 3, 1, vec![0.0, 7.0, 0.0]), &one).unwrap();
        assert_eq!((t.value, t.count), (9.0, 1));
        let t = l2_sparse_loss(&exact, &SparseDepthMap::empty(1, 3)).unwrap();
        assert_eq!((t.value, t.empty), (0.0, true));
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        let parts =
            LossParts { cross: LossTerm::new(1.0, 4), single: LossTerm::new(2.0, 4), l2: LossTerm::new(3.0, 2) };
        let r = total_loss(&parts, &w).unwrap();
        assert_eq!(r.total, 6.0);
        assert_eq!(r.weights, w);
        assert_eq!(total_loss(&parts, &LossWeights { gamma: 0.0, ..w }).unwrap().total, 3.0);
        let zero = LossParts { cross: LossTerm::zero(), single: LossTerm::zero(), l2: LossTerm::zero() };
        assert_eq!(total_loss(&zero, &w).unwrap().total, 0.0);
        let n = total_loss(&parts, &LossWeights { normalize: true, ..w }).unwrap();
        assert_eq!((n.l_cross, n.l_single, n.l_2, n.total), (0.25, 0.5, 1.5, 2.25));
        assert!(r.csv_row().split(',').count() == LossReport::CSV_HEADER.split(',').count());
    }

    #[test]
    fn finite_differences() {
        let err = finite_diff_check(|p| p[0] * p[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-8);
        let x = [0.3, -1.2, 2.5, 0.0];
        let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(finite_diff_check(|p| p.iter().map(|v| v * v).sum(), &x, &grad, 1e-4).unwrap() < 1e-8);
        // A wrong gradient is detected.
        assert!(finite_diff_check(|p| p[0] * p[0], &[3.0], &[5.0], 1e-5).unwrap() > 0.1);
        assert!(matches!(finite_diff_check(|p| p[0], &[1.0], &[1.0], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(finite_diff_check(|p| p[0], &[1.0], &[1.0], 1e-2), Err(Error::Parameter(_))));
        assert!(matches!(finite_diff_check(|p| p[0].ln(), &[0.0], &[1.0], 1e-4), Err(Error::Evaluation(_))));
    }

    proptest! {
        #[test]
        fn additivity(a in -1e6f64..1e6, b in -1e6f64..1e6, c in 0f64..1e6, gamma in 0f64..10.0) {
            let parts = LossParts { cross: LossTerm::new(a.abs(), 1), single: LossTerm::new(b, 1), l2: LossTerm::new(c, 1) };
            let r = total_loss(&parts, &LossWeights { gamma, ..LossWeights::default() }).unwrap();
            prop_assert!((r.total - (r.l_cross + r.l_single + gamma * r.l_2)).abs() <= 1e-12 * r.total.abs().max(1.0));
        }

        #[test]
        fn permutation_invariance(
            vals in prop::collection::vec((0.1f64..10.0, 0.1f64..10.0, any::<bool>()), 12),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..12).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let build = |order: &[usize]| {
                let a = grid(3, 4, 1, order.iter().map(|&i| vals[i].0).collect());
                let b = grid(3, 4, 1, order.iter().map(|&i| vals[i].1).collect());
                let m = Mask::new(3, 4, order.iter().map(|&i| vals[i].2).collect()).unwrap();
                let t = SparseDepthMap::from_dense_masked(&b, &m).unwrap();
                (cross_view_loss(&a, &b, &m).unwrap().value, l2_sparse_loss(&a, &t).unwrap().value)
            };
            let id: Vec<usize> = (0..12).collect();
            let (c0, l0) = build(&id);
            let (c1, l1) = build(&perm);
            prop_assert!((c0 - c1).abs() <= 1e-12 * c0.max(1.0));
            prop_assert!((l0 - l1).abs() <= 1e-12 * l0.max(1.0));
        }

        #[test]
        fn sum_terms_nonnegative(a in prop::collection::vec(-5f64..5.0, 12), b in prop::collection::vec(-5f64..5.0, 12)) {
            let (a, b) = (grid(2, 3, 2, a), grid(2, 3, 2, b));
            let t = single_view_terms(&a, &b).unwrap();
            prop_assert!(t.l1 >= 0.0 && t.second_order >= 0.0 && t.edge_aware >= 0.0);
            prop_assert!(cross_view_loss(&a, &b, &Mask::filled(2, 3, true)).unwrap().value >= 0.0);
        }
    }
}
