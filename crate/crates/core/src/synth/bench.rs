use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::attention::{forward, AttentionInputs, AttentionParams, Variant};
use crate::error::{Error, Result};
use crate::grid::{DenseGrid, Mask};
use crate::synth::scene::{rng_for, streams};

/// Fraction of query pixels marked valid in the benchmark inputs.
const BENCH_DENSITY: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<(usize, usize)>,
    pub channels: usize,
    pub repetitions: usize,
    pub variants: Vec<Variant>,
    pub seed: u64,
    /// Skip wall-clock timing; only flop counts and output checksums are produced.
    pub timing: bool,
    /// Calls shorter than this are looped and averaged within one repetition.
    pub min_rep_time: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![(32, 32), (64, 64), (128, 128)],
            channels: 8,
            repetitions: 5,
            variants: Variant::ALL.to_vec(),
            seed: 0,
            timing: true,
            min_rep_time: Duration::from_millis(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Seconds per call, one entry per repetition. Empty without timing.
    pub times: Vec<f64>,
    pub flop_estimate: u64,
    /// Sum of the attention output, a deterministic fingerprint of the run.
    pub output_sum: f64,
}

impl BenchRow {
    pub fn median(&self) -> Option<f64> {
        median(&self.times)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub variant: Variant,
    /// Slope of `log(median time)` against `log(HW)`; `None` without timing.
    pub time_slope: Option<f64>,
    pub flop_slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<SlopeFit>,
    /// All outputs finite, and DSA/FDSA shapes agree on the smallest size.
    pub sanity: bool,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Parameter(format!("slope fit needs two or more points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Parameter("slope fit needs distinct sizes".into()));
    }
    Ok(sxy / sxx)
}

struct Inputs {
    query: DenseGrid,
    reference: DenseGrid,
    mask: Mask,
    params: AttentionParams,
}

fn make_inputs(h: usize, w: usize, c: usize, seed: u64) -> Result<Inputs> {
    let mut rng = rng_for(seed, streams::ATTENTION);
    let mask = Mask::from_fn(h, w, |_, _| rng.random_bool(BENCH_DENSITY));
    let query = DenseGrid::from_fn(h, w, c, |r, col, _| {
        let v: f64 = rng.random_range(-1.0..1.0);
        if mask.get(r, col) {
            v
        } else {
            0.0
        }
    })?;
    let reference = DenseGrid::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))?;
    let params = AttentionParams::random(c, &mut rng);
    Ok(Inputs { query, reference, mask, params })
}

fn run_once(variant: Variant, inputs: &Inputs) -> Result<DenseGrid> {
    let pair = AttentionInputs::pair(&inputs.query, &inputs.reference);
    let pair = if variant == Variant::Fdsa { pair.with_mask(&inputs.mask) } else { pair };
    let input = if variant == Variant::Ca { AttentionInputs { reference: None, ..pair } } else { pair };
    Ok(forward(variant, &input, &inputs.params, false)?.updated)
}

/// Seconds per call for one repetition, looping short calls.
fn time_call(variant: Variant, inputs: &Inputs, iters: usize) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(run_once(variant, inputs)?);
    }
    Ok(start.elapsed().as_secs_f64() / iters as f64)
}

/// Times every variant at every size (single-threaded) and fits log-log slopes.
pub fn bench_attention(config: &BenchConfig) -> Result<BenchResult> {
    if config.sizes.len() < 2 {
        return Err(Error::Parameter("benchmark needs at least two sizes".into()));
    }
    if config.repetitions == 0 || config.channels == 0 || config.variants.is_empty() {
        return Err(Error::Parameter("repetitions, channels and variants must be non-empty".into()));
    }
    let mut rows = Vec::new();
    let mut sanity = true;
    for &(h, w) in &config.sizes {
        if h == 0 || w == 0 {
            return Err(Error::Parameter(format!("size {h}x{w} is empty")));
        }
        let inputs = make_inputs(h, w, config.channels, config.seed)?;
        for &variant in &config.variants {
            let start = Instant::now();
            let out = run_once(variant, &inputs)?;
            let first = start.elapsed().as_secs_f64();
            sanity &= out.data().iter().all(|v| v.is_finite()) && out.same_shape(&inputs.query);
            let mut times = Vec::new();
            if config.timing {
                let min = config.min_rep_time.as_secs_f64();
                if first >= min {
                    // A slow first call already is a valid repetition.
                    times.push(first);
                    for _ in 1..config.repetitions {
                        times.push(time_call(variant, &inputs, 1)?);
                    }
                } else {
                    let iters = (min / first.max(1e-9)).ceil() as usize;
                    for _ in 0..config.repetitions {
                        times.push(time_call(variant, &inputs, iters)?);
                    }
                }
            }
            rows.push(BenchRow {
                variant,
                height: h,
                width: w,
                channels: config.channels,
                times,
                flop_estimate: variant.flop_estimate(h, w, config.channels),
                output_sum: out.data().iter().sum(),
            });
        }
    }
    let mut slopes = Vec::new();
    for &variant in &config.variants {
        let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.variant == variant).collect();
        // Base 2 keeps power-of-two sizes exact, so analytic slopes come out exact.
        let x: Vec<f64> = mine.iter().map(|r| ((r.height * r.width) as f64).log2()).collect();
        let flops: Vec<f64> = mine.iter().map(|r| (r.flop_estimate as f64).log2()).collect();
        let time_slope = if config.timing {
            let t: Vec<f64> = mine.iter().map(|r| r.median().expect("timed").log2()).collect();
            Some(fit_slope(&x, &t)?)
        } else {
            None
        };
        slopes.push(SlopeFit { variant, time_slope, flop_slope: fit_slope(&x, &flops)? });
    }
    Ok(BenchResult { rows, slopes, sanity })
}

impl BenchResult {
    pub const CSV_HEADER: &'static str =
        "record,variant,height,width,channels,median_s,times_s,flop_estimate,output_sum";

    /// One `run` row per (size, variant), then one `slope` row per variant
    /// carrying the time slope in `median_s` and the flop slope in `flop_estimate`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", Self::CSV_HEADER);
        for r in &self.rows {
            let median = r.median().map(|m| format!("{m:?}")).unwrap_or_default();
            let times: Vec<String> = r.times.iter().map(|t| format!("{t:?}")).collect();
            let _ = writeln!(
                out,
                "run,{},{},{},{},{},{},{},{:?}",
                r.variant,
                r.height,
                r.width,
                r.channels,
                median,
                times.join(";"),
                r.flop_estimate,
                r.output_sum
            );
        }
        for s in &self.slopes {
            let time = s.time_slope.map(|t| format!("{t:?}")).unwrap_or_default();
            let _ = writeln!(out, "slope,{},,,,{time},,{:?},", s.variant, s.flop_slope);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_and_median() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        assert!((fit_slope(&x, &y).unwrap() - 2.0).abs() < 1e-15);
        assert!(fit_slope(&[1.0], &[1.0]).is_err());
        assert!(fit_slope(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn flop_slopes_are_exact() {
        let cfg = BenchConfig { sizes: vec![(4, 4), (8, 8), (16, 16)], timing: false, ..BenchConfig::default() };
        let res = bench_attention(&cfg).unwrap();
        assert!(res.sanity);
        assert_eq!(res.rows.len(), 9);
        for s in &res.slopes {
            let want = if s.variant == Variant::Fdsa { 1.0 } else { 2.0 };
            assert_eq!(s.flop_slope, want, "{:?}", s);
            assert_eq!(s.time_slope, None);
        }
        assert_eq!(res.to_csv(), bench_attention(&cfg).unwrap().to_csv());
    }

    #[test]
    fn timed_run_has_all_repetitions() {
        let cfg = BenchConfig {
            sizes: vec![(4, 4), (8, 8)],
            repetitions: 3,
            min_rep_time: Duration::from_micros(200),
            ..BenchConfig::default()
        };
        let res = bench_attention(&cfg).unwrap();
        assert!(res.rows.iter().all(|r| r.times.len() == 3 && r.times.iter().all(|t| *t > 0.0)));
        assert!(res.slopes.iter().all(|s| s.time_slope.is_some_and(f64::is_finite)));
        let csv = res.to_csv();
        assert_eq!(csv.lines().count(), 1 + 6 + 3);
    }
}
