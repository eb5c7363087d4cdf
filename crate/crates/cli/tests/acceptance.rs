//! Acceptance suite. Runs every criterion in sequence (timing-sensitive
//! checks must not share the CPU with other tests), prints one PASS/FAIL
//! line each, and exits non-zero if any fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use depthcomp::attention::{attention_backward, forward, AttentionInputs, AttentionParams, Variant};
use depthcomp::densify::{density, dilate, DilationKernel, KernelShape};
use depthcomp::dscl::{compose_depth, optimal_scale, rescale_check, Region, RelativeDepth, ScaleField};
use depthcomp::geometry::{backproject, project, warp_map, warp_pixel, CameraIntrinsics, Pixel2, RigidTransform};
use depthcomp::grid::{read_kitti_png, write_kitti_png, DenseGrid, Mask, SparseDepthMap};
use depthcomp::loss::{
    cross_view_loss, finite_diff_check, l2_sparse_loss, single_view_loss, total_loss, LossParts, LossTerm, LossWeights,
};
use depthcomp::metrics::evaluate;
use depthcomp::synth::{
    bench_attention, gen_scene, rng_for, sample_sparse, train_toy, BenchConfig, Init, Layout, Objective, SampleMode,
    SceneSpec, TrainConfig, TrainMode,
};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {:.2} s, limit {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()))
}

fn random_grid(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> DenseGrid {
    DenseGrid::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
}

fn random_intrinsics(rng: &mut impl Rng, h: usize, w: usize) -> CameraIntrinsics {
    CameraIntrinsics::new(
        rng.random_range(50.0..2000.0),
        rng.random_range(50.0..2000.0),
        rng.random_range(0.0..w as f64),
        rng.random_range(0.0..h as f64),
    )
    .unwrap()
}

fn geometry_inverse_pair() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_for(1, 100);
    let mut worst: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    for _ in 0..10_000 {
        let intr = random_intrinsics(&mut rng, 480, 640);
        let q = Pixel2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        let d = rng.random_range(0.1..100.0);
        let back = project(backproject(q, d, &intr).unwrap(), &intr).unwrap();
        worst = worst.max((back.u - q.u).abs()).max((back.v - q.v).abs());
        let same = warp_pixel(q, d, &RigidTransform::identity(), &intr).unwrap();
        worst_identity = worst_identity.max((same.u - q.u).abs()).max((same.v - q.v).abs());
    }
    ensure(worst < 1e-9, || format!("project(backproject(q)) off by {worst:e}"))?;
    ensure(worst_identity < 1e-9, || format!("identity warp_pixel off by {worst_identity:e}"))?;

    let mut worst_map: f64 = 0.0;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(2..24), rng.random_range(2..24));
        let src = random_grid(&mut rng, h, w, 3);
        let depth = DenseGrid::from_fn(h, w, 1, |_, _, _| rng.random_range(0.5..80.0)).unwrap();
        let intr = random_intrinsics(&mut rng, h, w);
        let (warped, mask) = warp_map(&src, &depth, &RigidTransform::identity(), &intr).unwrap();
        ensure(mask.count() == h * w, || format!("identity warp_map dropped {} pixels", h * w - mask.count()))?;
        worst_map = worst_map.max(warped.max_abs_diff(&src));
    }
    ensure(worst_map < 1e-9, || format!("identity warp_map off by {worst_map:e}"))?;
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("max |err| {:e} (pair), {:e} (identity warp)", worst, worst_map.max(worst_identity)))
}

fn rescale_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_for(2, 100);
    let grid: Vec<f64> = (0..=2000).map(|i| 10f64.powf(-2.0 + 4.0 * i as f64 / 2000.0)).collect();
    let mut worst_margin = f64::INFINITY;
    let mut worst_scan = f64::INFINITY;
    let mut done = 0;
    while done < 1000 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let pred = DenseGrid::from_fn(h, w, 1, |_, _, _| rng.random_range(0.1..10.0)).unwrap();
        let density = rng.random_range(0.05..1.0);
        let keep = Mask::from_fn(h, w, |_, _| rng.random_bool(density));
        let truth = DenseGrid::from_fn(h, w, 1, |_, _, _| rng.random_range(1.0..80.0)).unwrap();
        let target = SparseDepthMap::from_dense_masked(&truth, &keep).unwrap();
        let region = if h % 2 == 0 && w % 2 == 0 && rng.random_bool(0.5) {
            Some(Region::new(2, 2, rng.random_range(0..2), rng.random_range(0..2)).unwrap())
        } else {
            None
        };
        let check = match rescale_check(&pred, &target, region) {
            Ok(check) => check,
            Err(depthcomp::Error::NoSupport) => continue,
            Err(e) => return Err(e.to_string()),
        };
        done += 1;
        worst_margin = worst_margin.min(check.loss_before - check.loss_after);

        let support: Vec<(f64, f64)> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|&(r, c)| match region {
                None => true,
                Some(g) => r * 2 / h == g.row && c * 2 / w == g.col,
            })
            .filter_map(|(r, c)| target.get(r, c).map(|t| (t, pred.get(r, c, 0))))
            .collect();
        let loss = |a: f64| support.iter().map(|(t, d)| (t - a * d) * (t - a * d)).sum::<f64>();
        let best = grid.iter().map(|&a| loss(a)).fold(f64::INFINITY, f64::min);
        let at_optimum = loss(check.alpha);
        worst_scan = worst_scan.min(best - at_optimum + 1e-12 * (1.0 + best));

        let exact = SparseDepthMap::from_dense_masked(&pred, &keep).unwrap();
        if let Ok(alpha) = optimal_scale(&pred, &exact, region) {
            ensure(alpha == 1.0, || format!("alpha = {alpha:?} for an exact prediction"))?;
        }
    }
    ensure(worst_margin >= -1e-9, || format!("rescaling increased the loss by {:e}", -worst_margin))?;
    ensure(worst_scan >= 0.0, || format!("grid scan beat the closed form by {:e}", -worst_scan))?;
    within(start.elapsed(), Duration::from_secs(5))?;
    Ok(format!("min loss decrease {worst_margin:e}, 1000 instances, 2001-point scan"))
}

/// `x + softmax(x Wq (y Wk)^T / sqrt C) (y Wv)`, pixel by pixel.
fn attention_oracle(x: &DenseGrid, y: &DenseGrid, p: &AttentionParams) -> Vec<f64> {
    let (n, c) = (x.pixels(), x.channels());
    let proj = |g: &DenseGrid, m: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let row = g.pixel(i / g.width(), i % g.width());
                (0..c).map(|j| (0..c).map(|k| row[k] * m(k, j)).sum()).collect()
            })
            .collect()
    };
    let q = proj(x, &|k, j| p.wq[(k, j)]);
    let k = proj(y, &|k, j| p.wk[(k, j)]);
    let v = proj(y, &|k, j| p.wv[(k, j)]);
    let temp = (c as f64).sqrt();
    let mut out = x.data().to_vec();
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| (0..c).map(|t| q[i][t] * k[j][t]).sum::<f64>() / temp).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for ch in 0..c {
            out[i * c + ch] += (0..n).map(|j| e[j] / z * v[j][ch]).sum::<f64>();
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn attention_oracle_equivalence() -> Outcome {
    let mut rng = rng_for(3, 100);
    let (mut worst_dsa, mut worst_ca): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let (h, w, c) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=4));
        let x = random_grid(&mut rng, h, w, c);
        let y = random_grid(&mut rng, h, w, c);
        let params = AttentionParams::random(c, &mut rng);

        let dsa = forward(Variant::Dsa, &AttentionInputs::pair(&x, &y), &params, false).unwrap();
        worst_dsa = worst_dsa.max(max_diff(dsa.updated.data(), &attention_oracle(&x, &y, &params)));

        let sum = x.add(&y).unwrap();
        let ca = forward(Variant::Ca, &AttentionInputs::pair(&x, &y), &params, false).unwrap();
        worst_ca = worst_ca.max(max_diff(ca.updated.data(), &attention_oracle(&sum, &sum, &params)));
        let single = forward(Variant::Ca, &AttentionInputs::single(&x), &params, false).unwrap();
        worst_ca = worst_ca.max(max_diff(single.updated.data(), &attention_oracle(&x, &x, &params)));
    }
    ensure(worst_dsa < 1e-12, || format!("DSA differs from the oracle by {worst_dsa:e}"))?;
    ensure(worst_ca < 1e-12, || format!("CA differs from the oracle by {worst_ca:e}"))?;
    Ok(format!("max |err| DSA {worst_dsa:e}, CA {worst_ca:e}, 100 instances up to 8x8x4"))
}

/// Flat layout: query, reference, wq, wk, wv.
fn unpack(flat: &[f64], h: usize, w: usize, c: usize) -> (DenseGrid, DenseGrid, AttentionParams) {
    let n = h * w * c;
    let q = DenseGrid::new(h, w, c, flat[..n].to_vec()).unwrap();
    let r = DenseGrid::new(h, w, c, flat[n..2 * n].to_vec()).unwrap();
    let mut p = AttentionParams::identity(c);
    let mut at = 2 * n;
    for m in [&mut p.wq, &mut p.wk, &mut p.wv] {
        m.as_slice_mut().unwrap().copy_from_slice(&flat[at..at + c * c]);
        at += c * c;
    }
    (q, r, p)
}

fn grad_inputs<'a>(
    variant: Variant,
    query: &'a DenseGrid,
    reference: Option<&'a DenseGrid>,
    mask: &'a Mask,
) -> AttentionInputs<'a> {
    let mask = (variant == Variant::Fdsa).then_some(mask);
    AttentionInputs { query, reference, mask }
}

fn attention_gradient_error(variant: Variant, rng: &mut impl Rng) -> f64 {
    let (h, w, c) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3));
    let q = random_grid(rng, h, w, c);
    let r = random_grid(rng, h, w, c);
    let p = AttentionParams::random(c, rng);
    let mask = Mask::from_fn(h, w, |_, _| rng.random_bool(0.5));
    let upstream = random_grid(rng, h, w, c);
    let with_reference = variant != Variant::Ca || rng.random_bool(0.5);

    let mut flat: Vec<f64> = q.data().iter().chain(r.data()).copied().collect();
    for m in [&p.wq, &p.wk, &p.wv] {
        flat.extend(m.iter());
    }
    let value = |flat: &[f64]| -> f64 {
        let (q, r, p) = unpack(flat, h, w, c);
        let i = grad_inputs(variant, &q, with_reference.then_some(&r), &mask);
        let out = forward(variant, &i, &p, false).unwrap();
        out.updated.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
    };
    let i = grad_inputs(variant, &q, with_reference.then_some(&r), &mask);
    let g = attention_backward(variant, &i, &p, &upstream).unwrap();
    let mut analytic: Vec<f64> = g.query.data().to_vec();
    match &g.reference {
        Some(gr) => analytic.extend(gr.data()),
        None => analytic.extend(std::iter::repeat_n(0.0, h * w * c)),
    }
    for m in [&g.wq, &g.wk, &g.wv] {
        analytic.extend(m.iter());
    }
    finite_diff_check(value, &flat, &analytic, 1e-5).unwrap()
}

fn gradient_checks() -> Outcome {
    let mut rng = rng_for(4, 100);
    let mut report = Vec::new();
    for variant in Variant::ALL {
        let worst = (0..50).map(|_| attention_gradient_error(variant, &mut rng)).fold(0.0, f64::max);
        ensure(worst < 1e-4, || format!("{variant} gradient error {worst:e}"))?;
        report.push(format!("{variant} {worst:.1e}"));
    }
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let (h, w) = (2 * rng.random_range(2..=5), 2 * rng.random_range(2..=5));
        let scene = gen_scene(&SceneSpec::new(h, w, Layout::Boxes, 1000 + i).unwrap()).unwrap();
        let sparse = sample_sparse(&scene.depth, SampleMode::Fraction(0.3), 1000 + i).unwrap();
        for mode in [TrainMode::Direct, TrainMode::Dscl] {
            let cfg = TrainConfig {
                mode,
                scale_regions: (2, 2),
                smoothness_weight: rng.random_range(0.0..1.0),
                ..TrainConfig::default()
            };
            let obj = Objective::new(&cfg, &sparse).unwrap();
            let mut p = obj.init(Init::Neutral).unwrap();
            p.iter_mut().for_each(|v| *v += rng.random_range(-1.5..1.5));
            let analytic = obj.gradient(&p).unwrap();
            let err = finite_diff_check(|x| obj.value(x).unwrap().total, &p, &analytic, 1e-5).unwrap();
            worst = worst.max(err);
        }
    }
    ensure(worst < 1e-4, || format!("trainer objective gradient error {worst:e}"))?;
    report.push(format!("objective {worst:.1e}"));
    Ok(format!("max rel err {}, 50 instances each", report.join(", ")))
}

fn complexity_slopes() -> Outcome {
    let start = Instant::now();
    let sizes: Vec<(usize, usize)> = [32, 64, 128, 256].iter().map(|&s| (s, s)).collect();
    let x: Vec<f64> = sizes.iter().map(|&(h, w)| ((h * w) as f64).log2()).collect();
    for (variant, want) in [(Variant::Ca, 2.0), (Variant::Dsa, 2.0), (Variant::Fdsa, 1.0)] {
        let y: Vec<f64> = sizes.iter().map(|&(h, w)| (variant.flop_estimate(h, w, 8) as f64).log2()).collect();
        let slope = depthcomp::synth::fit_slope(&x, &y).unwrap();
        ensure(slope == want, || format!("{variant} flop slope {slope:?}, want {want}"))?;
    }
    let cfg = BenchConfig {
        sizes,
        channels: 8,
        repetitions: 5,
        variants: vec![Variant::Dsa, Variant::Fdsa],
        seed: 5,
        timing: true,
        ..BenchConfig::default()
    };
    let res = bench_attention(&cfg).unwrap();
    ensure(res.sanity, || "non-finite benchmark output".into())?;
    let mut parts = Vec::new();
    for s in &res.slopes {
        let t = s.time_slope.unwrap();
        let (lo, hi) = if s.variant == Variant::Fdsa { (0.7, 1.3) } else { (1.7, 2.3) };
        ensure(s.flop_slope == if s.variant == Variant::Fdsa { 1.0 } else { 2.0 }, || {
            format!("{} flop slope {:?}", s.variant, s.flop_slope)
        })?;
        ensure((lo..=hi).contains(&t), || format!("{} wall-time slope {t:.3} outside [{lo}, {hi}]", s.variant))?;
        parts.push(format!("{} {t:.3}", s.variant));
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!("wall-time slopes {} ({:.0} s)", parts.join(", "), start.elapsed().as_secs_f64()))
}

fn brute_dilate(map: &SparseDepthMap, shape: KernelShape, size: usize) -> SparseDepthMap {
    let (h, w) = (map.height() as i64, map.width() as i64);
    let r = (size / 2) as i64;
    let mut depth = map.depths().to_vec();
    let mut valid = map.validity().to_vec();
    for y in 0..h {
        for x in 0..w {
            if map.is_valid(y as usize, x as usize) {
                continue;
            }
            let mut best: Option<f64> = None;
            for yy in 0..h {
                for xx in 0..w {
                    let (dy, dx) = ((yy - y).abs(), (xx - x).abs());
                    let inside = dy.max(dx) <= r && (shape == KernelShape::Square || dy == 0 || dx == 0);
                    if let (true, Some(d)) = (inside, map.get(yy as usize, xx as usize)) {
                        best = Some(best.map_or(d, |b: f64| b.min(d)));
                    }
                }
            }
            if let Some(d) = best {
                depth[(y * w + x) as usize] = d;
                valid[(y * w + x) as usize] = true;
            }
        }
    }
    SparseDepthMap::new(map.height(), map.width(), depth, valid).unwrap()
}

fn dilation_oracle() -> Outcome {
    let mut rng = rng_for(6, 100);
    for case in 0..200 {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let fill = rng.random_range(0.0..0.3);
        let depth: Vec<f64> =
            (0..h * w).map(|_| if rng.random_bool(fill) { rng.random_range(0.5..80.0) } else { 0.0 }).collect();
        let map = SparseDepthMap::from_depths(h, w, depth).unwrap();
        for size in [3, 5, 7] {
            let cross = dilate(&map, &DilationKernel::new(KernelShape::Cross, size).unwrap());
            let square = dilate(&map, &DilationKernel::new(KernelShape::Square, size).unwrap());
            ensure(cross == brute_dilate(&map, KernelShape::Cross, size), || format!("cross{size} case {case}"))?;
            ensure(square == brute_dilate(&map, KernelShape::Square, size), || format!("square{size} case {case}"))?;
            let subset = cross.validity().iter().zip(square.validity()).all(|(c, s)| !c || *s);
            ensure(subset, || format!("cross{size} not within square{size}, case {case}"))?;
            for out in [&cross, &square] {
                ensure(density(out) >= density(&map), || format!("density decreased, case {case}"))?;
            }
        }
    }
    Ok("200 maps x 6 kernels match the brute-force scan".into())
}

fn dscl_beats_direct() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..10u64 {
        let scene = gen_scene(&SceneSpec::new(128, 128, Layout::Boxes, seed).unwrap()).unwrap();
        let sparse = sample_sparse(&scene.depth, SampleMode::Fraction(0.05), seed).unwrap();
        let run = |mode| {
            let cfg = TrainConfig { mode, steps: 500, seed, ..TrainConfig::default() };
            train_toy(&scene.depth, &sparse, &cfg, Init::Neutral).unwrap().eval.rmse_mm
        };
        let (direct, dscl) = (run(TrainMode::Direct), run(TrainMode::Dscl));
        if dscl < direct {
            wins += 1;
        }
        rows.push(format!("{direct:.0}/{dscl:.0}"));
    }
    ensure(wins >= 8, || format!("dscl won {wins}/10 (direct/dscl rmse mm: {})", rows.join(" ")))?;
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!("dscl lower rmse on {wins}/10 seeds ({:.0} s)", start.elapsed().as_secs_f64()))
}

fn per_pixel_scale_unidentifiable() -> Outcome {
    let mut rng = rng_for(8, 100);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..16), rng.random_range(1..16));
        let rel = DenseGrid::from_fn(h, w, 1, |_, _, _| rng.random_range(0.01..1.0)).unwrap();
        let scale = ScaleField::new(h, w, (0..h * w).map(|_| rng.random_range(1.0..80.0)).collect()).unwrap();
        let halved = RelativeDepth::new(rel.map(|v| v / 2.0).unwrap()).unwrap();
        let doubled = ScaleField::new(h, w, scale.values().iter().map(|s| 2.0 * s).collect()).unwrap();
        let a = compose_depth(&RelativeDepth::new(rel).unwrap(), &scale).unwrap();
        let b = compose_depth(&halved, &doubled).unwrap();
        let truth = DenseGrid::from_fn(h, w, 1, |_, _, _| rng.random_range(1.0..80.0)).unwrap();
        let keep = Mask::from_fn(h, w, |_, _| rng.random_bool(0.5));
        let target = SparseDepthMap::from_dense_masked(&truth, &keep).unwrap();
        let (la, lb) = (l2_sparse_loss(&a, &target).unwrap(), l2_sparse_loss(&b, &target).unwrap());
        ensure(la == lb, || format!("losses differ: {la:?} vs {lb:?}"))?;
        ensure(scale != doubled, || "factorizations are not distinct".into())?;
    }
    Ok("(s, d) and (2s, d/2) give identical loss on 100 per-pixel instances".into())
}

fn loss_fixed_points() -> Outcome {
    let mut rng = rng_for(9, 100);
    let defaults = LossWeights::default();
    ensure(defaults.alpha == 1e-3 && defaults.beta == 1e-3 && defaults.gamma == 1.0, || format!("{defaults:?}"))?;
    for _ in 0..100 {
        let (h, w, c) = (rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..4));
        let frame = random_grid(&mut rng, h, w, c);
        let cross = cross_view_loss(&frame, &frame, &Mask::filled(h, w, true)).unwrap();
        ensure(cross.value == 0.0, || format!("cross-view loss {} on identical frames", cross.value))?;
        let constant = DenseGrid::filled(h, w, c, rng.random_range(0.0..1.0)).unwrap();
        let single = single_view_loss(&constant, &constant, &defaults).unwrap();
        ensure(single.value == 0.0, || format!("single-view loss {} on constant frames", single.value))?;

        let weights = LossWeights {
            alpha: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.0..1.0),
            gamma: rng.random_range(0.0..10.0),
            normalize: rng.random_bool(0.5),
        };
        let parts = LossParts {
            cross: LossTerm::new(rng.random_range(0.0..100.0), rng.random_range(1..1000)),
            single: LossTerm::new(rng.random_range(-10.0..100.0), rng.random_range(1..1000)),
            l2: LossTerm::new(rng.random_range(0.0..1e4), rng.random_range(1..1000)),
        };
        let report = total_loss(&parts, &weights).unwrap();
        let sum = report.l_cross + report.l_single + weights.gamma * report.l_2;
        ensure((report.total - sum).abs() <= 1e-12 * sum.abs().max(1.0), || {
            format!("total {} vs {sum}", report.total)
        })?;
        ensure(report.weights == weights, || "weights not echoed in the report".into())?;
        let row = report.csv_row();
        let echoed = row.split(',').skip(7).collect::<Vec<_>>().join(",");
        let want = format!("{:?},{:?},{:?},{}", weights.alpha, weights.beta, weights.gamma, weights.normalize);
        ensure(echoed == want, || format!("csv echoes '{echoed}', want '{want}'"))?;
    }
    Ok("zero on identical frames, additive, default weights 1e-3/1e-3/1 echoed".into())
}

fn metrics_and_codec() -> Outcome {
    let mut rng = rng_for(10, 100);
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
        let depth: Vec<f64> = (0..h * w)
            .map(|_| if rng.random_bool(0.7) { rng.random_range(1..=u16::MAX) as f64 / 256.0 } else { 0.0 })
            .collect();
        let map = SparseDepthMap::from_depths(h, w, depth).unwrap();
        let back = read_kitti_png(&write_kitti_png(&map).unwrap()).unwrap();
        ensure(back == map, || format!("png roundtrip changed a {h}x{w} map"))?;
    }

    let gt = SparseDepthMap::from_dense(&DenseGrid::filled(4, 5, 1, 10.0).unwrap()).unwrap();
    let r = evaluate(&DenseGrid::filled(4, 5, 1, 11.0).unwrap(), &gt).unwrap();
    ensure(r.rmse_mm == 1000.0 && r.mae_mm == 1000.0, || format!("1 m fixture gave {r:?}"))?;
    let gt = SparseDepthMap::from_depths(1, 1, vec![2.0]).unwrap();
    let r = evaluate(&DenseGrid::filled(1, 1, 1, 4.0).unwrap(), &gt).unwrap();
    ensure(r.imae_per_km == 250.0, || format!("2 m -> 4 m fixture gave imae {}", r.imae_per_km))?;

    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..16), rng.random_range(1..16));
        let truth = DenseGrid::from_fn(h, w, 1, |_, _, _| rng.random_range(0.5..80.0)).unwrap();
        let mut keep = Mask::from_fn(h, w, |_, _| rng.random_bool(0.5)).data().to_vec();
        keep[0] = true;
        let gt = SparseDepthMap::from_dense_masked(&truth, &Mask::new(h, w, keep).unwrap()).unwrap();
        let pred = DenseGrid::from_fn(h, w, 1, |_, _, _| rng.random_range(0.5..80.0)).unwrap();
        let r = evaluate(&pred, &gt).unwrap();
        ensure(r.rmse_mm >= r.mae_mm, || format!("rmse {} < mae {}", r.rmse_mm, r.mae_mm))?;
        ensure(r.irmse_per_km >= r.imae_per_km, || format!("irmse {} < imae {}", r.irmse_per_km, r.imae_per_km))?;
    }
    Ok("png roundtrip exact, fixtures 1000 mm and 250 /km, rmse >= mae on 1000 cases".into())
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_depthcomp")).args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
}

/// File name to contents, for every file directly in `dir`.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

/// Drops the wall-clock columns of a timed bench CSV.
fn without_timing(csv: &[u8]) -> String {
    String::from_utf8_lossy(csv)
        .lines()
        .skip(1)
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            if f.len() > 6 {
                f[5] = "";
                f[6] = "";
            }
            f.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn end_to_end_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for k in 0..2 {
        let dir = tmp.path().join(format!("run{k}"));
        std::fs::create_dir_all(&dir).unwrap();
        let d = dir.to_str().unwrap();
        run_cli(&["train-toy", "--mode", "both", "--size", "48x48", "--steps", "100", "--seed", "11", "--out", d])?;
        let bench = dir.join("bench.csv");
        let b = bench.to_str().unwrap();
        run_cli(&["bench", "--sizes", "16x16,32x32,64x64", "--seed", "11", "--no-timing", "--out", b])?;
        let timed = tmp.path().join(format!("timed{k}.csv"));
        let t = timed.to_str().unwrap();
        run_cli(&["bench", "--sizes", "8x8,16x16,32x32", "--seed", "11", "--reps", "3", "--out", t])?;
        runs.push((snapshot(&dir), without_timing(&std::fs::read(&timed).unwrap())));
    }
    let (first, second) = (&runs[0], &runs[1]);
    ensure(first.0.len() == 7, || format!("expected 7 output files, got {}", first.0.len()))?;
    for ((name, a), (_, b)) in first.0.iter().zip(&second.0) {
        // The echo line carries the output path, which differs between the two runs.
        let body = |bytes: &[u8]| -> Vec<u8> {
            if name.ends_with(".csv") {
                let text = String::from_utf8_lossy(bytes);
                text.split_once('\n').map(|(_, rest)| rest.as_bytes().to_vec()).unwrap_or_default()
            } else {
                bytes.to_vec()
            }
        };
        ensure(body(a) == body(b), || format!("{name} differs between runs"))?;
    }
    ensure(first.1 == second.1, || "timed bench CSVs differ outside the timing columns".into())?;
    Ok(format!("{} files byte-identical across two runs", first.0.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("geometry inverse pair", geometry_inverse_pair),
        ("closed-form rescaling", rescale_optimality),
        ("attention oracle equivalence", attention_oracle_equivalence),
        ("gradient checks", gradient_checks),
        ("complexity slopes", complexity_slopes),
        ("dilation oracle", dilation_oracle),
        ("dscl vs direct toy", dscl_beats_direct),
        ("per-pixel scale unidentifiability", per_pixel_scale_unidentifiable),
        ("loss fixed points", loss_fixed_points),
        ("metrics and codec", metrics_and_codec),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} [{secs:.2} s]: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{secs:.2} s]: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
