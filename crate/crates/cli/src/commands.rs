use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use depthcomp::attention::Variant;
use depthcomp::densify::{density, Densifier};
use depthcomp::grid::{read_kitti_png, write_csv_grid, write_kitti_png, SparseDepthMap};
use depthcomp::metrics::{evaluate, EvalResult};
use depthcomp::synth::{
    bench_attention, dilation_ablation, gen_scene as make_scene, sample_sparse, train_toy as run_toy, AblationRow,
    BenchConfig, BenchResult, CurvePoint, Init, Layout, SampleMode, Scene, SceneSpec, TrainConfig, TrainMode,
};

use crate::{AblationArgs, BenchArgs, DensifyArgs, EvalArgs, SceneArgs, SceneOpts, TrainArgs};

/// Parses `AxB` into `(A, B)`.
fn parse_pair(text: &str, what: &str) -> Result<(usize, usize)> {
    let (a, b) = text.split_once('x').with_context(|| format!("{what} '{text}' is not of the form AxB"))?;
    let parse = |s: &str| s.trim().parse::<usize>().with_context(|| format!("{what} '{text}'"));
    Ok((parse(a)?, parse(b)?))
}

fn read_png(path: &Path) -> Result<SparseDepthMap> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_kitti_png(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn write_png(path: &Path, map: &SparseDepthMap) -> Result<()> {
    fs::write(path, write_kitti_png(map)?).with_context(|| format!("writing {}", path.display()))
}

/// Writes `echo` as the first line, then `body`.
fn write_csv(path: &Path, echo: &str, body: &str) -> Result<()> {
    fs::write(path, format!("{echo}\n{body}")).with_context(|| format!("writing {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn densify(a: &DensifyArgs) -> Result<()> {
    let method = a.kernel.as_deref().or(a.interp.as_deref()).expect("clap requires one of them");
    let densifier: Densifier = method.parse()?;
    if a.interp.is_some() && matches!(densifier, Densifier::Dilate(_)) {
        bail!("'{method}' is a kernel, not an interpolation method");
    }
    if a.kernel.is_some() && matches!(densifier, Densifier::Interpolate(_)) {
        bail!("'{method}' is an interpolation method, not a kernel");
    }
    println!("# depthcomp densify input={} output={} method={densifier}", a.input.display(), a.output.display());
    let sparse = read_png(&a.input)?;
    let dense = densifier.apply(&sparse)?;
    write_png(&a.output, &dense)?;
    println!("density_before,density_after");
    println!("{:?},{:?}", density(&sparse), density(&dense));
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    println!("# depthcomp eval pred={} gt={}", a.pred.display(), a.gt.display());
    let pred = read_png(&a.pred)?;
    let gt = read_png(&a.gt)?;
    let r = evaluate(&pred.to_dense(), &gt)?;
    println!("{}", EvalResult::CSV_HEADER);
    println!("{}", r.csv_row());
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let sizes = a.sizes.split(',').map(|s| parse_pair(s, "size")).collect::<Result<Vec<_>>>()?;
    if sizes.len() < 3 {
        bail!(depthcomp::Error::Parameter(format!("benchmark needs at least 3 sizes, got {}", sizes.len())));
    }
    let variants = a.variants.split(',').map(|s| s.trim().parse::<Variant>()).collect::<Result<Vec<_>, _>>()?;
    let out = a.out.clone().unwrap_or_else(|| a.out_dir.join(format!("bench_{}.csv", a.seed)));
    let echo = format!(
        "# depthcomp bench sizes={} variants={} channels={} reps={} seed={} timing={} out={}",
        a.sizes,
        variants.iter().map(Variant::to_string).collect::<Vec<_>>().join(","),
        a.channels,
        a.reps,
        a.seed,
        !a.no_timing,
        out.display()
    );
    println!("{echo}");
    let config = BenchConfig {
        sizes,
        channels: a.channels,
        repetitions: a.reps,
        variants,
        seed: a.seed,
        timing: !a.no_timing,
        ..BenchConfig::default()
    };
    let result: BenchResult = bench_attention(&config)?;
    if !result.sanity {
        bail!("attention produced non-finite or misshapen output");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    write_csv(&out, &echo, &result.to_csv())?;
    println!("variant,time_slope,flop_slope");
    for s in &result.slopes {
        let time = s.time_slope.map(|t| format!("{t:?}")).unwrap_or_default();
        println!("{},{time},{:?}", s.variant, s.flop_slope);
    }
    Ok(())
}

struct SceneSetup {
    scene: Scene,
    sparse: SparseDepthMap,
    echo: String,
}

fn scene_setup(o: &SceneOpts) -> Result<SceneSetup> {
    let (h, w) = parse_pair(&o.size, "size")?;
    let layout: Layout = o.layout.parse()?;
    let spec = SceneSpec::new(h, w, layout, o.seed)?;
    let scene = make_scene(&spec)?;
    let sparse = sample_sparse(&scene.depth, SampleMode::Fraction(o.sparsity), o.seed)?;
    let (lo, hi) = spec.depth_range;
    let echo = format!("size={h}x{w} layout={layout} depth_range={lo}..{hi} sparsity={} seed={}", o.sparsity, o.seed);
    Ok(SceneSetup { scene, sparse, echo })
}

pub fn train_toy(a: &TrainArgs) -> Result<()> {
    let modes = match a.mode.as_str() {
        "both" => vec![TrainMode::Direct, TrainMode::Dscl],
        m => vec![m.parse::<TrainMode>()?],
    };
    let regions = parse_pair(&a.regions, "regions")?;
    let setup = scene_setup(&a.scene)?;
    let echo = format!(
        "# depthcomp train-toy mode={} regions={}x{} steps={} step_size={} smoothness={} {} out={}",
        a.mode,
        regions.0,
        regions.1,
        a.steps,
        a.step_size,
        a.smoothness,
        setup.echo,
        a.out.display()
    );
    ensure_dir(&a.out)?;
    println!("{echo}");
    let mut table = format!("mode,{},final_total\n", EvalResult::CSV_HEADER);
    for mode in modes {
        let config = TrainConfig {
            mode,
            scale_regions: regions,
            steps: a.steps,
            step_size: a.step_size,
            smoothness_weight: a.smoothness,
            seed: a.scene.seed,
        };
        let out = run_toy(&setup.scene.depth, &setup.sparse, &config, Init::Neutral)
            .with_context(|| format!("{mode} run"))?;
        let stem = |kind: &str| a.out.join(format!("train_toy_{mode}_{kind}_{}", a.scene.seed));
        let mut curve = CurvePoint::csv_header();
        curve.push('\n');
        for p in &out.curve {
            let _ = writeln!(curve, "{}", p.csv_row());
        }
        write_csv(&stem("curve").with_extension("csv"), &echo, &curve)?;
        write_csv(
            &stem("metrics").with_extension("csv"),
            &echo,
            &format!("{}\n{}\n", EvalResult::CSV_HEADER, out.eval.csv_row()),
        )?;
        write_png(&stem("depth").with_extension("png"), &SparseDepthMap::from_dense(&out.depth)?)?;
        let total = out.curve.last().expect("curve has the initial point").report.total;
        let _ = writeln!(table, "{mode},{},{total:?}", out.eval.csv_row());
    }
    print!("{table}");
    Ok(())
}

pub fn gen_scene(a: &SceneArgs) -> Result<()> {
    let setup = scene_setup(&a.scene)?;
    let echo = format!("# depthcomp gen-scene {} out={}", setup.echo, a.out.display());
    ensure_dir(&a.out)?;
    println!("{echo}");
    let seed = a.scene.seed;
    let path = |name: &str, ext: &str| -> PathBuf { a.out.join(format!("scene_{name}_{seed}.{ext}")) };
    write_png(&path("depth", "png"), &SparseDepthMap::from_dense(&setup.scene.depth)?)?;
    write_png(&path("sparse", "png"), &setup.sparse)?;
    write_csv(&path("image", "csv"), &echo, &write_csv_grid(&setup.scene.image))?;
    write_csv(&path("motion", "csv"), &echo, &setup.scene.motion.to_csv())?;
    println!("file");
    for (name, ext) in [("depth", "png"), ("sparse", "png"), ("image", "csv"), ("motion", "csv")] {
        println!("{}", path(name, ext).display());
    }
    Ok(())
}

pub fn ablation(a: &AblationArgs) -> Result<()> {
    let configs = a.configs.split(',').map(|s| s.trim().parse::<Densifier>()).collect::<Result<Vec<_>, _>>()?;
    let setup = scene_setup(&a.scene)?;
    let echo = format!(
        "# depthcomp ablation configs={} {} out={}",
        configs.iter().map(Densifier::to_string).collect::<Vec<_>>().join(","),
        setup.echo,
        a.out.display()
    );
    ensure_dir(&a.out)?;
    println!("{echo}");
    let rows = dilation_ablation(&setup.scene.depth, &setup.sparse, &configs)?;
    let mut body = format!("{}\n", AblationRow::CSV_HEADER);
    for r in &rows {
        let _ = writeln!(body, "{}", r.csv_row());
    }
    write_csv(&a.out.join(format!("ablation_{}.csv", a.scene.seed)), &echo, &body)?;
    print!("{body}");
    Ok(())
}
