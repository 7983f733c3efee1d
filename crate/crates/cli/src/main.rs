mod config;
mod report;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mono3d::anab::{anab_forward, complexity_bench, reference_non_local, AnabParams, PyramidSpec};
use mono3d::eval::{
    depth_error_report, evaluate, BinKey, DepthSample, EvalConfig, RecallMode, Task,
};
use mono3d::geometry::{iou_bev, Box3D};
use mono3d::gradcheck::{standard_suite, GradCheckConfig};
use mono3d::kitti::{read_label_dir, write_label_dir, LabelRecord};
use mono3d::model::{attention_map_of, DetectConfig};
use mono3d::ops::{align_conv_forward, conv2d_forward};
use mono3d::postproc::MIN_CONFIDENCE;
use mono3d::scene::{bundled_scenes, synthetic_dataset, SceneConfig};
use mono3d::train::{trace_csv, train_toy, ToyConfig};
use mono3d::viz::{upscale, write_pgm};
use mono3d::{ConvSpec, Exec, Shape, Tensor};

use config::Config;
use report::Table;

#[derive(Parser, Debug)]
#[command(name = "mono3d", version, about = "Monocular 3D detection toolkit")]
struct Cli {
    /// `key = value` settings file; flags given on the command line win
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run every kernel single-threaded
    #[arg(long, global = true)]
    sequential: bool,
    /// Write the CSV form to this file instead of stdout
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the bundled scenes, detect on fresh ones and score the result
    Demo(DemoArgs),
    /// Score a directory of result files against a label directory
    Eval(EvalArgs),
    /// Finite-difference gradient checks and reference oracles
    Gradcheck(GradArgs),
    /// Time the pooled attention block against a full non-local block
    BenchAnab(BenchArgs),
    /// Write attention maps as PGM images
    VizAttention(VizArgs),
    /// Train the toy detector and print its loss trace
    TrainToy(TrainArgs),
}

#[derive(Args, Debug)]
struct DemoArgs {
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    min_score: Option<f64>,
    #[arg(long)]
    mode: Option<RecallMode>,
    /// Also write `gt/` and `det/` label directories here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    det: Option<PathBuf>,
    /// 3d, bev or 2d
    #[arg(long)]
    task: Option<Task>,
    /// r11 or r40
    #[arg(long)]
    mode: Option<RecallMode>,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated `HxW` list
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Skip the quadratic reference block
    #[arg(long)]
    no_nonlocal: bool,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    /// Table shows every k-th step
    #[arg(long)]
    every: Option<usize>,
}

enum Failure {
    Usage(String),
    Failed(String),
}

impl From<mono3d::Error> for Failure {
    fn from(e: mono3d::Error) -> Self {
        Failure::Failed(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: String) -> Failure {
    Failure::Usage(e)
}

struct Ctx {
    cfg: Config,
    exec: Exec,
    csv: Option<PathBuf>,
}

impl Ctx {
    fn emit(&self, t: &Table) -> Outcome {
        print!("{}", t.text());
        match &self.csv {
            Some(p) => std::fs::write(p, t.csv())
                .map_err(|e| Failure::Failed(format!("{}: {e}", p.display()))),
            None => {
                println!();
                print!("{}", t.csv());
                Ok(())
            }
        }
    }
}

fn main() -> ExitCode {
    run(std::env::args_os())
}

fn run<I: IntoIterator<Item = OsString>>(argv: I) -> ExitCode {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = (|| {
        let cfg = match &cli.config {
            Some(p) => Config::load(p).map_err(usage)?,
            None => Config::default(),
        };
        let sequential = cfg.switch(cli.sequential, "sequential").map_err(usage)?;
        let csv = cfg.pick(cli.csv.clone(), "csv").map_err(usage)?;
        let ctx = Ctx {
            cfg,
            exec: if sequential {
                Exec::Sequential
            } else {
                Exec::Parallel
            },
            csv,
        };
        match &cli.command {
            Command::Demo(a) => demo(&ctx, a),
            Command::Eval(a) => eval(&ctx, a),
            Command::Gradcheck(a) => gradcheck(&ctx, a),
            Command::BenchAnab(a) => bench(&ctx, a),
            Command::VizAttention(a) => viz(&ctx, a),
            Command::TrainToy(a) => train(&ctx, a),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\nUsage: mono3d [--config FILE] <COMMAND> [OPTIONS]; see `mono3d --help`");
            ExitCode::from(2)
        }
        Err(Failure::Failed(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn toy_config(ctx: &Ctx) -> ToyConfig {
    ToyConfig {
        exec: ctx.exec,
        ..ToyConfig::default()
    }
}

/// AP in percent; buckets without ground truth have no AP.
fn fmt_ap(v: f64, num_gt: usize) -> String {
    if num_gt == 0 {
        "-".to_string()
    } else {
        format!("{:.2}", 100.0 * v)
    }
}

fn demo(ctx: &Ctx, a: &DemoArgs) -> Outcome {
    let c = &ctx.cfg;
    let n = c.or(a.scenes, "scenes", 8).map_err(usage)?;
    let seed = c.or(a.seed, "seed", 11).map_err(usage)?;
    let steps = c.or(a.steps, "steps", 200).map_err(usage)?;
    let min_score = c
        .or(a.min_score, "min_score", MIN_CONFIDENCE)
        .map_err(usage)?;
    let mode = c.or(a.mode, "mode", RecallMode::R40).map_err(usage)?;
    let out = c.pick(a.out.clone(), "out").map_err(usage)?;

    let train_set = bundled_scenes();
    let (model, trace) = train_toy(&train_set, steps, &toy_config(ctx))?;
    let first = trace.first().map_or(f64::NAN, |r| r.total);
    let last = trace.last().map_or(f64::NAN, |r| r.total);
    println!("trained {steps} steps: loss {first:.4} -> {last:.4}");

    let scenes = synthetic_dataset(n, seed, &SceneConfig::default());
    let refs: Vec<_> = scenes.iter().collect();
    let dcfg = DetectConfig {
        min_score,
        ..DetectConfig::default()
    };
    let dets = model.detect(&refs, &dcfg)?;
    let mut gt = BTreeMap::new();
    let mut det = BTreeMap::new();
    let mut frames = Vec::new();
    for (i, (s, d)) in scenes.iter().zip(&dets).enumerate() {
        let name = format!("{i:06}");
        gt.insert(
            name.clone(),
            s.objects.iter().map(|o| o.label()).collect::<Vec<_>>(),
        );
        det.insert(
            name,
            d.iter()
                .map(LabelRecord::from_detection)
                .collect::<Vec<_>>(),
        );
        frames.push((
            d.iter()
                .map(|x| DepthSample {
                    box2d: x.box2d,
                    z: x.box3d.z,
                })
                .collect::<Vec<_>>(),
            s.objects
                .iter()
                .map(|o| DepthSample {
                    box2d: o.box2d,
                    z: o.box3d.z,
                })
                .collect::<Vec<_>>(),
        ));
    }
    let total: usize = dets.iter().map(Vec::len).sum();
    let objects: usize = scenes.iter().map(|s| s.objects.len()).sum();
    println!("{n} scenes, {objects} objects, {total} detections (score >= {min_score})\n");

    let mut t = Table::new(&[
        "task",
        "mode",
        "class",
        "difficulty",
        "ap",
        "num_gt",
        "num_det",
    ]);
    for task in [Task::TwoD, Task::Bev, Task::ThreeD] {
        let cfg = EvalConfig {
            task,
            mode,
            ..EvalConfig::default()
        };
        for r in evaluate(&gt, &det, &cfg)? {
            t.push(vec![
                task.to_string(),
                mode.to_string(),
                r.class.to_string(),
                r.difficulty.name().to_string(),
                fmt_ap(r.ap, r.num_gt),
                r.num_gt.to_string(),
                r.num_entries.to_string(),
            ]);
        }
    }
    ctx.emit(&t)?;

    let bins = depth_error_report(&frames, &[8.0, 10.0, 12.0, 14.0, 16.0], BinKey::Depth)?;
    println!("\nmean |dz| by ground-truth depth (2D IoU >= 0.5 pairs)");
    let mut b = Table::new(&["depth_lo", "depth_hi", "mean_abs_dz", "pairs"]);
    for bin in bins {
        b.push(vec![
            format!("{}", bin.lo),
            format!("{}", bin.hi),
            format!("{:.3}", bin.mean_abs_error),
            bin.count.to_string(),
        ]);
    }
    print!("{}", b.text());

    if let Some(dir) = out {
        write_label_dir(&dir.join("gt"), &gt)?;
        write_label_dir(&dir.join("det"), &det)?;
        std::fs::write(dir.join("trace.csv"), trace_csv(&trace))
            .map_err(|e| Failure::Failed(e.to_string()))?;
        println!("\nwrote {}", dir.display());
    }
    Ok(())
}

fn existing_dir(p: Option<PathBuf>, flag: &str) -> Result<PathBuf, Failure> {
    let p = p.ok_or_else(|| usage(format!("--{flag} <DIR> is required")))?;
    if !p.is_dir() {
        return Err(usage(format!(
            "--{flag}: {} is not a directory",
            p.display()
        )));
    }
    Ok(p)
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Outcome {
    let c = &ctx.cfg;
    let gt_dir = existing_dir(c.pick(a.gt.clone(), "gt").map_err(usage)?, "gt")?;
    let det_dir = existing_dir(c.pick(a.det.clone(), "det").map_err(usage)?, "det")?;
    let task = c.or(a.task, "task", Task::ThreeD).map_err(usage)?;
    let mode = c.or(a.mode, "mode", RecallMode::R40).map_err(usage)?;
    let gt = read_label_dir(&gt_dir)?;
    let det = read_label_dir(&det_dir)?;
    let cfg = EvalConfig {
        task,
        mode,
        ..EvalConfig::default()
    };
    let rows = evaluate(&gt, &det, &cfg)?;
    let mut t = Table::new(&[
        "task",
        "mode",
        "class",
        "difficulty",
        "ap",
        "num_gt",
        "num_det",
    ]);
    for r in rows {
        t.push(vec![
            task.to_string(),
            mode.to_string(),
            r.class.to_string(),
            r.difficulty.name().to_string(),
            fmt_ap(r.ap, r.num_gt),
            r.num_gt.to_string(),
            r.num_entries.to_string(),
        ]);
    }
    if t.is_empty() {
        println!(
            "no labelled objects of the evaluated classes in {}",
            gt_dir.display()
        );
    }
    ctx.emit(&t)
}

/// Oracle checks that compare two independent evaluations of one quantity.
fn oracle_checks(seed: u64) -> Result<Vec<(String, bool, String)>, Failure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = Tensor::from_fn(Shape::new(2, 3, 7, 9), |i| {
        ((i * 37) % 101) as f64 / 50.0 - 1.0
    });
    let conv = ConvSpec::random(3, 4, (3, 3), 1, 1, 1.0, &mut rng)?;
    let plain = conv2d_forward(&x, &conv.weight, &conv.bias, 1, 1, Exec::Sequential)?;
    let zero = Tensor::zeros(Shape::new(2, 18, 7, 9));
    let aligned = align_conv_forward(&x, &conv.weight, &conv.bias, &zero, 1, 1, Exec::Sequential)?;
    out.push((
        "align_conv/zero-offset".to_string(),
        plain == aligned,
        "bit-identical to conv2d".to_string(),
    ));

    let mut p = AnabParams::random(8, PyramidSpec::full_resolution(6, 10, 0.0)?, &mut rng)?;
    p.attention = ConvSpec::zeros(8, 1, (1, 1), 1, 0)?;
    let xa = Tensor::from_fn(Shape::new(1, 8, 6, 10), |i| (0.37 * i as f64).sin());
    let d = anab_forward(&xa, &p)?.max_abs_diff(&reference_non_local(&xa, &p)?);
    out.push((
        "anab/non-local".to_string(),
        d < 1e-6,
        format!("max_abs_diff={d:.3e} (tol 1e-6)"),
    ));

    let a = Box3D::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0)?;
    let b = Box3D::new(
        [0.0, 0.0, 0.0],
        [1.0, 1.0, 1.0],
        std::f64::consts::FRAC_PI_4,
    )?;
    let v = iou_bev(&a, &b);
    let want = std::f64::consts::FRAC_1_SQRT_2;
    out.push((
        "bev_iou/45deg".to_string(),
        (v - want).abs() < 1e-12,
        format!("iou={v:.12}"),
    ));
    Ok(out)
}

fn gradcheck(ctx: &Ctx, a: &GradArgs) -> Outcome {
    let c = &ctx.cfg;
    let gc = GradCheckConfig {
        step: c.or(a.step, "step", 1e-5).map_err(usage)?,
        tol: c.or(a.tol, "tol", 1e-4).map_err(usage)?,
        ..GradCheckConfig::default()
    };
    let seed = c.or(a.seed, "seed", 1).map_err(usage)?;
    let mut t = Table::new(&["check", "result", "detail"]);
    let mut ok = true;
    for r in standard_suite(seed, gc)? {
        ok &= r.passed();
        t.push(vec![
            r.op.clone(),
            if r.passed() { "PASS" } else { "FAIL" }.to_string(),
            if r.non_finite {
                "non-finite value".to_string()
            } else {
                format!(
                    "max_rel_err={:.3e} over {} elements",
                    r.max_rel_err, r.checked
                )
            },
        ]);
    }
    for (name, pass, detail) in oracle_checks(seed)? {
        ok &= pass;
        t.push(vec![
            name,
            if pass { "PASS" } else { "FAIL" }.to_string(),
            detail,
        ]);
    }
    ctx.emit(&t)?;
    if ok {
        Ok(())
    } else {
        Err(Failure::Failed("one or more checks failed".into()))
    }
}

fn parse_sizes(s: &str) -> Result<Vec<(usize, usize)>, Failure> {
    s.split(',')
        .map(|item| {
            let (h, w) = item
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| usage(format!("size '{item}' is not HxW")))?;
            let h: usize = h
                .trim()
                .parse()
                .map_err(|_| usage(format!("bad height in '{item}'")))?;
            let w: usize = w
                .trim()
                .parse()
                .map_err(|_| usage(format!("bad width in '{item}'")))?;
            if h == 0 || w == 0 {
                return Err(usage(format!("size '{item}' must be positive")));
            }
            Ok((h, w))
        })
        .collect()
}

fn bench(ctx: &Ctx, a: &BenchArgs) -> Outcome {
    let c = &ctx.cfg;
    let sizes = parse_sizes(
        &c.or(a.sizes.clone(), "sizes", "48x160".to_string())
            .map_err(usage)?,
    )?;
    let channels = c.or(a.channels, "channels", 8).map_err(usage)?;
    let runs = c.or(a.runs, "runs", 3).map_err(usage)?;
    let nonlocal = !a.no_nonlocal && c.or(None, "nonlocal", true).map_err(usage)?;
    if channels == 0 || runs == 0 {
        return Err(usage("--channels and --runs must be positive".into()));
    }
    let spec = PyramidSpec::default();
    let mut t = Table::new(&[
        "h",
        "w",
        "n",
        "l",
        "c",
        "anab_ms",
        "nonlocal_ms",
        "anab_ratio",
        "nonlocal_ratio",
    ]);
    let mut base: Option<(f64, f64)> = None;
    for (h, w) in sizes {
        let r = complexity_bench(h, w, channels, &spec, runs, nonlocal)?;
        let (ba, bn) = *base.get_or_insert((r.anab_secs, r.nonlocal_secs));
        let ms = |s: f64| {
            if s.is_nan() {
                "-".to_string()
            } else {
                format!("{:.3}", 1e3 * s)
            }
        };
        let ratio = |s: f64, b: f64| {
            if s.is_nan() {
                "-".to_string()
            } else {
                format!("{:.2}", s / b)
            }
        };
        t.push(vec![
            r.height.to_string(),
            r.width.to_string(),
            r.n.to_string(),
            r.l.to_string(),
            r.channels.to_string(),
            ms(r.anab_secs),
            ms(r.nonlocal_secs),
            ratio(r.anab_secs, ba),
            ratio(r.nonlocal_secs, bn),
        ]);
    }
    ctx.emit(&t)
}

fn viz(ctx: &Ctx, a: &VizArgs) -> Outcome {
    let c = &ctx.cfg;
    let out: PathBuf = c
        .pick(a.out.clone(), "out")
        .map_err(usage)?
        .ok_or_else(|| usage("--out <DIR> is required".into()))?;
    let n = c.or(a.scenes, "scenes", 4).map_err(usage)?;
    let seed = c.or(a.seed, "seed", 11).map_err(usage)?;
    let steps = c.or(a.steps, "steps", 200).map_err(usage)?;
    let (model, _) = train_toy(&bundled_scenes(), steps, &toy_config(ctx))?;
    std::fs::create_dir_all(&out)
        .map_err(|e| Failure::Failed(format!("{}: {e}", out.display())))?;
    let scenes = synthetic_dataset(n, seed, &SceneConfig::default());
    let mut t = Table::new(&["scene", "file", "min", "max", "objects"]);
    for (i, s) in scenes.iter().enumerate() {
        let (h, w, map) = attention_map_of(&model, s)?;
        let big = upscale(&map, h, w, mono3d::model::STRIDE);
        let path = out.join(format!("attention_{i:03}.pgm"));
        write_file(&path, |f| {
            write_pgm(
                f,
                &big,
                h * mono3d::model::STRIDE,
                w * mono3d::model::STRIDE,
            )
        })?;
        let shape = s.image.shape();
        let mask: Vec<f64> = s.image.data()[..shape.plane()].to_vec();
        write_file(&out.join(format!("mask_{i:03}.pgm")), |f| {
            write_pgm(f, &mask, shape.height, shape.width)
        })?;
        let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        t.push(vec![
            i.to_string(),
            path.file_name()
                .map(|p| p.to_string_lossy().into_owned())
                .unwrap_or_default(),
            format!("{lo:.4}"),
            format!("{hi:.4}"),
            s.objects.len().to_string(),
        ]);
    }
    ctx.emit(&t)
}

fn write_file(path: &Path, f: impl FnOnce(&mut std::fs::File) -> mono3d::Result<()>) -> Outcome {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Failure::Failed(format!("{}: {e}", path.display())))?;
    f(&mut file)?;
    Ok(())
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Outcome {
    let c = &ctx.cfg;
    let steps = c.or(a.steps, "steps", 200).map_err(usage)?;
    let every = c.or(a.every, "every", 10).map_err(usage)?.max(1);
    let (_, trace) = train_toy(&bundled_scenes(), steps, &toy_config(ctx))?;
    let mut t = Table::new(&["step", "lr", "l_cls", "l_2d", "l_3d", "l_total"]);
    for r in trace
        .iter()
        .filter(|r| r.step % every == 0 || r.step == steps)
    {
        t.push(vec![
            r.step.to_string(),
            format!("{:.3e}", r.lr),
            format!("{:.4}", r.cls),
            format!("{:.4}", r.l2d),
            format!("{:.4}", r.l3d),
            format!("{:.4}", r.total),
        ]);
    }
    print!("{}", t.text());
    if let (Some(f), Some(l)) = (trace.first(), trace.last()) {
        println!("final/initial total loss: {:.4}", l.total / f.total);
    }
    // the CSV form carries every step at full precision
    let csv = trace_csv(&trace);
    match &ctx.csv {
        Some(p) => {
            std::fs::write(p, csv).map_err(|e| Failure::Failed(format!("{}: {e}", p.display())))
        }
        None => {
            println!();
            print!("{csv}");
            Ok(())
        }
    }
}
