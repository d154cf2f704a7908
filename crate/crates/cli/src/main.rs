mod model;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tinydet::config::{render_cfg, LayerKind};
use tinydet::dataset::{load_image, load_labels_for, parse_list_file, save_ppm, split_dataset, RgbImage};
use tinydet::eval::{evaluate, render_report, render_report_kv};
use tinydet::head::Detection;

/// Scores below this never reach the metric pipeline; it bounds how many
/// near-zero boxes enter the AP ranking and the detection count.
const EVAL_SCORE_FLOOR: f64 = 0.005;

#[derive(Parser)]
#[command(name = "tinydet", version, about = "Small-object detection with a three-scale Tiny-YOLOv3")]
struct Cli {
    /// Log more (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run detection on images and print the boxes
    Detect(DetectArgs),
    /// Evaluate against labelled images and print the metric report
    Eval(EvalArgs),
    /// Time repeated forward + decode + NMS passes
    Bench(BenchArgs),
    /// Print the layer table and layer census of a network
    Inspect(InspectArgs),
    /// Shuffle an image list into train and validation lists
    Split(SplitArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Builtin {
    Custom,
    Baseline,
}

#[derive(Args)]
struct NetArgs {
    /// Darknet network description
    #[arg(long, env = "TINYDET_CFG", conflicts_with = "builtin")]
    cfg: Option<PathBuf>,
    /// Use a built-in layer table instead of --cfg
    #[arg(long, value_enum)]
    builtin: Option<Builtin>,
    /// Class count for --builtin
    #[arg(long, default_value_t = 1, value_parser = positive)]
    classes: usize,
    /// Binary weights; random parameters are used when omitted
    #[arg(long, env = "TINYDET_WEIGHTS")]
    weights: Option<PathBuf>,
    /// Seed for random parameters
    #[arg(long, env = "TINYDET_SEED", default_value_t = 0)]
    seed: u64,
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("`{s}` is not a positive integer")),
    }
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Args)]
struct Thresholds {
    /// Minimum detection score
    #[arg(long, env = "TINYDET_CONF", default_value_t = 0.25, value_parser = unit_interval)]
    conf: f64,
    /// IoU above which same-class boxes are suppressed
    #[arg(long, env = "TINYDET_NMS_IOU", default_value_t = 0.45, value_parser = unit_interval)]
    nms_iou: f64,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    thresh: Thresholds,
    /// Class names, one per line
    #[arg(long, env = "TINYDET_NAMES")]
    names: Option<PathBuf>,
    /// Directory for annotated copies of the inputs (binary PPM)
    #[arg(long, env = "TINYDET_OUT")]
    out: Option<PathBuf>,
    /// Worker threads
    #[arg(long, env = "TINYDET_PARALLEL", default_value_t = 1)]
    parallel: usize,
    /// Images to process
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    thresh: Thresholds,
    /// IoU a detection needs to count as a true positive
    #[arg(long, env = "TINYDET_EVAL_IOU", default_value_t = 0.5, value_parser = unit_interval)]
    eval_iou: f64,
    /// Darknet .data file naming the validation list and class names
    #[arg(long, env = "TINYDET_DATA")]
    data: Option<PathBuf>,
    /// Class names, one per line
    #[arg(long, env = "TINYDET_NAMES")]
    names: Option<PathBuf>,
    /// Validation image list (overrides the .data file)
    #[arg(long)]
    list: Option<PathBuf>,
    /// Write the key=value report here
    #[arg(long, env = "TINYDET_OUT")]
    out: Option<PathBuf>,
    /// Worker threads
    #[arg(long, env = "TINYDET_PARALLEL", default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    net: NetArgs,
    #[command(flatten)]
    thresh: Thresholds,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    iterations: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Write the network description here
    #[arg(long, env = "TINYDET_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    /// Image list to split
    list: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    fraction: f64,
    #[arg(long, env = "TINYDET_SEED", default_value_t = 0)]
    seed: u64,
    /// Directory that receives train.txt and valid.txt
    #[arg(long, env = "TINYDET_OUT", default_value = ".")]
    out: PathBuf,
}

fn thread_pool(n: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().context("cannot start worker threads")
}

fn print_detections(out: &mut impl std::io::Write, path: &Path, dets: &[Detection], names: &[String]) -> Result<()> {
    writeln!(out, "{}: {} detections", path.display(), dets.len())?;
    for d in dets {
        let b = d.bbox;
        writeln!(
            out,
            "  {}: {:.2}% cx={:.6} cy={:.6} w={:.6} h={:.6}",
            names[d.class_id],
            d.score * 100.0,
            b.cx,
            b.cy,
            b.w,
            b.h
        )?;
    }
    Ok(())
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let net = model::load_network(&args.net, model::Fallback::Random)?;
    let names = model::class_names(args.names.as_deref(), None, net.classes())?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let pool = thread_pool(args.parallel)?;
    let results: Vec<Result<(RgbImage, Vec<Detection>)>> = pool.install(|| {
        args.images
            .par_iter()
            .map(|p| {
                let img = load_image(p)?;
                let dets = model::detect(&net, &img, args.thresh.conf, args.thresh.nms_iou)?;
                Ok((img, dets))
            })
            .collect()
    });
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (path, res) in args.images.iter().zip(results) {
        let (mut img, dets) = res?;
        print_detections(&mut out, path, &dets, &names)?;
        if let Some(dir) = &args.out {
            for d in &dets {
                img.draw_box(&d.bbox, [255, 0, 0], 2);
            }
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            save_ppm(&img, dir.join(format!("{stem}.pred.ppm")))?;
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let meta = args.data.as_deref().map(model::load_data_meta).transpose()?;
    let list_path = match (&args.list, &meta, &args.data) {
        (Some(l), _, _) => l.clone(),
        (None, Some(m), Some(d)) => model::resolve(Path::new(&m.valid_list_path), d.parent()),
        _ => bail!("eval needs --list or a --data file with a `valid` entry"),
    };
    let net = model::load_network(&args.net, model::Fallback::Random)?;
    let names = model::class_names(args.names.as_deref(), meta.as_ref(), net.classes())?;
    let images: Vec<PathBuf> = parse_list_file(&model::read_text(&list_path)?)
        .iter()
        .map(|p| model::resolve(Path::new(p), list_path.parent()))
        .collect();
    if images.is_empty() {
        bail!(tinydet::Error::Validation(format!("validation list {} is empty", list_path.display())));
    }

    let mut truths = Vec::with_capacity(images.len());
    for p in &images {
        match load_labels_for(p)? {
            Some(l) => truths.push(l),
            None => {
                log::warn!("no label file for {}; treating it as an image without objects", p.display());
                truths.push(Vec::new());
            }
        }
    }

    let start = Instant::now();
    let pool = thread_pool(args.parallel)?;
    let dets: Vec<Vec<Detection>> = pool.install(|| {
        images
            .par_iter()
            .map(|p| model::detect(&net, &load_image(p)?, EVAL_SCORE_FLOOR, args.thresh.nms_iou))
            .collect::<Result<_>>()
    })?;
    let elapsed = start.elapsed().as_secs_f64();

    let report = evaluate(&dets, &truths, &names, args.eval_iou, args.thresh.conf, elapsed)?;
    print!("{}", render_report(&report));
    if let Some(out) = &args.out {
        fs::write(out, render_report_kv(&report)).with_context(|| format!("cannot write {}", out.display()))?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let net = model::load_network(&args.net, model::Fallback::Random)?;
    let [_, _, h, w] = net.input_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(args.net.seed);
    let image = RgbImage { width: w, height: h, data: (0..w * h * 3).map(|_| rng.gen()).collect() };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let total = Instant::now();
    for i in 1..=args.iterations {
        let t = Instant::now();
        model::detect(&net, &image, args.thresh.conf, args.thresh.nms_iou)?;
        let fps = 1.0 / t.elapsed().as_secs_f64();
        let avg = i as f64 / total.elapsed().as_secs_f64();
        writeln!(out, "FPS:{fps:.1}      AVG_FPS:{avg:.1}")?;
    }
    let avg = args.iterations as f64 / total.elapsed().as_secs_f64();
    writeln!(out, "AVG_FPS:{avg:.1}")?;
    Ok(())
}

fn layer_summary(kind: &LayerKind) -> String {
    match kind {
        LayerKind::Convolutional(c) => format!(
            "{} {}x{}/{}{} {}",
            c.filters,
            c.size,
            c.size,
            c.stride,
            if c.batch_normalize { " bn" } else { "" },
            c.activation
        ),
        LayerKind::Maxpool(m) => format!("{}x{}/{}", m.size, m.size, m.stride),
        LayerKind::Route(r) => r.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
        LayerKind::Upsample(u) => format!("x{}", u.factor),
        LayerKind::Yolo(y) => format!(
            "mask {} classes {}",
            y.mask.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
            y.classes
        ),
    }
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let net = model::load_network(&args.net, model::Fallback::Zeros)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let input = net.def.input_shape();
    writeln!(out, "input {}x{}x{}", input.channels, input.height, input.width)?;
    for (i, l) in net.def.layers.iter().enumerate() {
        let s = l.out_shape.expect("shapes inferred");
        writeln!(
            out,
            "{i:>3} {:<14} {:<24} -> {}x{}x{}",
            l.kind.section_name(),
            layer_summary(&l.kind),
            s.channels,
            s.height,
            s.width
        )?;
    }
    writeln!(out, "{}", net.def.census())?;
    if let Some(path) = &args.out {
        fs::write(path, render_cfg(&net.def)).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let items = parse_list_file(&model::read_text(&args.list)?);
    let (train, valid) = split_dataset(&items, args.fraction, args.seed)?;
    fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    for (name, part) in [("train.txt", &train), ("valid.txt", &valid)] {
        let path = args.out.join(name);
        let mut text = part.join("\n");
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!("train {} valid {}", train.len(), valid.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let res = match cli.command {
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Split(a) => cmd_split(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
