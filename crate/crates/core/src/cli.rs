//! Command-line entry point: argument parsing, logging, worker pools and
//! exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::augment::{generate_dataset, SceneConfig};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_report, collect_row, linear_eval, load_online, loss_curves, read_downstream, AblationRow, EvalConfig,
    EvalReport, NetworkBackbone, Protocol,
};
use crate::geometry::Box;
use crate::gradsuite;
use crate::imageio::{bar_plot, dump_dataset, line_plot, load_dataset, palette, Canvas};
use crate::rng::child_rng;
use crate::tensor::serialize::{write_atomic, Checkpoint};
use crate::trainer::{fnv1a, prepare_image, train_augment, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "scrl", version, about = "Spatially consistent representation learning at desk scale")]
pub struct Cli {
    /// Worker threads for data preparation and feature extraction.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised pretraining.
    Train(TrainArgs),
    /// Frozen-backbone linear probe of a checkpoint.
    Eval(EvalArgs),
    /// Tables and plots over finished runs.
    Report(ReportArgs),
    /// Finite-difference check of every differentiable operator and the full loss.
    Gradcheck(GradcheckArgs),
    /// Annotated view pairs showing matched regions.
    GeomCheck(GeomCheckArgs),
    /// Synthetic dataset utilities.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Stop after this many steps in this invocation.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, default_value = "roi")]
    pub protocol: String,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory written by `dataset dump`; split into probe train and
    /// test images. Fresh scenes are generated when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory receiving `eval_<protocol>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Fraction of `--data` images used for probe training.
    #[arg(long, default_value_t = 2.0 / 3.0)]
    pub train_fraction: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// `run,value` CSV of downstream scores for the rank correlation.
    #[arg(long)]
    pub downstream: Option<PathBuf>,
    /// Evaluate runs lacking cached eval results.
    #[arg(long)]
    pub eval: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving `gradcheck.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GeomCheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    /// Train config supplying augmentation and sampling settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pixel magnification of the written images.
    #[arg(long, default_value_t = 4)]
    pub zoom: usize,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Write images as PPM plus a JSON-lines ground-truth file.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return EXIT_USAGE;
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("worker pool already initialized");
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_USAGE
            }
        }
    }
}

/// Installs the logger reading `SCRL_LOG` (default `info`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("SCRL_LOG", "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp_secs().try_init();
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>() >> 1;
        log::info!("no --seed given; using seed {s}");
        s
    })
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GeomCheck(a) => geom_check(a),
        Command::Dataset {
            command: DatasetCommand::Dump(a),
        } => dump(a),
    }
}

/// Whether a config file assigns `key`.
fn assigns(text: &str, key: &str) -> bool {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .filter_map(|l| l.split_once('='))
        .any(|(k, _)| k.trim() == key)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let (mut cfg, has_seed) = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            (TrainConfig::parse(&text)?, assigns(&text, "seed"))
        }
        None => (TrainConfig::default(), false),
    };
    let mut override_seed = false;
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
        override_seed |= k.trim() == "seed";
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    } else if !has_seed && !override_seed {
        cfg.seed = resolve_seed(None);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<i32> {
    let mut trainer = match &a.resume {
        Some(p) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(p)?)?;
            log::info!("resuming at step {} from {}", t.step, p.display());
            t
        }
        None => {
            let cfg = train_config(&a)?;
            log::info!("training {} for {} steps, seed {}", cfg.mode.as_str(), cfg.total_steps(), cfg.seed);
            Trainer::new(cfg)?
        }
    };
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        log::debug!("interrupt handler not installed: {e}");
    }
    let summary = trainer.run(&a.out, &stop, a.max_steps)?;
    if summary.interrupted {
        log::info!("stopped at step {}; checkpoint written to {}", summary.steps, a.out.display());
    } else {
        log::info!("finished {} steps; final loss {:?}", summary.steps, summary.final_loss);
    }
    Ok(EXIT_OK)
}

fn eval(a: EvalArgs) -> Result<i32> {
    let protocol: Protocol = a.protocol.parse()?;
    let mut cfg = EvalConfig {
        seed: resolve_seed(a.seed),
        ..EvalConfig::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let ck = Checkpoint::load(&a.ckpt)?;
    let (net, tcfg) = load_online(&ck)?;
    let (train, test) = match &a.data {
        Some(dir) => {
            let mut all = load_dataset(dir)?;
            if !(0.0..1.0).contains(&a.train_fraction) || a.train_fraction == 0.0 {
                return Err(Error::Config("--train-fraction must lie in (0, 1)".into()));
            }
            let n_train = ((all.len() as f64) * a.train_fraction).round() as usize;
            if n_train == 0 || n_train >= all.len() {
                return Err(Error::Dataset(format!("{} images cannot be split for a probe", all.len())));
            }
            let test = all.split_off(n_train);
            (all, test)
        }
        None => cfg.datasets(&tcfg.scene()),
    };
    let id = format!("{}#{:016x}", a.ckpt.display(), fnv1a(&ck.to_bytes()));
    let report = linear_eval(&mut NetworkBackbone::new(net), &train, &test, protocol, &cfg, &id)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    eprintln!("{}", report.summary());
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_atomic(&out.join(eval_file(protocol)), json.as_bytes())?;
    }
    Ok(EXIT_OK)
}

pub fn eval_file(protocol: Protocol) -> &'static str {
    match protocol {
        Protocol::Roi => "eval_roi.json",
        Protocol::Global => "eval_global.json",
    }
}

fn report(a: ReportArgs) -> Result<i32> {
    let eval_cfg = a.eval.then(|| EvalConfig {
        seed: resolve_seed(a.seed),
        ..EvalConfig::default()
    });
    let downstream = match &a.downstream {
        Some(p) => read_downstream(p)?,
        None => Default::default(),
    };
    let mut rows: Vec<AblationRow> = Vec::new();
    for dir in &a.runs {
        let mut row = collect_row(dir, eval_cfg.as_ref())?;
        row.downstream = downstream.get(&row.run).copied();
        rows.push(row);
    }
    let rep = ablation_report(rows);
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_atomic(&a.out.join("report.md"), rep.markdown.as_bytes())?;
    write_atomic(&a.out.join("report.csv"), rep.csv.as_bytes())?;
    let curves: Vec<Vec<f64>> = loss_curves(&a.runs).into_iter().map(|(_, c)| c).collect();
    if !curves.is_empty() {
        line_plot(&curves, 640, 360).write_png(&a.out.join("loss_curves.png"))?;
    }
    let accs: Vec<f64> = rep.rows.iter().map(|r| r.roi_accuracy.unwrap_or(0.0)).collect();
    if !accs.is_empty() {
        bar_plot(&accs, 640, 360).write_png(&a.out.join("roi_accuracy.png"))?;
    }
    let mut legend = String::from("index,run,config\n");
    for (i, r) in rep.rows.iter().enumerate() {
        legend.push_str(&format!("{i},{},\"{}\"\n", r.run, r.key()));
    }
    write_atomic(&a.out.join("plot_legend.csv"), legend.as_bytes())?;
    print!("{}", rep.markdown);
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs) -> Result<i32> {
    let seed = resolve_seed(a.seed);
    let cases = gradsuite::run_suite(seed)?;
    let mut ok = true;
    for c in &cases {
        let pass = c.passed();
        ok &= pass;
        println!(
            "{} {:<40} max rel error {:.3e} over {} coordinates",
            if pass { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_error,
            c.checked
        );
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let json = serde_json::to_string_pretty(&cases)?;
        write_atomic(&out.join("gradcheck.json"), json.as_bytes())?;
    }
    Ok(if ok { EXIT_OK } else { EXIT_NUMERIC })
}

fn geom_check(a: GeomCheckArgs) -> Result<i32> {
    let seed = resolve_seed(a.seed);
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    cfg.validate()?;
    if a.zoom == 0 {
        return Err(Error::Config("--zoom must be at least 1".into()));
    }
    let images = generate_dataset(a.samples, &cfg.scene(), seed);
    let aug = train_augment(&cfg);
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut written = 0;
    for (i, img) in images.iter().enumerate() {
        let mut rng = child_rng(seed, &[i as u64]);
        let Some(p) = prepare_image(img, &cfg, &aug, &mut rng) else {
            log::warn!("sample {i}: no valid view pair");
            continue;
        };
        let z = a.zoom as f64;
        let mut c1 = Canvas::from_tensor(&p.v1)?.upscale(a.zoom);
        let mut c2 = Canvas::from_tensor(&p.v2)?.upscale(a.zoom);
        let mut src = Canvas::from_tensor(&img.pixels)?.upscale(a.zoom);
        for (j, ((b1, b2), b)) in p.pairs.iter().zip(&p.source_boxes).enumerate() {
            let col = palette(j);
            c1.draw_box(&zoom(b1, z), col);
            c2.draw_box(&zoom(b2, z), col);
            src.draw_box(&zoom(b, z), col);
        }
        src.draw_box(&zoom(&p.geom1.crop, z), [255, 255, 255]);
        src.draw_box(&zoom(&p.geom2.crop, z), [0, 0, 0]);
        c1.write_ppm(&a.out.join(format!("sample_{i:03}_view1.ppm")))?;
        c2.write_ppm(&a.out.join(format!("sample_{i:03}_view2.ppm")))?;
        src.write_ppm(&a.out.join(format!("sample_{i:03}_source.ppm")))?;
        written += 1;
    }
    println!("wrote {written} annotated sample(s) to {}", a.out.display());
    Ok(EXIT_OK)
}

fn zoom(b: &Box, z: f64) -> Box {
    Box {
        x: b.x * z,
        y: b.y * z,
        w: b.w * z,
        h: b.h * z,
    }
}

fn dump(a: DumpArgs) -> Result<i32> {
    let seed = resolve_seed(a.seed);
    let scene = SceneConfig {
        width: a.size,
        height: a.size,
        ..SceneConfig::default()
    };
    scene.validate()?;
    let images = generate_dataset(a.count, &scene, seed);
    dump_dataset(&images, &a.out)?;
    println!("wrote {} images to {}", images.len(), a.out.display());
    Ok(EXIT_OK)
}

/// Loads the report of a previous `eval --out` call.
pub fn read_eval(dir: &Path, protocol: Protocol) -> Result<EvalReport> {
    let p = dir.join(eval_file(protocol));
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}
