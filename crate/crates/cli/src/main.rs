//! `hsims` command-line tool.
//!
//! Cubes and label rasters are addressed by their JSON header path; the raw
//! payload sits next to it with the extension `.bin`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hsims::eval::evaluate;
use hsims::io::{
    default_palette, load_cube, load_ground_truth, save_cube, save_ground_truth, save_label_png, save_scores_csv,
    GroundTruth, ScoreRow,
};
use hsims::pipeline::{segment, IndicatorMode, PipelineConfig};
use hsims::preprocess::{apply_mnf, fit_mnf_with, normalize_cube, MnfOptions};
use hsims::synth::{generate, SynthSpec};

#[derive(Parser)]
#[command(name = "hsims", version, about = "Unsupervised hyperspectral image segmentation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "HSIMS_THREADS")]
    threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic cube from a JSON scene description.
    Synth {
        spec: PathBuf,
        /// Writes <prefix>.cube.{json,bin} and <prefix>.gt.{json,bin}.
        out_prefix: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Normalize a cube and reduce it to its highest-SNR MNF components.
    Mnf {
        cube: PathBuf,
        out: PathBuf,
        #[arg(long)]
        kept: usize,
        /// Scale applied to the second moment of neighbor differences.
        #[arg(long, default_value_t = MnfOptions::default().noise_scale)]
        noise_scale: f64,
        #[arg(long)]
        force: bool,
    },
    /// Segment a cube.
    Segment(SegmentArgs),
    /// Score a label raster against ground truth.
    Eval {
        labels: PathBuf,
        gt: PathBuf,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        /// Seed recorded in the CSV row.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Robust,
    Euclidean,
}

#[derive(Args)]
struct SegmentArgs {
    cube: PathBuf,
    /// JSON file with pipeline settings; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of segments.
    #[arg(long)]
    k: Option<usize>,
    /// Weight of the total-variation term (> 0).
    #[arg(long)]
    lambda: Option<f64>,
    /// Floor on the per-direction standard deviation of a segment.
    #[arg(long)]
    eps: Option<f64>,
    /// Smoothing inside the square root [default: 1e-2].
    #[arg(long)]
    eta: Option<f64>,
    /// Seed of the k-means initialization [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Region cost [default: robust].
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Reduce to this many MNF components before segmenting.
    #[arg(long)]
    mnf_kept: Option<usize>,
    /// Outer iterations [default: 20].
    #[arg(long)]
    outer_max: Option<usize>,
    /// Labeling solver iterations per outer step [default: 1000].
    #[arg(long)]
    pdhg_max_iter: Option<usize>,
    /// Mean/covariance fixed-point iterations per outer step [default: 20].
    #[arg(long)]
    fp_max_iter: Option<usize>,
    /// Input is already normalized (e.g. written by `hsims mnf`).
    #[arg(long)]
    no_normalize: bool,
    #[arg(long)]
    out_png: Option<PathBuf>,
    /// Label raster header path (u16, same format as ground truth).
    #[arg(long)]
    out_labels: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

/// Failure classes, reported as distinct exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Category {
    Input = 3,
    Io = 4,
    Numerical = 5,
    Refused = 6,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Input => "invalid input",
            Category::Io => "i/o error",
            Category::Numerical => "numerical failure",
            Category::Refused => "refused",
        })
    }
}

#[derive(Debug)]
struct Refusal(String);

impl fmt::Display for Refusal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Refusal {}

fn categorize(err: &anyhow::Error) -> Category {
    for cause in err.chain() {
        if cause.is::<Refusal>() {
            return Category::Refused;
        }
        if let Some(e) = cause.downcast_ref::<hsims::Error>() {
            return match e {
                hsims::Error::Io { .. } | hsims::Error::Png(_) => Category::Io,
                hsims::Error::Degenerate(_) | hsims::Error::EmptySegment(_) => Category::Numerical,
                _ => Category::Input,
            };
        }
        if cause.is::<std::io::Error>() {
            return Category::Io;
        }
    }
    Category::Input
}

fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

fn refuse_existing(paths: &[&Path], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    if let Some(p) = paths.iter().find(|p| p.exists()) {
        return Err(Refusal(format!("{} exists; pass --force to overwrite", p.display())).into());
    }
    Ok(())
}

fn cmd_synth(spec_path: &Path, prefix: &Path, force: bool) -> Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SynthSpec =
        serde_json::from_str(&text).with_context(|| format!("malformed scene description {}", spec_path.display()))?;
    let (cube_h, gt_h) = (with_suffix(prefix, ".cube.json"), with_suffix(prefix, ".gt.json"));
    let (cube_d, gt_d) = (payload_path(&cube_h), payload_path(&gt_h));
    refuse_existing(&[&cube_h, &cube_d, &gt_h, &gt_d], force)?;

    let (cube, gt) = generate(&spec)?;
    save_cube(&cube, &cube_h, &cube_d)?;
    save_ground_truth(&gt, &gt_h, &gt_d)?;
    println!(
        "wrote {} ({}x{}x{}) and {}",
        cube_h.display(),
        cube.height(),
        cube.width(),
        cube.bands(),
        gt_h.display()
    );
    Ok(())
}

fn cmd_mnf(input: &Path, out: &Path, kept: usize, noise_scale: f64, force: bool) -> Result<()> {
    let out_data = payload_path(out);
    refuse_existing(&[out, &out_data], force)?;
    let cube = load_cube(input, payload_path(input))?;
    if kept == 0 || kept > cube.bands() {
        bail!(hsims::Error::InvalidParameter(format!(
            "--kept must be in 1..={}, got {kept}",
            cube.bands()
        )));
    }
    let normalized = normalize_cube(&cube)?;
    let model = fit_mnf_with(&normalized, kept, &MnfOptions { noise_scale })?;
    let reduced = apply_mnf(&model, &normalized)?;
    println!("component  snr");
    for (r, snr) in model.snrs.iter().enumerate() {
        let marker = if r < kept { "*" } else { " " };
        println!("{:>9}{marker} {snr:.6e}", r + 1);
    }
    save_cube(&reduced, out, &out_data)?;
    println!("wrote {} ({} of {} components)", out.display(), kept, cube.bands());
    Ok(())
}

fn pipeline_config(args: &SegmentArgs) -> Result<PipelineConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<PipelineConfig>(&text)
                .map_err(|e| hsims::Error::InvalidParameter(e.to_string()))
                .with_context(|| format!("malformed config {}", path.display()))?
        }
        None => {
            let missing: Vec<&str> = [("--k", args.k.is_none()), ("--lambda", args.lambda.is_none()), ("--eps", args.eps.is_none())]
                .into_iter()
                .filter_map(|(name, absent)| absent.then_some(name))
                .collect();
            if !missing.is_empty() {
                bail!(hsims::Error::InvalidParameter(format!(
                    "missing {} (or give --config)",
                    missing.join(", ")
                )));
            }
            PipelineConfig::new(0, 0.0, 0.0)
        }
    };
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(lambda) = args.lambda {
        cfg.lambda = lambda;
    }
    if let Some(eps) = args.eps {
        cfg.eps = eps;
    }
    if let Some(eta) = args.eta {
        cfg.eta = eta;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.indicator_mode = match mode {
            Mode::Robust => IndicatorMode::RobustAnisotropic,
            Mode::Euclidean => IndicatorMode::SquaredEuclidean,
        };
    }
    if args.mnf_kept.is_some() {
        cfg.mnf_kept = args.mnf_kept;
    }
    if let Some(n) = args.outer_max {
        cfg.outer_max = n;
    }
    if let Some(n) = args.pdhg_max_iter {
        cfg.pdhg_max_iter = n;
    }
    if let Some(n) = args.fp_max_iter {
        cfg.fp_max_iter = n;
    }
    // the TV-regularized model needs a strictly positive weight
    if !(cfg.lambda > 0.0) {
        bail!(hsims::Error::InvalidParameter(format!("lambda must be positive, got {}", cfg.lambda)));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_segment(args: &SegmentArgs) -> Result<()> {
    let cfg = pipeline_config(args)?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    if let Some(p) = &args.out_png {
        outputs.push(p.clone());
    }
    if let Some(p) = &args.out_labels {
        outputs.push(p.clone());
        outputs.push(payload_path(p));
    }
    refuse_existing(&outputs.iter().map(PathBuf::as_path).collect::<Vec<_>>(), args.force)?;

    let raw = load_cube(&args.cube, payload_path(&args.cube))?;
    let mut cube = if args.no_normalize { raw } else { normalize_cube(&raw)? };
    if let Some(kept) = cfg.mnf_kept {
        let model = fit_mnf_with(&cube, kept, &MnfOptions::default())?;
        cube = apply_mnf(&model, &cube)?;
    }
    let seg = segment(&cube, &cfg)?;

    println!("iter  objective        change      pdhg  sizes");
    for r in &seg.trace {
        let change = r.mean_change.map_or_else(|| "-".to_string(), |c| format!("{c:.4e}"));
        println!(
            "{:>4}  {:<15.8e}  {:<10}  {:>4}  {:?}",
            r.iteration, r.objective, change, r.pdhg_iterations, r.segment_sizes
        );
    }
    println!(
        "{} after {} outer iterations",
        if seg.converged { "converged" } else { "stopped" },
        seg.iterations()
    );

    let ids: Vec<u16> = seg.label_ids().into_iter().map(|l| l as u16).collect();
    if let Some(path) = &args.out_labels {
        let raster = GroundTruth::new(cube.height(), cube.width(), ids.clone())?;
        save_ground_truth(&raster, path, payload_path(path))?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = &args.out_png {
        save_label_png(path, &ids, cube.height(), cube.width(), &default_palette(cfg.k))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_eval(labels: &Path, gt: &Path, out_csv: Option<&Path>, seed: u64) -> Result<()> {
    let pred = load_ground_truth(labels, payload_path(labels))?;
    let truth = load_ground_truth(gt, payload_path(gt))?;
    if (pred.height, pred.width) != (truth.height, truth.width) {
        bail!(hsims::Error::Shape(format!(
            "labels are {}x{}, ground truth {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let k = pred.max_label().max(truth.max_label()) as usize;
    let report = evaluate(&pred.labels, &truth, k)?;

    println!("overall accuracy   {:.6}", report.oa);
    println!("average accuracy   {:.6}", report.aa);
    println!("kappa              {:.6}", report.kappa);
    println!("matching (predicted -> ground truth):");
    for (p, g) in report.permutation.iter().enumerate() {
        println!("  {:>3} -> {:>3}", p + 1, g + 1);
    }
    if let Some(path) = out_csv {
        let row = ScoreRow { oa: report.oa, aa: report.aa, kappa: report.kappa, seed };
        save_scores_csv(&[row], path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(hsims::Error::InvalidParameter("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Synth { spec, out_prefix, force } => cmd_synth(spec, out_prefix, *force),
        Command::Mnf { cube, out, kept, noise_scale, force } => cmd_mnf(cube, out, *kept, *noise_scale, *force),
        Command::Segment(args) => cmd_segment(args),
        Command::Eval { labels, gt, out_csv, seed } => cmd_eval(labels, gt, out_csv.as_deref(), *seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = categorize(&err);
            eprintln!("error ({category}): {err:#}");
            ExitCode::from(category as u8)
        }
    }
}
