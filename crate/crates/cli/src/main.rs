use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fod_forge_core::config::{PipelineConfig, SegmentMethod};
use fod_forge_core::dataset::Strategy;
use fod_forge_core::error::Result;
use fod_forge_core::evalmetrics::{self, DetectionParams};
use fod_forge_core::labeling::Connectivity;
use fod_forge_core::pipeline::{Pipeline, RunSummary, Stage};
use fod_forge_core::plot;

#[derive(Parser)]
#[command(name = "fod-forge", version, about = "Simulated CT training data for X-ray foreign-object detection")]
struct Cli {
    /// Worker threads (0 = all cores). Outputs do not depend on this.
    #[arg(long, global = true, env = "FOD_FORGE_THREADS", default_value_t = 0)]
    threads: usize,
    /// Print stage progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML, or JSON by extension). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Otsu,
    OtsuGlobal,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Workflow,
    Manual,
    Mixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConnArg {
    Four,
    Eight,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms.
    Phantom(Common),
    /// Simulate corrected radiograph stacks.
    Scan(Common),
    /// SIRT reconstructions from the scans.
    Recon(Common),
    /// Threshold the reconstructions into 3D foreign-object masks.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Fixed threshold in 1/cm (implies --method fixed).
        #[arg(long)]
        theta: Option<f64>,
        /// Additional thresholds to segment, comma separated.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
    },
    /// Project segmentations into per-angle 2D masks.
    Gt(Common),
    /// Assemble train/val and test sets.
    Dataset {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Number of training objects included.
        #[arg(long)]
        objects: Option<usize>,
        /// Total training radiographs.
        #[arg(long)]
        total: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score predicted masks against targets.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        eta: f64,
        #[arg(long, default_value_t = 0.3)]
        delta: f64,
        /// Minimum component size in pixels (default scales with image size).
        #[arg(long)]
        min_size: Option<usize>,
        #[arg(long, value_enum, default_value = "four")]
        connectivity: ConnArg,
        /// Directory for report.json and report.csv.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Plot metrics against x from `X=REPORT.json` pairs (repeat an x for a std band).
    Plot {
        #[arg(required = true, value_parser = parse_point)]
        points: Vec<(f64, PathBuf)>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run every stage (or one with --only), reusing cached outputs.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        only: Option<Stage>,
    },
}

fn parse_point(s: &str) -> std::result::Result<(f64, PathBuf), String> {
    let (x, p) = s.split_once('=').ok_or_else(|| format!("expected X=PATH, got `{s}`"))?;
    let x: f64 = x.trim().parse().map_err(|e| format!("bad x `{x}`: {e}"))?;
    Ok((x, PathBuf::from(p)))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn run_pipeline(config: PipelineConfig, out: &Path, only: Option<Stage>, verbose: bool) -> Result<RunSummary> {
    let mut p = Pipeline::new(config, out)?;
    p.quiet = !verbose;
    let summary = p.run(only)?;
    for s in &summary.stages {
        if let Some(stage) = s.stage {
            println!("{}: computed {}, cached {}", stage.name(), s.computed, s.cached);
        }
    }
    if only.is_none() || only == Some(Stage::Gt) {
        if let Some(j) = summary.mean_jaccard {
            println!("mean workflow-vs-absolute jaccard: {j:.4}");
        }
    }
    if let Some(e) = &summary.eval {
        println!(
            "eval: accuracy {:.4}, detection {:.2}%, false positives {:.2}%, jaccard {:.4} over {} images",
            e.mean_accuracy, e.detection_rate, e.false_positive_rate, e.mean_jaccard, e.n_images
        );
    }
    Ok(summary)
}

fn stage(common: Common, stage: Stage, verbose: bool) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    run_pipeline(cfg, &common.out, Some(stage), verbose).map(drop)
}

fn execute(cli: Cli) -> Result<()> {
    let verbose = cli.verbose;
    match cli.command {
        Command::Phantom(c) => stage(c, Stage::Phantom, verbose),
        Command::Scan(c) => stage(c, Stage::Scan, verbose),
        Command::Recon(c) => stage(c, Stage::Recon, verbose),
        Command::Gt(c) => stage(c, Stage::Gt, verbose),
        Command::Segment { common, method, theta, sweep } => {
            let mut cfg = load_config(common.config.as_deref())?;
            let seg = &mut cfg.segmentation;
            if let Some(t) = theta {
                seg.theta = Some(t);
                seg.method = SegmentMethod::Fixed;
            }
            if let Some(m) = method {
                seg.method = match m {
                    MethodArg::Otsu => SegmentMethod::Otsu,
                    MethodArg::OtsuGlobal => SegmentMethod::OtsuGlobal,
                    MethodArg::Fixed => SegmentMethod::Fixed,
                };
            }
            if !sweep.is_empty() {
                seg.sweep = sweep;
            }
            run_pipeline(cfg, &common.out, Some(Stage::Segment), verbose).map(drop)
        }
        Command::Dataset { common, strategy, objects, total, seed } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = strategy {
                cfg.dataset.strategy = match s {
                    StrategyArg::Workflow => Strategy::Workflow,
                    StrategyArg::Manual => Strategy::Manual,
                    StrategyArg::Mixed => Strategy::Mixed,
                };
            }
            if let Some(n) = objects {
                cfg.dataset.included = n;
            }
            if let Some(t) = total {
                cfg.dataset.total = t;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            run_pipeline(cfg, &common.out, Some(Stage::Dataset), verbose).map(drop)
        }
        Command::Eval { pred, target, eta, delta, min_size, connectivity, out } => {
            let params = DetectionParams {
                eta,
                delta,
                min_component_px: min_size.unwrap_or(0),
                connectivity: match connectivity {
                    ConnArg::Four => Connectivity::Four,
                    ConnArg::Eight => Connectivity::Eight,
                },
            };
            let shape = evalmetrics::first_mask_shape(&target)?;
            let params = DetectionParams {
                min_component_px: min_size
                    .or(shape.map(|(r, c)| evalmetrics::min_component_px_for(r, c)))
                    .unwrap_or(params.min_component_px),
                ..params
            };
            params.validate()?;
            let report = evalmetrics::evaluate_testset(&pred, &target, &params)?;
            report.write_json(&out.join("report.json"))?;
            report.write_csv(&out.join("report.csv"))?;
            println!(
                "accuracy {:.4}, detection {:.2}%, false positives {:.2}%, jaccard {:.4} over {} images",
                report.mean_accuracy, report.detection_rate, report.false_positive_rate, report.mean_jaccard, report.n_images
            );
            Ok(())
        }
        Command::Plot { points, out } => {
            let mut data = Vec::with_capacity(points.len());
            for (x, path) in &points {
                data.push((*x, plot::read_metrics(path)?));
            }
            let curves = plot::plot_results(&data, &out)?;
            println!("{} curve points written to {}", curves.len(), out.display());
            Ok(())
        }
        Command::Pipeline { common, only } => {
            let cfg = load_config(common.config.as_deref())?;
            run_pipeline(cfg, &common.out, only, verbose).map(drop)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}
