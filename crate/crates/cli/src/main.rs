use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use thiserror::Error;

use vseg_core::bundle::indexed_files;
use vseg_core::objective::OuterRecord;
use vseg_core::optim::OptimStatus;
use vseg_core::oracle::{oracle_segment_with, OracleMode};
use vseg_core::pipeline::{self, Timings};
use vseg_core::segmentation::contour_f;
use vseg_core::segmentation::{default_tolerance, jaccard};
use vseg_core::tensor::{read_mask, write_mask_image, write_tensor};
use vseg_core::{synth, BinaryMask, PipelineConfig, Resolution, SceneSpec, Tensor, VideoBundle};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] vseg_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "vseg", version, about = "Unsupervised video object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment a bundle directory and write soft masks, binary masks and a report.
    Segment {
        /// Bundle directory with `features/`, `flows/` and optional `frames/`, `gt/`.
        bundle: PathBuf,
        /// Output directory.
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score predicted masks against ground truth.
    Eval {
        /// Directory of `mask_%05d.pgm` files.
        pred: PathBuf,
        /// Directory of `gt_%05d.pgm` (or `.vseg`) files.
        gt: PathBuf,
        /// Boundary tolerance in pixels; defaults to 0.75% of the diagonal.
        #[arg(long)]
        tolerance: Option<usize>,
    },
    /// Write a synthetic bundle described by a JSON scene spec.
    Synth {
        /// Scene spec (JSON).
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare the pipeline with the dense spectral reference on a small bundle.
    Oracle {
        bundle: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::FrameDeflated)]
        mode: ModeArg,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Appearance weight.
    #[arg(long, default_value_t = 1.0)]
    alpha_psi: f64,
    /// Flow weight.
    #[arg(long, default_value_t = 1.0)]
    alpha_phi: f64,
    /// Affinity threshold.
    #[arg(long, default_value_t = 0.1)]
    threshold_s: f64,
    /// Weight of the anchor term.
    #[arg(long, default_value_t = 10.0)]
    lambda: f64,
    /// Temporal horizon of the consistency terms.
    #[arg(long, default_value_t = 1)]
    horizon: usize,
    /// Outer optimizer iterations.
    #[arg(long, default_value_t = 5)]
    iters: usize,
    /// Reliability percentile.
    #[arg(long, default_value_t = 90.0)]
    percentile: f64,
    /// Seed of the power-iteration start vector.
    #[arg(long, default_value_t = PipelineConfig::default().affinity.pic_seed)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ResolutionArg::Flow)]
    resolution: ResolutionArg,
    /// Return the initial masks without refinement.
    #[arg(long)]
    no_optimize: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ResolutionArg {
    Flow,
    Feature,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    FrameDeflated,
    Global,
}

impl ConfigArgs {
    fn to_config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        cfg.affinity.alpha_psi = self.alpha_psi;
        cfg.affinity.alpha_phi = self.alpha_phi;
        cfg.affinity.threshold_s = self.threshold_s;
        cfg.affinity.pic_seed = self.seed;
        cfg.objective.lambda = self.lambda;
        cfg.objective.horizon_t = self.horizon;
        cfg.objective.max_outer_iters = self.iters;
        cfg.percentile_k = self.percentile;
        cfg.resolution = match self.resolution {
            ResolutionArg::Flow => Resolution::Flow,
            ResolutionArg::Feature => Resolution::Feature,
        };
        cfg.skip_optimization = self.no_optimize;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct Report<'a> {
    bundle: &'a Path,
    n_frames: usize,
    height: usize,
    width: usize,
    lambda: f64,
    percentile_k: f64,
    config: &'a PipelineConfig,
    timings: Timings,
    degenerate_frames: &'a [usize],
    status: Option<OptimStatus>,
    trace: &'a [OuterRecord],
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn cmd_segment(bundle_dir: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = args.to_config()?;
    let bundle = VideoBundle::load(bundle_dir)?;
    let seg = pipeline::run(&bundle, &cfg)?;
    create_dir(out)?;
    let grid = seg.grid;
    for (p, (soft, mask)) in seg.soft.iter().zip(&seg.binary).enumerate() {
        let values = soft.values().iter().map(|&v| v as f32).collect();
        let t = Tensor::new(vec![grid.height, grid.width], values)?;
        write_tensor(out.join(format!("soft_{p:05}.vseg")), &t)?;
        write_mask_image(out.join(format!("mask_{p:05}.pgm")), mask)?;
    }
    let report = Report {
        bundle: bundle_dir,
        n_frames: bundle.n_frames(),
        height: grid.height,
        width: grid.width,
        lambda: cfg.objective.lambda,
        percentile_k: cfg.percentile_k,
        config: &cfg,
        timings: seg.timings,
        degenerate_frames: &seg.init.degenerate,
        status: seg.status,
        trace: &seg.trace,
    };
    let path = out.join("report.json");
    let json = serde_json::to_string_pretty(&report).map_err(|source| CliError::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json + "\n").map_err(|source| CliError::Io { path, source })?;
    info!(
        "wrote {} masks to {} (init {:.3} s/frame, optimize {:.3} s/frame)",
        seg.binary.len(),
        out.display(),
        seg.timings.init_s_per_frame,
        seg.timings.optimize_s_per_frame
    );
    Ok(())
}

fn read_mask_dir(dir: &Path, prefixes: &[&str]) -> Result<Vec<BinaryMask>> {
    if !dir.is_dir() {
        return Err(vseg_core::Error::MissingInput(format!("directory {} not found", dir.display())).into());
    }
    for prefix in prefixes {
        for ext in ["pgm", "vseg"] {
            let files = indexed_files(dir, prefix, ext)?;
            if !files.is_empty() {
                return files.iter().map(|(_, p)| Ok(read_mask(p)?)).collect();
            }
        }
    }
    Err(vseg_core::Error::MissingInput(format!("no masks in {}", dir.display())).into())
}

fn cmd_eval(pred_dir: &Path, gt_dir: &Path, tolerance: Option<usize>) -> Result<()> {
    let pred = read_mask_dir(pred_dir, &["mask_", "gt_"])?;
    let gt = read_mask_dir(gt_dir, &["gt_", "mask_"])?;
    if pred.len() != gt.len() {
        return Err(CliError::Usage(format!(
            "{} predicted masks but {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    println!("frame,J,F");
    let (mut sum_j, mut sum_f) = (0.0, 0.0);
    for (p, (pm, gm)) in pred.iter().zip(&gt).enumerate() {
        let pm = pm.resized(gm.grid());
        let tol = tolerance.unwrap_or_else(|| default_tolerance(gm.grid()));
        let j = jaccard(&pm, gm)?;
        let f = contour_f(&pm, gm, tol)?.contour_f;
        println!("{p},{j:.6},{f:.6}");
        sum_j += j;
        sum_f += f;
    }
    let n = gt.len().max(1) as f64;
    println!("mean,{:.6},{:.6}", sum_j / n, sum_f / n);
    Ok(())
}

fn cmd_synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|source| CliError::Io {
        path: spec_path.to_path_buf(),
        source,
    })?;
    let mut spec: SceneSpec = serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: spec_path.to_path_buf(),
        source,
    })?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let bundle = synth::generate(&spec)?;
    create_dir(out)?;
    bundle.save(out)?;
    info!("wrote {} frames to {}", bundle.n_frames(), out.display());
    Ok(())
}

fn cmd_oracle(bundle_dir: &Path, mode: ModeArg, args: &ConfigArgs) -> Result<()> {
    let cfg = args.to_config()?;
    let bundle = VideoBundle::load(bundle_dir)?;
    let mode = match mode {
        ModeArg::FrameDeflated => OracleMode::FrameDeflated,
        ModeArg::Global => OracleMode::Global,
    };
    let oracle = oracle_segment_with(&bundle, &cfg, mode)?;
    let seg = pipeline::run(&bundle, &cfg)?;
    println!("eigenvalue,{:.6}", oracle.eigenvalue);
    println!("gap,{:.6}", oracle.gap);
    if oracle.degenerate {
        println!("degenerate,true");
    }
    println!("frame,agreement");
    let mut total = 0.0;
    for (p, (o, m)) in oracle.masks.iter().zip(&seg.binary).enumerate() {
        let a = m.resized(o.grid()).agreement(o)?;
        println!("{p},{:.2}", 100.0 * a);
        total += a;
    }
    let n = oracle.masks.len().max(1) as f64;
    println!("agreement,{:.2}%", 100.0 * total / n);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Segment { bundle, out, config } => cmd_segment(bundle, out, config),
        Command::Eval { pred, gt, tolerance } => cmd_eval(pred, gt, *tolerance),
        Command::Synth { spec, out, seed } => cmd_synth(spec, out, *seed),
        Command::Oracle { bundle, mode, config } => cmd_oracle(bundle, *mode, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
