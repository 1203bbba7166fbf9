use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use retreg::enhancement::Modality;
use retreg::matching::{InvariantMetric, MatchFilter};
use retreg::phantom::{self, VesselTreeSpec};
use retreg::pipeline::{self, Approach, Outcome, PipelineConfig, OUT_ENV};
use retreg::segmentation::{EntropyForm, SegmentationParams};
use retreg::transform::Interpolation;
use retreg::io;

/// Retinal fundus image-pair registration.
#[derive(Parser, Debug)]
#[command(name = "retreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register <img2> onto <img1> and write the artifacts to the output directory.
    Register(RegisterArgs),
    /// Detect bifurcation features of one image and print them as JSON.
    Features(FeaturesArgs),
    /// Render a phantom from a vessel-tree spec file.
    Phantom(PhantomArgs),
}

#[derive(Args, Debug)]
struct RegisterArgs {
    img1: PathBuf,
    img2: PathBuf,
    /// JSON config file with the same keys as the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// 1 = colour retinography, 2 = red-free, 3 = angiography.
    #[arg(long)]
    modality1: Option<Modality>,
    #[arg(long)]
    modality2: Option<Modality>,
    /// 1 = mutual information, 2 = invariants.
    #[arg(long)]
    approach: Option<Approach>,
    #[arg(long, value_name = "baseline|mutual")]
    match_filter: Option<MatchFilter>,
    #[arg(long, value_name = "raw|zscore")]
    metric: Option<InvariantMetric>,
    #[arg(long, value_name = "nearest|bilinear|bicubic")]
    interpolation: Option<Interpolation>,
    /// Threshold criterion over the co-occurrence quadrants.
    #[arg(long, value_name = "sectional|mass")]
    entropy_form: Option<EntropyForm>,
    /// Inlier distance in pixels.
    #[arg(long)]
    ransac_threshold: Option<f64>,
    #[arg(long)]
    ransac_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write intermediate masks, feature overlays and stage timings.
    #[arg(long)]
    debug: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RegisterArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = pipeline::load_config(self.config.as_deref())?;
        macro_rules! take {
            ($($f:ident),+) => { $(if let Some(v) = self.$f.clone() { c.$f = v.into(); })+ };
        }
        take!(modality1, modality2, approach, match_filter, metric, interpolation, entropy_form);
        take!(ransac_threshold, ransac_iters, seed);
        if self.out.is_some() {
            c.out = self.out.clone();
        }
        c.debug |= self.debug;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    img: PathBuf,
    #[arg(long)]
    modality: Modality,
    #[arg(long, value_name = "sectional|mass", default_value_t)]
    entropy_form: EntropyForm,
    /// Write the intermediate rasters to the output directory.
    #[arg(long)]
    debug: bool,
    /// Output directory for debug rasters.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn out_dir(out: Option<PathBuf>) -> PathBuf {
    let c = PipelineConfig {
        out,
        ..PipelineConfig::default()
    };
    c.out_dir(std::env::var(OUT_ENV).ok().as_deref())
}

fn register(args: RegisterArgs) -> Result<ExitCode> {
    let config = args.config()?;
    let dir = out_dir(config.out.clone());
    let report = pipeline::register_pair(&args.img1, &args.img2, &config, &dir)?;
    eprintln!(
        "features {}/{}, matches {}, inliers {}",
        report.features[0], report.features[1], report.initial_matches, report.inliers
    );
    match &report.outcome {
        Outcome::Registered => {
            eprintln!(
                "registered ({:?}), mean residual {:.3} px; output in {}",
                report.model_kind.expect("set on success"),
                report.residual_mean.unwrap_or(0.0),
                dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Outcome::Failed { cause, message } => {
            eprintln!("registration failed ({cause}): {message}");
            Ok(ExitCode::from(2))
        }
    }
}

fn features(args: FeaturesArgs) -> Result<ExitCode> {
    let dir = args.debug.then(|| out_dir(args.out.clone()));
    let seg = SegmentationParams {
        entropy_form: args.entropy_form,
        ..SegmentationParams::default()
    };
    let json = pipeline::detect_features(&args.img, args.modality, &seg, dir.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(ExitCode::SUCCESS)
}

fn phantom(args: PhantomArgs) -> Result<ExitCode> {
    let spec: VesselTreeSpec = io::read_json(&args.spec)
        .with_context(|| format!("reading phantom spec {}", args.spec.display()))?;
    let (image, truth) = phantom::render(&spec)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let dir: &Path = &args.out;
    io::save_gray_png(&image, &dir.join("phantom.png"))?;
    io::write_json(&truth, &dir.join("ground_truth.json"))?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Register(a) => register(a),
        Command::Features(a) => features(a),
        Command::Phantom(a) => phantom(a),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(1)
    })
}
