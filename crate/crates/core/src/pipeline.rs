//! End-to-end registration of an image pair and the artifacts it leaves
//! behind.
//!
//! All JSON uses `x` = column, `y` = row, 0-based (`"coords": "xy0"`).
//! Estimated models map image02 (sensed) coordinates onto image01
//! (reference) coordinates.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::descriptors::{describe, FeatureDescriptor};
use crate::enhancement::{enhance, extract_working_channel, InputImage, Modality};
use crate::error::{Error, Result};
use crate::features::{detect_bifurcations, BifurcationDetection, BifurcationFeature, ValidationParams};
use crate::io;
use crate::matching::{
    match_by_invariants, match_by_mi, ransac_inliers, InvariantMetric, MatchFilter, MatchSet,
    RansacParams,
};
use crate::par;
use crate::raster::{Dims, GrayImage, RgbImage};
use crate::segmentation::{extract_vessels, EntropyForm, SegmentationParams, VesselExtraction};
use crate::transform::{
    estimate, overlay, resample, resample_rgb, Canvas, Correspondence, Estimate, Interpolation,
    Point, Resampled, TransformKind, TransformModel,
};

pub const COORDS: &str = "xy0";
pub const DEFAULT_OUT_DIR: &str = "retreg-out";
pub const OUT_ENV: &str = "RETREG_OUT";

/// Files written on success, in writing order.
pub const ARTIFACTS: [&str; 8] = [
    "registered.png",
    "overlay.png",
    "features_01.json",
    "features_02.json",
    "matches.json",
    "inliers.json",
    "transform.json",
    "report.json",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ApproachRepr", into = "u8")]
pub enum Approach {
    /// Mutual information of the bifurcation regions.
    MutualInformation = 1,
    /// Nearest angle/width invariant.
    #[default]
    Invariants = 2,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ApproachRepr {
    Code(i64),
    Name(String),
}

impl TryFrom<ApproachRepr> for Approach {
    type Error = String;

    fn try_from(v: ApproachRepr) -> std::result::Result<Self, String> {
        match v {
            ApproachRepr::Code(c) => c.to_string().parse(),
            ApproachRepr::Name(n) => n.parse(),
        }
    }
}

impl From<Approach> for u8 {
    fn from(a: Approach) -> u8 {
        a as u8
    }
}

impl FromStr for Approach {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "mutual-information" | "mi" => Ok(Approach::MutualInformation),
            "2" | "invariants" => Ok(Approach::Invariants),
            other => Err(format!(
                "invalid approach {other:?}: expected 1 (mutual information) or 2 (invariants)"
            )),
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Approach::MutualInformation => "mutual-information",
            Approach::Invariants => "invariants",
        })
    }
}

/// Run configuration. JSON config files use the same kebab-case keys as
/// the command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct PipelineConfig {
    pub modality1: Modality,
    pub modality2: Modality,
    pub approach: Approach,
    pub match_filter: MatchFilter,
    pub metric: InvariantMetric,
    pub interpolation: Interpolation,
    pub entropy_form: EntropyForm,
    pub ransac_threshold: f64,
    pub ransac_iters: usize,
    pub seed: u64,
    pub debug: bool,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let ransac = RansacParams::default();
        PipelineConfig {
            modality1: Modality::Angiography,
            modality2: Modality::Angiography,
            approach: Approach::default(),
            match_filter: MatchFilter::default(),
            metric: InvariantMetric::default(),
            interpolation: Interpolation::default(),
            entropy_form: EntropyForm::default(),
            ransac_threshold: ransac.threshold,
            ransac_iters: ransac.iterations,
            seed: ransac.seed,
            debug: false,
            out: None,
        }
    }
}

impl PipelineConfig {
    pub fn ransac(&self) -> RansacParams {
        RansacParams {
            threshold: self.ransac_threshold,
            iterations: self.ransac_iters,
            seed: self.seed,
        }
    }

    pub fn segmentation(&self) -> SegmentationParams {
        SegmentationParams {
            entropy_form: self.entropy_form,
            ..SegmentationParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ransac_iters == 0 {
            return Err(Error::Config("ransac-iters must be at least 1".into()));
        }
        if !(self.ransac_threshold > 0.0) {
            return Err(Error::Config("ransac-threshold must be positive".into()));
        }
        Ok(())
    }

    /// Output directory: configured value, else `env_out` (the value of
    /// `RETREG_OUT`), else [`DEFAULT_OUT_DIR`].
    pub fn out_dir(&self, env_out: Option<&str>) -> PathBuf {
        self.out
            .clone()
            .or_else(|| env_out.filter(|s| !s.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

/// Parses a config file; unknown keys and invalid values are errors that
/// name the offending key.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let config: PipelineConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            parse_config(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Stage products for one image.
#[derive(Clone, Debug)]
pub struct ImageAnalysis {
    pub dims: Dims,
    pub modality: Modality,
    pub working: GrayImage,
    pub enhanced: GrayImage,
    pub extraction: VesselExtraction,
    pub detection: BifurcationDetection,
    pub descriptors: Vec<FeatureDescriptor>,
}

impl ImageAnalysis {
    pub fn features(&self) -> &[BifurcationFeature] {
        &self.detection.features
    }

    pub fn invariant_inputs(&self) -> Vec<(Point, Option<crate::descriptors::InvariantDescriptor>)> {
        self.features()
            .iter()
            .zip(&self.descriptors)
            .map(|(f, d)| (Point::from(f.index), d.invariant))
            .collect()
    }
}

/// Feature determination for one image.
pub fn analyze_image(
    input: &InputImage,
    modality: Modality,
    segmentation: &SegmentationParams,
) -> Result<ImageAnalysis> {
    let working = extract_working_channel(input, modality)?;
    let enhanced = enhance(&working, modality)?.image;
    let extraction = extract_vessels(&enhanced, &working, segmentation)?;
    let detection =
        detect_bifurcations(&enhanced, &extraction.vessels, &ValidationParams::default())?;
    let descriptors = par::map_slice(&detection.features, describe)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(ImageAnalysis {
        dims: working.dims(),
        modality,
        working,
        enhanced,
        extraction,
        detection,
        descriptors,
    })
}

fn point_json(p: Point) -> Value {
    json!({ "x": p.x, "y": p.y })
}

/// The features dump of one analysed image.
pub fn features_json(analysis: &ImageAnalysis) -> Value {
    let features: Vec<Value> = analysis
        .features()
        .iter()
        .zip(&analysis.descriptors)
        .enumerate()
        .map(|(i, (f, d))| {
            let branches: Vec<Value> = d
                .branches
                .iter()
                .enumerate()
                .map(|(k, b)| {
                    let p = f.branch_in_image(k);
                    json!({
                        "x": p.col,
                        "y": p.row,
                        "angle": b.angle,
                        "slope_class": b.slope_class,
                        "width": b.width,
                    })
                })
                .collect();
            json!({
                "index": i,
                "center": { "x": f.index.col, "y": f.index.row },
                "branches": branches,
                "descriptor": d.invariant.map(|v| json!({
                    "p1": v.p1, "p2": v.p2, "p3": v.p3, "p4": v.p4,
                })),
            })
        })
        .collect();
    json!({
        "coords": COORDS,
        "image": { "rows": analysis.dims.rows, "cols": analysis.dims.cols },
        "modality": u8::from(analysis.modality),
        "features": features,
    })
}

fn matches_json(set: &MatchSet) -> Value {
    let rows: Vec<Value> = set
        .pairs
        .iter()
        .map(|m| {
            json!({
                "a": point_json(m.a),
                "b": point_json(m.b),
                "score": m.score,
                "a_index": m.a_index,
                "b_index": m.b_index,
            })
        })
        .collect();
    json!({ "coords": COORDS, "mode": set.mode, "matches": rows })
}

pub fn transform_json(model: &TransformModel, canvas: &Canvas) -> Value {
    json!({
        "coords": COORDS,
        "maps": "image02 -> image01",
        "kind": model.kind(),
        "coefficients": model.coefficients(),
        "canvas": canvas,
    })
}

/// Read back a model from a transform dump.
pub fn model_from_json(value: &Value) -> Result<TransformModel> {
    let kind: TransformKind = serde_json::from_value(value["kind"].clone())?;
    let coefficients: Vec<f64> = serde_json::from_value(value["coefficients"].clone())?;
    TransformModel::from_coefficients(kind, &coefficients)
}

/// Short machine-readable cause of a failed registration, or `None` for
/// errors that are not registration failures (I/O, configuration).
pub fn failure_cause(err: &Error) -> Option<&'static str> {
    Some(match err {
        Error::NoFeatures => "no-features",
        Error::InsufficientMatches { .. } => "insufficient-matches",
        Error::DegenerateMatches { .. } => "degenerate-matches",
        Error::RegistrationNotPossible { .. } => "insufficient-inliers",
        Error::DegenerateGeometry(_) => "degenerate-geometry",
        Error::ResampleFailure(_) => "resample-failure",
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Outcome {
    Registered,
    Failed { cause: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub coords: String,
    pub outcome: Outcome,
    /// Effective configuration, output directory omitted.
    pub config: PipelineConfig,
    pub features: [usize; 2],
    pub initial_matches: usize,
    pub inliers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_kind: Option<TransformKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_max: Option<f64>,
    /// Per-inlier `|apply(model, b) − a|`, in inliers.json order.
    pub residuals: Vec<f64>,
    /// Wall-clock milliseconds per stage. Kept out of report.json so that
    /// identical runs give identical files; written to timings.json in
    /// debug mode.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

impl RegistrationReport {
    pub fn is_registered(&self) -> bool {
        self.outcome == Outcome::Registered
    }
}

/// Everything a successful registration produced.
#[derive(Clone, Debug)]
pub struct Registration {
    pub matches: MatchSet,
    pub inliers: MatchSet,
    pub estimate: Estimate,
    pub registered: Resampled<GrayImage>,
    pub registered_rgb: Option<Resampled<RgbImage>>,
}

/// Result of the in-memory pipeline: analyses always, registration when
/// every stage succeeded.
#[derive(Debug)]
pub struct PairRun {
    pub analyses: [ImageAnalysis; 2],
    pub report: RegistrationReport,
    pub registration: Option<Registration>,
}

struct Clock(Vec<(String, f64)>, Instant);

impl Clock {
    fn new() -> Self {
        Clock(Vec::new(), Instant::now())
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.0.push((stage.into(), (now - self.1).as_secs_f64() * 1e3));
        self.1 = now;
    }
}

fn correspondences(inliers: &MatchSet) -> Vec<Correspondence> {
    inliers
        .pairs
        .iter()
        .map(|m| Correspondence {
            source: m.b,
            target: m.a,
        })
        .collect()
}

/// Registers `image02` onto `image01` in memory.
pub fn register_images(
    image01: &InputImage,
    image02: &InputImage,
    config: &PipelineConfig,
) -> Result<PairRun> {
    config.validate()?;
    let mut clock = Clock::new();
    let (a, b) = par::join(
        || analyze_image(image01, config.modality1, &config.segmentation()),
        || analyze_image(image02, config.modality2, &config.segmentation()),
    );
    let analyses = [a?, b?];
    clock.lap("features");

    let mut report = RegistrationReport {
        coords: COORDS.into(),
        outcome: Outcome::Registered,
        config: config.clone(),
        features: [analyses[0].features().len(), analyses[1].features().len()],
        initial_matches: 0,
        inliers: 0,
        model_kind: None,
        residual_mean: None,
        residual_max: None,
        residuals: Vec::new(),
        timings: Vec::new(),
    };

    let staged = (|| -> Result<Registration> {
        let matches = match config.approach {
            Approach::MutualInformation => match_by_mi(
                analyses[0].features(),
                analyses[1].features(),
                config.match_filter,
            )?,
            Approach::Invariants => match_by_invariants(
                &analyses[0].invariant_inputs(),
                &analyses[1].invariant_inputs(),
                config.metric,
                config.match_filter,
            )?,
        };
        report.initial_matches = matches.len();
        clock.lap("matching");
        let ransac = ransac_inliers(&matches, &config.ransac())?;
        report.inliers = ransac.inliers.len();
        clock.lap("ransac");
        let estimate = estimate(&correspondences(&ransac.inliers))?;
        clock.lap("estimation");
        let registered = resample(
            &analyses[1].working,
            &estimate.model,
            config.interpolation,
            analyses[0].dims,
        )?;
        let registered_rgb = match image02 {
            InputImage::Rgb(rgb) => Some(resample_rgb(
                rgb,
                &estimate.model,
                config.interpolation,
                analyses[0].dims,
            )?),
            InputImage::Gray(_) => None,
        };
        clock.lap("resampling");
        Ok(Registration {
            matches,
            inliers: ransac.inliers,
            estimate,
            registered,
            registered_rgb,
        })
    })();

    let registration = match staged {
        Ok(reg) => {
            report.model_kind = Some(reg.estimate.model.kind());
            report.residual_mean = Some(reg.estimate.mean_residual());
            report.residual_max = Some(reg.estimate.max_residual());
            report.residuals = reg.estimate.residuals.clone();
            Some(reg)
        }
        Err(e) => match failure_cause(&e) {
            Some(cause) => {
                report.outcome = Outcome::Failed {
                    cause: cause.into(),
                    message: e.to_string(),
                };
                None
            }
            None => return Err(e),
        },
    };
    report.timings = clock.0;
    Ok(PairRun {
        analyses,
        report,
        registration,
    })
}

fn overlay_rgb(reference: &InputImage, reg: &Resampled<RgbImage>) -> Result<RgbImage> {
    let channels: Vec<GrayImage> = (0..3)
        .map(|k| {
            let ref_k = match reference {
                InputImage::Rgb(c) => c.channel(k),
                InputImage::Gray(g) => g.clone(),
            };
            let reg_k = Resampled {
                image: reg.image.channel(k),
                valid: reg.valid.clone(),
                canvas: reg.canvas,
            };
            overlay(&ref_k, &reg_k)
        })
        .collect();
    RgbImage::from_channels(&channels[0], &channels[1], &channels[2])
}

/// Debug raster of one image: enhanced image in grey, skeleton in blue,
/// clustered candidates in yellow, accepted centres in red and their branch
/// positions in green.
pub fn feature_overlay(analysis: &ImageAnalysis) -> RgbImage {
    let dims = analysis.dims;
    let mut data: Vec<[u8; 3]> = analysis
        .enhanced
        .data()
        .iter()
        .zip(analysis.detection.skeleton.data())
        .map(|(&v, &s)| if s { [40, 120, 255] } else { [v / 2; 3] })
        .collect();
    let mut mark = |r: isize, c: isize, color: [u8; 3]| {
        if dims.contains_signed(r, c) {
            data[r as usize * dims.cols + c as usize] = color;
        }
    };
    for p in &analysis.detection.clustered {
        mark(p.row as isize, p.col as isize, [255, 220, 0]);
    }
    for f in analysis.features() {
        let (r, c) = (f.index.row as isize, f.index.col as isize);
        for d in -3..=3 {
            mark(r + d, c, [255, 0, 0]);
            mark(r, c + d, [255, 0, 0]);
        }
        for k in 0..3 {
            let p = f.branch_in_image(k);
            for (dr, dc) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
                mark(p.row as isize + dr, p.col as isize + dc, [0, 255, 0]);
            }
        }
    }
    RgbImage::new(dims.rows, dims.cols, data).expect("dims match")
}

fn write_debug(analysis: &ImageAnalysis, tag: &str, dir: &Path) -> Result<()> {
    let ex = &analysis.extraction;
    for (name, mask) in [
        ("segmented", &ex.segmented),
        ("size_filtered", &ex.size_filtered),
        ("filled", &ex.filled),
        ("camera_mask", &ex.camera_mask),
        ("vessels", &ex.vessels),
        ("skeleton", &analysis.detection.skeleton),
    ] {
        io::save_pbm(mask, &dir.join(format!("{name}_{tag}.pbm")))?;
    }
    io::save_gray_png(&analysis.enhanced, &dir.join(format!("enhanced_{tag}.png")))?;
    io::save_rgb_png(&feature_overlay(analysis), &dir.join(format!("features_{tag}.png")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

/// Writes the artifacts of a finished run. Contract files left over from
/// earlier runs are removed first so a failed run leaves only report.json.
pub fn write_artifacts(
    run: &PairRun,
    image01: &InputImage,
    config: &PipelineConfig,
    dir: &Path,
) -> Result<()> {
    create_dir(dir)?;
    for name in ARTIFACTS {
        let p = dir.join(name);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|source| Error::Io { path: p.clone(), source })?;
        }
    }
    if let Some(reg) = &run.registration {
        match &reg.registered_rgb {
            Some(rgb) => {
                io::save_rgb_png(&rgb.image, &dir.join("registered.png"))?;
                io::save_rgb_png(&overlay_rgb(image01, rgb)?, &dir.join("overlay.png"))?;
            }
            None => {
                io::save_gray_png(&reg.registered.image, &dir.join("registered.png"))?;
                io::save_gray_png(
                    &overlay(&run.analyses[0].working, &reg.registered),
                    &dir.join("overlay.png"),
                )?;
            }
        }
        io::write_json(&features_json(&run.analyses[0]), &dir.join("features_01.json"))?;
        io::write_json(&features_json(&run.analyses[1]), &dir.join("features_02.json"))?;
        io::write_json(&matches_json(&reg.matches), &dir.join("matches.json"))?;
        io::write_json(&matches_json(&reg.inliers), &dir.join("inliers.json"))?;
        io::write_json(
            &transform_json(&reg.estimate.model, &reg.registered.canvas),
            &dir.join("transform.json"),
        )?;
    }
    io::write_json(&run.report, &dir.join("report.json"))?;
    if config.debug {
        write_debug(&run.analyses[0], "01", dir)?;
        write_debug(&run.analyses[1], "02", dir)?;
        let timings: serde_json::Map<String, Value> = run
            .report
            .timings
            .iter()
            .map(|(k, v)| (k.clone(), json!(v)))
            .collect();
        io::write_json(&Value::Object(timings), &dir.join("timings.json"))?;
    }
    Ok(())
}

/// Loads both images, registers them and writes the artifacts to `dir`.
pub fn register_pair(
    image01: &Path,
    image02: &Path,
    config: &PipelineConfig,
    dir: &Path,
) -> Result<RegistrationReport> {
    let a = io::load_image(image01)?;
    let b = io::load_image(image02)?;
    let run = register_images(&a, &b, config)?;
    write_artifacts(&run, &a, config, dir)?;
    Ok(run.report)
}

/// Feature dump of one image file; with `debug_dir`, also the debug rasters.
pub fn detect_features(
    path: &Path,
    modality: Modality,
    segmentation: &SegmentationParams,
    debug_dir: Option<&Path>,
) -> Result<Value> {
    let input = io::load_image(path)?;
    let analysis = analyze_image(&input, modality, segmentation)?;
    if let Some(dir) = debug_dir {
        create_dir(dir)?;
        write_debug(&analysis, "01", dir)?;
    }
    Ok(features_json(&analysis))
}
