//! From enhanced image to a clean vessel mask.
//!
//! Threshold selection maximises the second-order entropy of the two
//! diagonal quadrants of the grey-level co-occurrence matrix. The binary
//! mask is then cleaned: small blobs removed, small holes filled and the
//! dark camera frame subtracted.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{label_components, BinaryMask, Dims, GrayImage};

pub const LEVELS: usize = 256;

/// Components smaller than this fraction of the image are dropped. The
/// value reproduces the 950-pixel minimum at 1012×1024.
pub const DEFAULT_MIN_COMPONENT_RATIO: f64 = 950.0 / (1012.0 * 1024.0);
/// Background holes smaller than this fraction of the image are filled.
pub const DEFAULT_MAX_HOLE_RATIO: f64 = 0.000115;
/// Working-channel intensities at or below this level belong to the frame.
pub const DEFAULT_DARK_LIMIT: u8 = 15;

/// 256×256 counts of `(pixel, right neighbour)` and `(pixel, down-right
/// neighbour)` grey-level pairs.
#[derive(Clone, Debug)]
pub struct CooccurrenceMatrix {
    counts: Vec<u64>,
    total: u64,
}

impl CooccurrenceMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * LEVELS + j]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

pub fn cooccurrence(image: &GrayImage) -> Result<CooccurrenceMatrix> {
    let Dims { rows, cols } = image.dims();
    if rows * cols < 2 {
        return Err(Error::InvalidInput(
            "co-occurrence needs at least two pixels".into(),
        ));
    }
    let mut counts = vec![0u64; LEVELS * LEVELS];
    let mut total = 0;
    for r in 0..rows {
        for c in 0..cols.saturating_sub(1) {
            let i = image.get(r, c) as usize;
            counts[i * LEVELS + image.get(r, c + 1) as usize] += 1;
            total += 1;
            if r + 1 < rows {
                counts[i * LEVELS + image.get(r + 1, c + 1) as usize] += 1;
                total += 1;
            }
        }
    }
    Ok(CooccurrenceMatrix { counts, total })
}

/// How the entropy of a co-occurrence quadrant is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropyForm {
    /// Local entropy of the pair distribution inside each quadrant:
    /// `−½ Σ q·log₂q` with `q = t_ij / T_quadrant`.
    #[default]
    Sectional,
    /// Quadrant masses only: `−½·P_A·log₂P_A − ½·P_C·log₂P_C`, with
    /// `P = T_quadrant / N`. Favours splits that put about 1/e of all pairs
    /// in each quadrant.
    Mass,
}

impl std::str::FromStr for EntropyForm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sectional" => Ok(EntropyForm::Sectional),
            "mass" => Ok(EntropyForm::Mass),
            other => Err(format!("invalid entropy-form {other:?}: expected sectional or mass")),
        }
    }
}

impl std::fmt::Display for EntropyForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EntropyForm::Sectional => "sectional",
            EntropyForm::Mass => "mass",
        })
    }
}

/// Selected level and the full `H²(s)` curve.
#[derive(Clone, Debug)]
pub struct ThresholdResult {
    pub level: u8,
    pub entropy_curve: Vec<f64>,
}

/// `−½·p·log₂p`, with `0·log 0 = 0`.
#[inline]
pub(crate) fn half_plogp(p: f64) -> f64 {
    if p > 0.0 {
        -0.5 * p * p.log2()
    } else {
        0.0
    }
}

#[inline]
fn tlogt(t: u64) -> f64 {
    if t > 0 {
        let t = t as f64;
        t * t.log2()
    } else {
        0.0
    }
}

/// `−½ Σ (t/T)·log₂(t/T)` from `T` and `Σ t·log₂t`.
#[inline]
fn sectional_entropy(total: u64, sum_tlogt: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    (-0.5 * (sum_tlogt / t - t.log2())).max(0.0)
}

/// Quadrant sums `(count, Σ t·log₂t)` for `i, j ≤ s` (forward) and
/// `i, j ≥ s` (reverse), for every `s`.
fn quadrant_sums(matrix: &CooccurrenceMatrix, reverse: bool) -> Vec<(u64, f64)> {
    let mut sat = vec![(0u64, 0f64); LEVELS * LEVELS];
    let order: Vec<usize> = if reverse {
        (0..LEVELS).rev().collect()
    } else {
        (0..LEVELS).collect()
    };
    for (ii, &i) in order.iter().enumerate() {
        let mut row = (0u64, 0f64);
        for &j in &order {
            let t = matrix.get(i, j);
            row.0 += t;
            row.1 += tlogt(t);
            let above = if ii > 0 { sat[order[ii - 1] * LEVELS + j] } else { (0, 0.0) };
            sat[i * LEVELS + j] = (row.0 + above.0, row.1 + above.1);
        }
    }
    (0..LEVELS).map(|s| sat[s * LEVELS + s]).collect()
}

/// `H²(s)` for every `s`, quadrant A holding pairs with both levels ≤ s and
/// quadrant C pairs with both levels > s.
pub fn entropy_curve(matrix: &CooccurrenceMatrix, form: EntropyForm) -> Vec<f64> {
    let low = quadrant_sums(matrix, false);
    let high = quadrant_sums(matrix, true);
    let nf = matrix.total as f64;
    (0..LEVELS)
        .map(|s| {
            let a = low[s];
            let c = if s + 1 < LEVELS { high[s + 1] } else { (0, 0.0) };
            match form {
                EntropyForm::Sectional => sectional_entropy(a.0, a.1) + sectional_entropy(c.0, c.1),
                EntropyForm::Mass => half_plogp(a.0 as f64 / nf) + half_plogp(c.0 as f64 / nf),
            }
        })
        .collect()
}

/// Level maximising `H²(s)`; first maximum on ties. A constant image
/// returns its own level.
pub fn entropy_threshold(image: &GrayImage, form: EntropyForm) -> Result<ThresholdResult> {
    let matrix = cooccurrence(image)?;
    let curve = entropy_curve(&matrix, form);
    let first = image.data()[0];
    let level = if image.data().iter().all(|&v| v == first) {
        first
    } else {
        let mut best = 0;
        for (s, &h) in curve.iter().enumerate() {
            if h > curve[best] {
                best = s;
            }
        }
        best as u8
    };
    Ok(ThresholdResult {
        level,
        entropy_curve: curve,
    })
}

/// `true` where the intensity is strictly above `level`.
pub fn segment(enhanced: &GrayImage, level: u8) -> BinaryMask {
    BinaryMask::new(
        enhanced.rows(),
        enhanced.cols(),
        enhanced.data().iter().map(|&v| v > level).collect(),
    )
    .expect("same dims")
}

/// Pixel-count threshold `⌈ratio·area⌉`, tolerant of float noise in the
/// product.
pub fn area_threshold(dims: Dims, ratio: f64) -> usize {
    (ratio * dims.len() as f64 - 1e-9).ceil().max(0.0) as usize
}

fn clear_small_components(mask: &BinaryMask, min_size: usize) -> BinaryMask {
    let labels = label_components(mask);
    let data = labels
        .labels
        .iter()
        .map(|&l| l != 0 && labels.counts[l as usize - 1] >= min_size)
        .collect();
    BinaryMask::new(mask.dims().rows, mask.dims().cols, data).expect("same dims")
}

/// Clears every 8-connected foreground component with fewer than
/// `⌈min_ratio·rows·cols⌉` pixels.
pub fn size_filter(mask: &BinaryMask, min_ratio: f64) -> BinaryMask {
    clear_small_components(mask, area_threshold(mask.dims(), min_ratio))
}

/// Sets every 8-connected background component with fewer than
/// `⌈max_ratio·rows·cols⌉` pixels.
pub fn fill_hollow_vessels(mask: &BinaryMask, max_ratio: f64) -> BinaryMask {
    let limit = area_threshold(mask.dims(), max_ratio);
    let inverted = BinaryMask::new(
        mask.dims().rows,
        mask.dims().cols,
        mask.data().iter().map(|&b| !b).collect(),
    )
    .expect("same dims");
    let holes = label_components(&inverted);
    let data = mask
        .data()
        .iter()
        .zip(&holes.labels)
        .map(|(&b, &l)| b || (l != 0 && holes.counts[l as usize - 1] < limit))
        .collect();
    BinaryMask::new(mask.dims().rows, mask.dims().cols, data).expect("same dims")
}

/// Dark camera frame: per row, the run of pixels `≤ dark_limit` from the
/// left edge and the run from the right edge.
pub fn detect_camera_mask(original: &GrayImage, dark_limit: u8) -> BinaryMask {
    let Dims { rows, cols } = original.dims();
    let mut mask = BinaryMask::empty(original.dims());
    for r in 0..rows {
        for c in 0..cols {
            if original.get(r, c) > dark_limit {
                break;
            }
            mask.set(r, c, true);
        }
        for c in (0..cols).rev() {
            if original.get(r, c) > dark_limit {
                break;
            }
            mask.set(r, c, true);
        }
    }
    mask
}

/// `vessels AND NOT camera_mask`.
pub fn remove_mask(vessels: &BinaryMask, camera_mask: &BinaryMask) -> Result<BinaryMask> {
    if vessels.dims() != camera_mask.dims() {
        let (a, b) = (vessels.dims(), camera_mask.dims());
        return Err(Error::shape((a.rows, a.cols), (b.rows, b.cols)));
    }
    let data = vessels
        .data()
        .iter()
        .zip(camera_mask.data())
        .map(|(&v, &m)| v && !m)
        .collect();
    BinaryMask::new(vessels.dims().rows, vessels.dims().cols, data)
}

/// Tunables of the vessel-mask extraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentationParams {
    pub min_component_ratio: f64,
    pub max_hole_ratio: f64,
    pub dark_limit: u8,
    pub entropy_form: EntropyForm,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams {
            min_component_ratio: DEFAULT_MIN_COMPONENT_RATIO,
            max_hole_ratio: DEFAULT_MAX_HOLE_RATIO,
            dark_limit: DEFAULT_DARK_LIMIT,
            entropy_form: EntropyForm::default(),
        }
    }
}

/// Every intermediate mask of the extraction, for debug output.
#[derive(Clone, Debug)]
pub struct VesselExtraction {
    pub threshold: u8,
    pub segmented: BinaryMask,
    pub size_filtered: BinaryMask,
    pub filled: BinaryMask,
    pub camera_mask: BinaryMask,
    pub vessels: BinaryMask,
}

/// Threshold, segment, size-filter, fill holes and drop the camera frame.
pub fn extract_vessels(
    enhanced: &GrayImage,
    original: &GrayImage,
    params: &SegmentationParams,
) -> Result<VesselExtraction> {
    let threshold = entropy_threshold(enhanced, params.entropy_form)?.level;
    let segmented = segment(enhanced, threshold);
    let size_filtered = size_filter(&segmented, params.min_component_ratio);
    let filled = fill_hollow_vessels(&size_filtered, params.max_hole_ratio);
    let camera_mask = detect_camera_mask(original, params.dark_limit);
    let vessels = remove_mask(&filled, &camera_mask)?;
    Ok(VesselExtraction {
        threshold,
        segmented,
        size_filtered,
        filled,
        camera_mask,
        vessels,
    })
}
