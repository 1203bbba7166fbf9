//! Oriented matched-filter enhancement of vessels.
//!
//! A vessel cross-section is modelled as a Gaussian of σ = 2 px, constant
//! along a 9-px segment. Twelve rotated copies (15° apart) are correlated
//! with the working channel and the per-pixel maximum is kept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::raster::{Dims, GrayImage, RgbImage};

pub const SIGMA: f64 = 2.0;
pub const SEGMENT_LENGTH: usize = 9;
pub const HALF_WIDTH: f64 = 6.0;
pub const ORIENTATIONS: usize = 12;
pub const ORIENTATION_STEP_DEG: f64 = 15.0;
/// Side of the square window holding every rotated kernel.
pub const WINDOW: usize = 13;

const RADIUS: isize = (WINDOW / 2) as isize;
// Fixed-point scale of the correlation taps.
const TAP_SCALE: f64 = 1048576.0;

/// Acquisition modality, with the integer codes used in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ModalityRepr", into = "u8")]
pub enum Modality {
    /// Colour retinography (RGB, dark vessels).
    ColorRetinography = 1,
    /// Red-free retinography (grey, dark vessels).
    RedFree = 2,
    /// Fluorescein angiography (grey, bright vessels).
    Angiography = 3,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ModalityRepr {
    Code(i64),
    Name(String),
}

impl TryFrom<ModalityRepr> for Modality {
    type Error = String;

    fn try_from(value: ModalityRepr) -> std::result::Result<Self, Self::Error> {
        match value {
            ModalityRepr::Code(code) => Modality::from_code(code),
            ModalityRepr::Name(name) => name.parse(),
        }
    }
}

impl From<Modality> for u8 {
    fn from(m: Modality) -> u8 {
        m as u8
    }
}

impl Modality {
    pub fn from_code(code: i64) -> std::result::Result<Self, String> {
        match code {
            1 => Ok(Modality::ColorRetinography),
            2 => Ok(Modality::RedFree),
            3 => Ok(Modality::Angiography),
            other => Err(format!(
                "invalid modality {other}: expected 1 (color), 2 (red-free) or 3 (angiography)"
            )),
        }
    }

    pub fn polarity(self) -> Polarity {
        match self {
            Modality::Angiography => Polarity::BrightVessel,
            Modality::ColorRetinography | Modality::RedFree => Polarity::DarkVessel,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "color" | "colour" | "color-retinography" => Ok(Modality::ColorRetinography),
            "2" | "red-free" | "redfree" => Ok(Modality::RedFree),
            "3" | "angiography" => Ok(Modality::Angiography),
            other => Err(format!(
                "invalid modality {other:?}: expected 1 (color), 2 (red-free) or 3 (angiography)"
            )),
        }
    }
}

/// Whether vessels are brighter or darker than the background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Polarity {
    BrightVessel,
    DarkVessel,
}

/// Raster as decoded from disk, before channel selection.
#[derive(Clone, Debug)]
pub enum InputImage {
    Gray(GrayImage),
    Rgb(RgbImage),
}

impl InputImage {
    pub fn dims(&self) -> Dims {
        match self {
            InputImage::Gray(g) => g.dims(),
            InputImage::Rgb(c) => c.dims(),
        }
    }
}

/// Green channel for colour retinography, a copy of the grey raster
/// otherwise.
pub fn extract_working_channel(image: &InputImage, modality: Modality) -> Result<GrayImage> {
    match (image, modality) {
        (InputImage::Rgb(rgb), Modality::ColorRetinography) => Ok(rgb.channel(1)),
        (InputImage::Gray(g), Modality::RedFree | Modality::Angiography) => Ok(g.clone()),
        (InputImage::Gray(_), Modality::ColorRetinography) => Err(Error::InvalidInput(
            "color retinography expects a 3-channel image".into(),
        )),
        (InputImage::Rgb(_), m) => Err(Error::InvalidInput(format!(
            "{m:?} expects a single-channel image"
        ))),
    }
}

/// One rotated template.
#[derive(Clone, Debug)]
pub struct Kernel {
    /// Direction of the vessel the template responds to, degrees.
    pub orientation_deg: f64,
    /// Template values over the 13×13 window (row-major), before mean
    /// removal; `None` outside the support.
    pub raw: Vec<Option<f64>>,
    /// Zero-mean weights over the support, scaled to unit energy gain;
    /// `None` outside it.
    pub weights: Vec<Option<f64>>,
    // (row offset, col offset, fixed-point weight) with an exactly zero sum.
    taps: Vec<(isize, isize, i64)>,
}

impl Kernel {
    pub fn raw_at(&self, dr: isize, dc: isize) -> Option<f64> {
        self.raw[window_index(dr, dc)]
    }

    pub fn weight_at(&self, dr: isize, dc: isize) -> Option<f64> {
        self.weights[window_index(dr, dc)]
    }

    pub fn support_len(&self) -> usize {
        self.taps.len()
    }
}

fn window_index(dr: isize, dc: isize) -> usize {
    ((dr + RADIUS) * WINDOW as isize + (dc + RADIUS)) as usize
}

/// Rotated coordinates of the window offset `(dr, dc)` for a vessel running
/// along `orientation_deg`: `(across, along)`.
pub fn rotate_offset(dr: isize, dc: isize, orientation_deg: f64) -> (f64, f64) {
    let (x, y) = (dc as f64, -(dr as f64));
    let (s, c) = orientation_deg.to_radians().sin_cos();
    let along = x * c + y * s;
    let across = -x * s + y * c;
    (across, along)
}

/// The twelve templates for one polarity.
#[derive(Clone, Debug)]
pub struct FilterBank {
    pub polarity: Polarity,
    pub kernels: Vec<Kernel>,
}

pub fn build_filter_bank(polarity: Polarity) -> FilterBank {
    let half_len = (SEGMENT_LENGTH / 2) as f64 + 0.5;
    let eps = 1e-9;
    let kernels = (0..ORIENTATIONS)
        .map(|k| {
            let phi = k as f64 * ORIENTATION_STEP_DEG;
            let mut raw = vec![None; WINDOW * WINDOW];
            for dr in -RADIUS..=RADIUS {
                for dc in -RADIUS..=RADIUS {
                    let (across, along) = rotate_offset(dr, dc, phi);
                    if across.abs() <= HALF_WIDTH + eps && along.abs() <= half_len + eps {
                        let g = (-across * across / (2.0 * SIGMA * SIGMA)).exp();
                        raw[window_index(dr, dc)] = Some(match polarity {
                            Polarity::BrightVessel => g,
                            Polarity::DarkVessel => 1.0 - g,
                        });
                    }
                }
            }
            let (sum, n) = raw
                .iter()
                .flatten()
                .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            let mean = sum / n as f64;
            // Unit gain on an aligned ideal ridge: sum(w * template) = sum(w^2)
            // for zero-mean w, so dividing by the energy equalises orientations.
            let energy: f64 = raw.iter().flatten().map(|v| (v - mean) * (v - mean)).sum();
            let weights: Vec<Option<f64>> = raw
                .iter()
                .map(|v| v.map(|v| (v - mean) / energy))
                .collect();

            let mut taps = Vec::with_capacity(n);
            for dr in -RADIUS..=RADIUS {
                for dc in -RADIUS..=RADIUS {
                    if let Some(w) = weights[window_index(dr, dc)] {
                        taps.push((dr, dc, (w * TAP_SCALE).round() as i64));
                    }
                }
            }
            // The centre tap is its own mirror image; absorbing the rounding
            // residue there keeps the taps point-symmetric and zero-sum.
            let residue: i64 = taps.iter().map(|t| t.2).sum();
            let centre = taps
                .iter_mut()
                .find(|t| t.0 == 0 && t.1 == 0)
                .expect("centre tap is always in the support");
            centre.2 -= residue;

            Kernel {
                orientation_deg: phi,
                raw,
                weights,
                taps,
            }
        })
        .collect();
    FilterBank { polarity, kernels }
}

/// Per-pixel maximum correlation and the index of the winning kernel.
#[derive(Clone, Debug)]
pub struct ResponseMap {
    pub dims: Dims,
    /// Fixed-point responses (weights scaled by 2^20).
    pub response: Vec<i64>,
    pub argmax: Vec<u8>,
}

impl ResponseMap {
    pub fn orientation_deg(&self, row: usize, col: usize) -> f64 {
        self.argmax[row * self.dims.cols + col] as f64 * ORIENTATION_STEP_DEG
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.response[row * self.dims.cols + col] as f64 / TAP_SCALE
    }
}

/// Correlates `image` with every kernel of `bank` (replicate padding) and
/// keeps the maximum response per pixel; ties go to the lower orientation.
pub fn matched_filter_response(image: &GrayImage, bank: &FilterBank) -> Result<ResponseMap> {
    let Dims { rows, cols } = image.dims();
    if rows < WINDOW || cols < WINDOW {
        return Err(Error::InvalidInput(format!(
            "image {rows}x{cols} is smaller than the {WINDOW}x{WINDOW} filter support"
        )));
    }
    let pad = RADIUS as usize;
    let pw = cols + 2 * pad;
    let ph = rows + 2 * pad;
    let mut padded = vec![0i32; pw * ph];
    for r in 0..ph {
        let sr = r.saturating_sub(pad).min(rows - 1);
        for c in 0..pw {
            let sc = c.saturating_sub(pad).min(cols - 1);
            padded[r * pw + c] = image.get(sr, sc) as i32;
        }
    }
    let kernels: Vec<Vec<(isize, i64)>> = bank
        .kernels
        .iter()
        .map(|k| {
            k.taps
                .iter()
                .map(|&(dr, dc, w)| (dr * pw as isize + dc, w))
                .collect()
        })
        .collect();

    let mut out = vec![(0i64, 0u8); rows * cols];
    par::for_each_row(&mut out, cols, |r, row| {
        for (c, slot) in row.iter_mut().enumerate() {
            let base = ((r + pad) * pw + c + pad) as isize;
            let mut best = (i64::MIN, 0u8);
            for (k, taps) in kernels.iter().enumerate() {
                let sum: i64 = taps
                    .iter()
                    .map(|&(off, w)| w * padded[(base + off) as usize] as i64)
                    .sum();
                if sum > best.0 {
                    best = (sum, k as u8);
                }
            }
            *slot = best;
        }
    });
    let (response, argmax) = out.into_iter().unzip();
    Ok(ResponseMap {
        dims: image.dims(),
        response,
        argmax,
    })
}

/// Min–max rescale to `[0, 255]` with round-half-up; a constant map goes
/// to all zeros.
pub fn rescale_to_u8(dims: Dims, values: &[i64]) -> GrayImage {
    let min = values.iter().copied().min().unwrap_or(0);
    let max = values.iter().copied().max().unwrap_or(0);
    let span = (max - min) as i128;
    let data = values
        .iter()
        .map(|&v| {
            if span == 0 {
                0
            } else {
                ((2 * (v - min) as i128 * 255 + span) / (2 * span)) as u8
            }
        })
        .collect();
    GrayImage::new(dims.rows, dims.cols, data).expect("dims match")
}

/// Vessel-enhanced image with the modality it came from.
#[derive(Clone, Debug)]
pub struct EnhancedImage {
    pub image: GrayImage,
    pub modality: Modality,
}

/// Matched-filter enhancement; the modality selects the template polarity.
pub fn enhance(image: &GrayImage, modality: Modality) -> Result<EnhancedImage> {
    let bank = build_filter_bank(modality.polarity());
    let map = matched_filter_response(image, &bank)?;
    Ok(EnhancedImage {
        image: rescale_to_u8(map.dims, &map.response),
        modality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ridge(rows: usize, cols: usize, angle_deg: f64, bright: bool) -> GrayImage {
        // Gaussian cross-section (σ = 2) ridge through the image centre.
        let (cr, cc) = (rows as f64 / 2.0, cols as f64 / 2.0);
        let (s, c) = angle_deg.to_radians().sin_cos();
        GrayImage::from_fn(rows, cols, |r, col| {
            let (x, y) = (col as f64 - cc, -(r as f64 - cr));
            let d = -x * s + y * c;
            let g = (-d * d / 8.0).exp();
            let v = if bright { 40.0 + 160.0 * g } else { 200.0 - 160.0 * g };
            v.round() as u8
        })
    }

    #[test]
    fn working_channel_selection() {
        let rgb = RgbImage::new(1, 1, vec![[10, 200, 30]]).unwrap();
        let g = extract_working_channel(&InputImage::Rgb(rgb), Modality::ColorRetinography)
            .unwrap();
        assert_eq!(g.data(), &[200]);

        let gray = GrayImage::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let copy =
            extract_working_channel(&InputImage::Gray(gray.clone()), Modality::Angiography)
                .unwrap();
        assert_eq!(copy, gray);

        let same = RgbImage::new(1, 3, vec![[5, 5, 0], [7, 7, 1], [9, 9, 2]]).unwrap();
        let out = extract_working_channel(&InputImage::Rgb(same.clone()), Modality::ColorRetinography)
            .unwrap();
        assert_eq!(out, same.channel(0));

        assert!(
            extract_working_channel(&InputImage::Gray(gray.clone()), Modality::ColorRetinography)
                .is_err()
        );
        let rgb = RgbImage::new(1, 1, vec![[1, 2, 3]]).unwrap();
        assert!(extract_working_channel(&InputImage::Rgb(rgb), Modality::RedFree).is_err());
    }

    #[test]
    fn template_values_at_axis() {
        let bright = build_filter_bank(Polarity::BrightVessel);
        let dark = build_filter_bank(Polarity::DarkVessel);
        assert_eq!(bright.kernels.len(), 12);
        assert_eq!(bright.kernels[0].raw_at(0, 0), Some(1.0));
        assert_eq!(dark.kernels[0].raw_at(0, 0), Some(0.0));
        // across offset 2 on the 0° kernel is a row step
        let v = bright.kernels[0].raw_at(2, 0).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn support_covers_rotated_box() {
        for k in &build_filter_bank(Polarity::BrightVessel).kernels {
            for dr in -6..=6isize {
                for dc in -6..=6isize {
                    let (across, along) = rotate_offset(dr, dc, k.orientation_deg);
                    let inside = k.raw_at(dr, dc).is_some();
                    if across.abs() <= 6.0 && along.abs() <= 4.0 {
                        assert!(inside, "{} ({dr},{dc})", k.orientation_deg);
                    }
                    if inside {
                        assert!(across.abs() <= 6.0 + 1e-9 && along.abs() <= 4.5 + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn ninety_is_transpose_of_zero() {
        let bank = build_filter_bank(Polarity::BrightVessel);
        let (k0, k90) = (&bank.kernels[0], &bank.kernels[6]);
        for dr in -6..=6isize {
            for dc in -6..=6isize {
                match (k0.raw_at(dr, dc), k90.raw_at(dc, dr)) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
                    (None, None) => {}
                    other => panic!("support differs at ({dr},{dc}): {other:?}"),
                }
            }
        }
    }

    #[test]
    fn kernels_are_mirror_symmetric() {
        for polarity in [Polarity::BrightVessel, Polarity::DarkVessel] {
            for k in &build_filter_bank(polarity).kernels {
                let sum: f64 = k.weights.iter().flatten().sum();
                assert!(sum.abs() < 1e-9);
                assert_eq!(k.taps.iter().map(|t| t.2).sum::<i64>(), 0);
                for dr in -6..=6isize {
                    for dc in -6..=6isize {
                        let Some(v) = k.raw_at(dr, dc) else { continue };
                        // The value depends on |x'| only, so x' -> -x' is a
                        // symmetry; on the lattice it shows up as point symmetry.
                        let (across, _) = rotate_offset(dr, dc, k.orientation_deg);
                        let g = (-across * across / 8.0).exp();
                        let expected = match polarity {
                            Polarity::BrightVessel => g,
                            Polarity::DarkVessel => 1.0 - g,
                        };
                        assert!((v - expected).abs() < 1e-12);
                        let p = k.raw_at(-dr, -dc).expect("point-symmetric support");
                        assert!((v - p).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn constant_image_gives_constant_zero() {
        let img = GrayImage::filled(32, 32, 117);
        let out = enhance(&img, Modality::Angiography).unwrap();
        assert!(out.image.data().iter().all(|&v| v == 0));
        let bank = build_filter_bank(Polarity::DarkVessel);
        let map = matched_filter_response(&img, &bank).unwrap();
        assert!(map.response.iter().all(|&v| v == 0));
    }

    #[test]
    fn too_small_image_is_rejected() {
        let img = GrayImage::filled(12, 40, 3);
        assert!(matches!(
            enhance(&img, Modality::Angiography),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn offset_does_not_change_response() {
        let img = ridge(40, 40, 30.0, true);
        let shifted = GrayImage::from_fn(40, 40, |r, c| img.get(r, c).saturating_add(37));
        assert!(img.data().iter().all(|&v| v as u16 + 37 <= 255));
        let bank = build_filter_bank(Polarity::BrightVessel);
        let a = matched_filter_response(&img, &bank).unwrap();
        let b = matched_filter_response(&shifted, &bank).unwrap();
        assert_eq!(a.response, b.response);
    }

    #[test]
    fn ridge_orientation_is_recovered() {
        let bank = build_filter_bank(Polarity::BrightVessel);
        for angle in [90.0, 45.0, 0.0, 120.0] {
            let img = ridge(64, 64, angle, true);
            let map = matched_filter_response(&img, &bank).unwrap();
            let o = map.orientation_deg(32, 32);
            let diff = (o - angle).rem_euclid(180.0);
            assert!(diff.min(180.0 - diff) <= 15.0, "ridge {angle}: argmax {o}");
        }
    }

    #[test]
    fn dark_ridge_uses_dark_templates() {
        let img = ridge(64, 64, 90.0, false);
        let out = enhance(&img, Modality::RedFree).unwrap();
        // centreline is the strongest response
        let centre = out.image.get(32, 32);
        assert!(centre >= 250, "{centre}");
        assert!(out.image.get(32, 10) < 60);
    }

    #[test]
    fn rotation_keeps_peak_response() {
        let bank = build_filter_bank(Polarity::BrightVessel);
        let base = {
            let map = matched_filter_response(&ridge(64, 64, 0.0, true), &bank).unwrap();
            map.value(32, 32)
        };
        for k in 1..12 {
            let angle = k as f64 * 15.0;
            let map = matched_filter_response(&ridge(64, 64, angle, true), &bank).unwrap();
            let v = map.value(32, 32);
            assert!((v - base).abs() <= 0.05 * base, "{angle}: {v} vs {base}");
        }
    }

    #[test]
    fn modality_codes() {
        assert_eq!(Modality::from_code(3).unwrap(), Modality::Angiography);
        assert!(Modality::from_code(4).unwrap_err().contains("modality"));
        assert_eq!("red-free".parse::<Modality>().unwrap(), Modality::RedFree);
        let m: Modality = serde_json::from_str("1").unwrap();
        assert_eq!(m, Modality::ColorRetinography);
        let m: Modality = serde_json::from_str("\"angiography\"").unwrap();
        assert_eq!(m, Modality::Angiography);
        assert_eq!(serde_json::to_string(&Modality::RedFree).unwrap(), "2");
        assert!(serde_json::from_str::<Modality>("4").is_err());
    }
}
