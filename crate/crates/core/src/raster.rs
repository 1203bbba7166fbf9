//! Pixel-grid primitives shared by every stage.
//!
//! Rasters are stored row-major with 0-based `(row, col)` addressing. The
//! geometric helpers (lines, rings, bands) work in that grid; angles follow
//! the mathematical orientation with the row axis negated, so a step towards
//! row 0 points "up" at 90°.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raster extent in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub rows: usize,
    pub cols: usize,
}

impl Dims {
    pub const fn new(rows: usize, cols: usize) -> Self {
        Dims { rows, cols }
    }

    pub const fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub const fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.row < self.rows && p.col < self.cols
    }

    pub fn contains_signed(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.rows && (col as usize) < self.cols
    }

    /// `(line, column)` to absolute row-major offset.
    pub fn absolute(&self, p: Pixel) -> Result<usize> {
        self.check(p)?;
        Ok(p.row * self.cols + p.col)
    }

    /// Absolute row-major offset to `(line, column)`.
    pub fn pixel(&self, index: usize) -> Result<Pixel> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        Ok(Pixel::new(index / self.cols, index % self.cols))
    }

    pub fn check(&self, p: Pixel) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(Error::OutOfBounds {
                row: p.row as isize,
                col: p.col as isize,
                rows: self.rows,
                cols: self.cols,
            })
        }
    }

    fn validate(self) -> Result<Self> {
        if self.is_empty() {
            return Err(Error::InvalidInput(format!(
                "raster must be at least 1x1, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self)
    }
}

/// A `(line, column)` pixel address. Ordering is row-major, matching the
/// order of absolute indexes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub const fn new(row: usize, col: usize) -> Self {
        Pixel { row, col }
    }
}

/// 8-bit single-channel raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    dims: Dims,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        let dims = Dims::new(rows, cols).validate()?;
        if data.len() != dims.len() {
            return Err(Error::InvalidInput(format!(
                "{} samples for a {rows}x{cols} raster",
                data.len()
            )));
        }
        Ok(GrayImage { dims, data })
    }

    pub fn filled(rows: usize, cols: usize, value: u8) -> Self {
        GrayImage {
            dims: Dims::new(rows.max(1), cols.max(1)),
            data: vec![value; rows.max(1) * cols.max(1)],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let dims = Dims::new(rows.max(1), cols.max(1));
        let mut data = Vec::with_capacity(dims.len());
        for r in 0..dims.rows {
            for c in 0..dims.cols {
                data.push(f(r, c));
            }
        }
        GrayImage { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn rows(&self) -> usize {
        self.dims.rows
    }

    pub fn cols(&self) -> usize {
        self.dims.cols
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.dims.cols + col]
    }

    #[inline]
    pub fn at(&self, p: Pixel) -> u8 {
        self.get(p.row, p.col)
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.dims.cols + col] = value;
    }

    /// Square crop of side `2 * radius + 1` centred on `center`.
    pub fn crop_centered(&self, center: Pixel, radius: usize) -> Result<GrayImage> {
        let fits = center.row >= radius
            && center.col >= radius
            && center.row + radius < self.dims.rows
            && center.col + radius < self.dims.cols;
        if !fits {
            return Err(Error::OutOfBounds {
                row: center.row as isize,
                col: center.col as isize,
                rows: self.dims.rows,
                cols: self.dims.cols,
            });
        }
        let side = 2 * radius + 1;
        let (r0, c0) = (center.row - radius, center.col - radius);
        Ok(GrayImage::from_fn(side, side, |r, c| self.get(r0 + r, c0 + c)))
    }
}

/// 8-bit three-channel raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    dims: Dims,
    data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(rows: usize, cols: usize, data: Vec<[u8; 3]>) -> Result<Self> {
        let dims = Dims::new(rows, cols).validate()?;
        if data.len() != dims.len() {
            return Err(Error::InvalidInput(format!(
                "{} samples for a {rows}x{cols} raster",
                data.len()
            )));
        }
        Ok(RgbImage { dims, data })
    }

    pub fn from_channels(r: &GrayImage, g: &GrayImage, b: &GrayImage) -> Result<Self> {
        for other in [g, b] {
            if other.dims() != r.dims() {
                return Err(Error::shape(
                    (r.rows(), r.cols()),
                    (other.rows(), other.cols()),
                ));
            }
        }
        let data = r
            .data()
            .iter()
            .zip(g.data())
            .zip(b.data())
            .map(|((&r, &g), &b)| [r, g, b])
            .collect();
        Ok(RgbImage { dims: r.dims(), data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[[u8; 3]] {
        &self.data
    }

    pub fn channel(&self, k: usize) -> GrayImage {
        GrayImage {
            dims: self.dims,
            data: self.data.iter().map(|px| px[k]).collect(),
        }
    }
}

/// Boolean raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        let dims = Dims::new(rows, cols).validate()?;
        if data.len() != dims.len() {
            return Err(Error::InvalidInput(format!(
                "{} samples for a {rows}x{cols} mask",
                data.len()
            )));
        }
        Ok(BinaryMask { dims, data })
    }

    pub fn empty(dims: Dims) -> Self {
        BinaryMask {
            dims,
            data: vec![false; dims.len()],
        }
    }

    pub fn full(dims: Dims) -> Self {
        BinaryMask {
            dims,
            data: vec![true; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for r in 0..dims.rows {
            for c in 0..dims.cols {
                data.push(f(r, c));
            }
        }
        BinaryMask { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.dims.cols + col]
    }

    /// Out-of-bounds reads as `false`.
    #[inline]
    pub fn get_signed(&self, row: isize, col: isize) -> bool {
        self.dims.contains_signed(row, col) && self.get(row as usize, col as usize)
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.dims.cols + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Set pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        let cols = self.dims.cols;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| Pixel::new(i / cols, i % cols))
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

/// 8-connected component labels; 0 is background, regions are numbered
/// from 1 in order of their first pixel in raster order.
#[derive(Clone, Debug)]
pub struct LabelMap {
    pub dims: Dims,
    pub labels: Vec<u32>,
    /// `counts[k]` is the pixel count of label `k + 1`.
    pub counts: Vec<usize>,
}

impl LabelMap {
    pub fn num_labels(&self) -> usize {
        self.counts.len()
    }

    pub fn label(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.dims.cols + col]
    }
}

const NEIGHBORS_8: [(isize, isize); 8] = [
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Offsets of the 8-neighbourhood, counter-clockwise from east.
pub fn neighbors_8() -> &'static [(isize, isize); 8] {
    &NEIGHBORS_8
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labelling of the `true` pixels of `mask`.
pub fn label_components(mask: &BinaryMask) -> LabelMap {
    let Dims { rows, cols } = mask.dims;
    let mut provisional = vec![0u32; rows * cols];
    // parent[0] is a dummy so provisional labels index directly.
    let mut parent: Vec<u32> = vec![0];

    for r in 0..rows {
        for c in 0..cols {
            if !mask.get(r, c) {
                continue;
            }
            let mut current = 0u32;
            // Already-visited half of the neighbourhood: W, NW, N, NE.
            for (dr, dc) in [(0isize, -1isize), (-1, -1), (-1, 0), (-1, 1)] {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if !mask.get_signed(nr, nc) {
                    continue;
                }
                let l = provisional[nr as usize * cols + nc as usize];
                if current == 0 {
                    current = l;
                } else {
                    union(&mut parent, current, l);
                }
            }
            if current == 0 {
                current = parent.len() as u32;
                parent.push(current);
            }
            provisional[r * cols + c] = current;
        }
    }

    let mut compact = vec![0u32; parent.len()];
    let mut counts = Vec::new();
    for l in provisional.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = find(&mut parent, *l) as usize;
        if compact[root] == 0 {
            counts.push(0);
            compact[root] = counts.len() as u32;
        }
        *l = compact[root];
        counts[*l as usize - 1] += 1;
    }

    LabelMap {
        dims: mask.dims,
        labels: provisional,
        counts,
    }
}

/// Pixels of the straight segment `p1`–`p2`, both endpoints included.
///
/// Bresenham stepping; every returned centre lies within `0.5·√2` of the
/// ideal segment and consecutive pixels are 8-adjacent. The path is always
/// traced from the row-major smaller endpoint, so swapping the endpoints
/// yields exactly the reversed path.
pub fn index_line(p1: Pixel, p2: Pixel, dims: Dims) -> Result<Vec<Pixel>> {
    dims.check(p1)?;
    dims.check(p2)?;
    let swapped = p2 < p1;
    let (a, b) = if swapped { (p2, p1) } else { (p1, p2) };

    let (r1, c1) = (a.row as isize, a.col as isize);
    let (r2, c2) = (b.row as isize, b.col as isize);
    let dr = (r2 - r1).abs();
    let dc = (c2 - c1).abs();
    let sr = if r2 >= r1 { 1 } else { -1 };
    let sc = if c2 >= c1 { 1 } else { -1 };

    let mut out = Vec::with_capacity(dr.max(dc) as usize + 1);
    let (mut r, mut c) = (r1, c1);
    let mut err = dc - dr;
    loop {
        out.push(Pixel::new(r as usize, c as usize));
        if r == r2 && c == c2 {
            break;
        }
        let e2 = 2 * err;
        if e2 > -dr {
            err -= dr;
            c += sc;
        }
        if e2 < dc {
            err += dc;
            r += sr;
        }
    }
    if swapped {
        out.reverse();
    }
    Ok(out)
}

/// Slope and direction of the line from `p1` to `p2`.
///
/// The angle is in `[0, 360)` degrees, counter-clockwise from the +column
/// axis with rows growing downward, so `(0,0)→(1,0)` points to 270°. Slope
/// is `Δy/Δx` in the same flipped frame; vertical lines report a signed
/// infinity.
pub fn line_slope_angle(p1: Pixel, p2: Pixel) -> Result<(f64, f64)> {
    if p1 == p2 {
        return Err(Error::DegenerateInput("slope of a zero-length line"));
    }
    let dx = p2.col as f64 - p1.col as f64;
    let dy = -(p2.row as f64 - p1.row as f64);
    let slope = if dx == 0.0 {
        if dy > 0.0 {
            f64::INFINITY
        } else {
            f64::NEG_INFINITY
        }
    } else {
        dy / dx
    };
    Ok((slope, normalize_degrees(dy.atan2(dx).to_degrees())))
}

/// Maps any angle to `[0, 360)`.
pub fn normalize_degrees(deg: f64) -> f64 {
    let a = deg.rem_euclid(360.0);
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

/// Ordered ring of radius `(dimension - 1) / 2` inside a
/// `dimension × dimension` window.
///
/// One-degree samples from 0° counter-clockwise, each snapped to its nearest
/// pixel; repeats are dropped keeping the first occurrence.
pub fn index_circumference(dimension: usize) -> Result<Vec<Pixel>> {
    if dimension < 3 || dimension % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "ring window must be odd and at least 3, got {dimension}"
        )));
    }
    let center = ((dimension - 1) / 2) as f64;
    let radius = center;
    let mut seen = vec![false; dimension * dimension];
    let mut ring = Vec::new();
    // One-degree steps subdivided so that no ring pixel is skipped at any
    // radius; first hits keep the angular order.
    let samples = 360 * dimension;
    for k in 0..samples {
        let theta = std::f64::consts::TAU * k as f64 / samples as f64;
        let col = (center + radius * theta.cos()).round() as usize;
        let row = (center - radius * theta.sin()).round() as usize;
        let i = row * dimension + col;
        if !seen[i] {
            seen[i] = true;
            ring.push(Pixel::new(row, col));
        }
    }
    Ok(ring)
}

/// Pixels of the 5-pixel-wide band around the segment `p1`–`p2`: those whose
/// projection falls on the segment and whose perpendicular distance is at
/// most 2. A zero-length segment degenerates to the radius-2 disk. Output is
/// in row-major order.
pub fn index_area(p1: Pixel, p2: Pixel, dims: Dims) -> Result<Vec<Pixel>> {
    dims.check(p1)?;
    dims.check(p2)?;
    const HALF_WIDTH: f64 = 2.0;
    let (r1, c1) = (p1.row as f64, p1.col as f64);
    let (r2, c2) = (p2.row as f64, p2.col as f64);
    let (dr, dc) = (r2 - r1, c2 - c1);
    let len2 = dr * dr + dc * dc;

    let pad = HALF_WIDTH.ceil() as isize;
    let rmin = (p1.row.min(p2.row) as isize - pad).max(0) as usize;
    let rmax = ((p1.row.max(p2.row) as isize + pad) as usize).min(dims.rows - 1);
    let cmin = (p1.col.min(p2.col) as isize - pad).max(0) as usize;
    let cmax = ((p1.col.max(p2.col) as isize + pad) as usize).min(dims.cols - 1);

    let eps = 1e-9;
    let mut out = Vec::new();
    for r in rmin..=rmax {
        for c in cmin..=cmax {
            let (vr, vc) = (r as f64 - r1, c as f64 - c1);
            let inside = if len2 == 0.0 {
                (vr * vr + vc * vc).sqrt() <= HALF_WIDTH + eps
            } else {
                let t = (vr * dr + vc * dc) / len2;
                let perp = (vr * dc - vc * dr).abs() / len2.sqrt();
                (-eps..=1.0 + eps).contains(&t) && perp <= HALF_WIDTH + eps
            };
            if inside {
                out.push(Pixel::new(r, c));
            }
        }
    }
    Ok(out)
}
