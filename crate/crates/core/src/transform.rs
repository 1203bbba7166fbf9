//! Geometric models between the sensed (image02) and reference (image01)
//! frames, their least-squares estimation and image resampling.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::raster::{BinaryMask, Dims, GrayImage, Pixel, RgbImage};

/// Continuous image position: `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<Pixel> for Point {
    fn from(p: Pixel) -> Self {
        Point::new(p.col as f64, p.row as f64)
    }
}

/// `source` in the sensed image maps to `target` in the reference image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub source: Point,
    pub target: Point,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Translation,
    Rigid,
    Affine,
    Quadratic,
}

/// Monomials of the quadratic model, in coefficient order.
pub const QUADRATIC_TERMS: [&str; 6] = ["x^2", "xy", "y^2", "x", "y", "1"];

fn monomials(p: Point) -> [f64; 6] {
    [p.x * p.x, p.x * p.y, p.y * p.y, p.x, p.y, 1.0]
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Coefficients {
    Linear(Matrix3<f64>),
    Quadratic([[f64; 6]; 2]),
}

/// Sensed → reference mapping.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformModel {
    kind: TransformKind,
    coefficients: Coefficients,
}

impl TransformModel {
    pub fn identity() -> Self {
        Self::affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        TransformModel {
            kind: TransformKind::Translation,
            coefficients: Coefficients::Linear(Matrix3::new(
                1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0,
            )),
        }
    }

    /// Scaled rotation by `angle_deg` (counter-clockwise on screen) about
    /// the origin, then translation.
    pub fn rigid(scale: f64, angle_deg: f64, tx: f64, ty: f64) -> Self {
        // y grows downward, so a visual counter-clockwise turn flips the
        // sign of the off-diagonal terms.
        let (s, c) = angle_deg.to_radians().sin_cos();
        TransformModel {
            kind: TransformKind::Rigid,
            coefficients: Coefficients::Linear(Matrix3::new(
                scale * c,
                scale * s,
                tx,
                -scale * s,
                scale * c,
                ty,
                0.0,
                0.0,
                1.0,
            )),
        }
    }

    /// `x' = m[0]·(x, y, 1)`, `y' = m[1]·(x, y, 1)`.
    pub fn affine(m: [[f64; 3]; 2]) -> Self {
        TransformModel {
            kind: TransformKind::Affine,
            coefficients: Coefficients::Linear(Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], 0.0, 0.0, 1.0,
            )),
        }
    }

    /// Coefficients over [`QUADRATIC_TERMS`] for `x'` and `y'`.
    pub fn quadratic(theta: [[f64; 6]; 2]) -> Self {
        TransformModel {
            kind: TransformKind::Quadratic,
            coefficients: Coefficients::Quadratic(theta),
        }
    }

    /// Rotation by `angle_deg` about `center`, isotropic scale, then shift.
    pub fn similarity_about(center: Point, scale: f64, angle_deg: f64, tx: f64, ty: f64) -> Self {
        let r = Self::rigid(scale, angle_deg, 0.0, 0.0);
        let m = r.matrix().expect("linear");
        let moved = m * Vector3::new(center.x, center.y, 1.0);
        Self::affine([
            [m[(0, 0)], m[(0, 1)], center.x - moved.x + tx],
            [m[(1, 0)], m[(1, 1)], center.y - moved.y + ty],
        ])
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    /// Homogeneous matrix of a linear kind.
    pub fn matrix(&self) -> Option<Matrix3<f64>> {
        match self.coefficients {
            Coefficients::Linear(m) => Some(m),
            Coefficients::Quadratic(_) => None,
        }
    }

    /// Coefficients row-major: 9 values for linear kinds, 12 for quadratic.
    pub fn coefficients(&self) -> Vec<f64> {
        match &self.coefficients {
            Coefficients::Linear(m) => (0..3)
                .flat_map(|r| (0..3).map(move |c| m[(r, c)]))
                .collect(),
            Coefficients::Quadratic(t) => t.iter().flatten().copied().collect(),
        }
    }

    pub fn from_coefficients(kind: TransformKind, values: &[f64]) -> Result<Self> {
        let expected = if kind == TransformKind::Quadratic { 12 } else { 9 };
        if values.len() != expected {
            return Err(Error::InvalidInput(format!(
                "{kind:?} model needs {expected} coefficients, got {}",
                values.len()
            )));
        }
        let coefficients = if kind == TransformKind::Quadratic {
            let mut t = [[0.0; 6]; 2];
            t[0].copy_from_slice(&values[..6]);
            t[1].copy_from_slice(&values[6..]);
            Coefficients::Quadratic(t)
        } else {
            Coefficients::Linear(Matrix3::from_row_slice(values))
        };
        Ok(TransformModel { kind, coefficients })
    }

    pub fn apply(&self, p: Point) -> Point {
        match &self.coefficients {
            Coefficients::Linear(m) => {
                let v = m * Vector3::new(p.x, p.y, 1.0);
                Point::new(v.x, v.y)
            }
            Coefficients::Quadratic(t) => {
                let m = monomials(p);
                let dot = |row: &[f64; 6]| row.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>();
                Point::new(dot(&t[0]), dot(&t[1]))
            }
        }
    }

    fn jacobian(&self, p: Point) -> Matrix2<f64> {
        match &self.coefficients {
            Coefficients::Linear(m) => Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]),
            Coefficients::Quadratic(t) => {
                let d = |r: &[f64; 6]| {
                    (
                        2.0 * r[0] * p.x + r[1] * p.y + r[3],
                        r[1] * p.x + 2.0 * r[2] * p.y + r[4],
                    )
                };
                let (a, b) = d(&t[0]);
                let (c, e) = d(&t[1]);
                Matrix2::new(a, b, c, e)
            }
        }
    }

    // Inverse of the linear part (for quadratic models: the x, y, 1 terms).
    fn affine_part_inverse(&self) -> Option<Matrix3<f64>> {
        let m = match &self.coefficients {
            Coefficients::Linear(m) => *m,
            Coefficients::Quadratic(t) => {
                Matrix3::new(t[0][3], t[0][4], t[0][5], t[1][3], t[1][4], t[1][5], 0.0, 0.0, 1.0)
            }
        };
        m.try_inverse()
    }
}

/// Least-squares conditioning limit; larger condition numbers are treated
/// as degenerate point configurations.
pub const MAX_CONDITION: f64 = 1e8;
pub const MIN_AFFINE_POINTS: usize = 3;
pub const MIN_QUADRATIC_POINTS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub model: TransformModel,
    /// `|apply(model, source) − target|` per correspondence.
    pub residuals: Vec<f64>,
}

impl Estimate {
    pub fn mean_residual(&self) -> f64 {
        self.residuals.iter().sum::<f64>() / self.residuals.len().max(1) as f64
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

// Centre at the origin, scale to RMS distance √2: (scale, cx, cy).
fn normalization(points: &[Point]) -> Result<(f64, f64, f64)> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let rms = (points
        .iter()
        .map(|p| (p.x - cx).powi(2) + (p.y - cy).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if !(rms > 1e-9) {
        return Err(Error::DegenerateGeometry("all points coincide".into()));
    }
    Ok((std::f64::consts::SQRT_2 / rms, cx, cy))
}

fn solve_least_squares(design: DMatrix<f64>, rhs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let svd = design.svd(true, true);
    let sv = &svd.singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        return Err(Error::DegenerateGeometry(format!(
            "point configuration is rank deficient (condition {:.3e})",
            if min > 0.0 { max / min } else { f64::INFINITY }
        )));
    }
    rhs.iter()
        .map(|b| {
            svd.solve(b, 0.0)
                .map_err(|e| Error::DegenerateGeometry(e.to_string()))
        })
        .collect()
}

// Coefficients over the monomials of (x, y) of the monomials of the
// normalised coordinates u = s(x − cx), v = s(y − cy).
fn expand_normalized(s: f64, cx: f64, cy: f64) -> [[f64; 6]; 6] {
    let (a, b) = (-s * cx, -s * cy);
    // u = s·x + a, v = s·y + b
    [
        // u²
        [s * s, 0.0, 0.0, 2.0 * s * a, 0.0, a * a],
        // uv
        [0.0, s * s, 0.0, s * b, s * a, a * b],
        // v²
        [0.0, 0.0, s * s, 0.0, 2.0 * s * b, b * b],
        // u
        [0.0, 0.0, 0.0, s, 0.0, a],
        // v
        [0.0, 0.0, 0.0, 0.0, s, b],
        // 1
        [0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    ]
}

/// Affine fit for 3–5 correspondences, quadratic fit for six or more.
pub fn estimate(correspondences: &[Correspondence]) -> Result<Estimate> {
    let n = correspondences.len();
    if n < MIN_AFFINE_POINTS {
        return Err(Error::RegistrationNotPossible { found: n });
    }
    let model = if n < MIN_QUADRATIC_POINTS {
        estimate_affine(correspondences)?
    } else {
        estimate_quadratic(correspondences)?
    };
    let residuals = correspondences
        .iter()
        .map(|c| model.apply(c.source).distance(c.target))
        .collect();
    Ok(Estimate { model, residuals })
}

fn normalized_sets(
    correspondences: &[Correspondence],
) -> Result<((f64, f64, f64), (f64, f64, f64), Vec<Point>, Vec<Point>)> {
    let src: Vec<Point> = correspondences.iter().map(|c| c.source).collect();
    let dst: Vec<Point> = correspondences.iter().map(|c| c.target).collect();
    let ns = normalization(&src)?;
    let nd = normalization(&dst)?;
    let norm = |(s, cx, cy): (f64, f64, f64), p: &Point| Point::new(s * (p.x - cx), s * (p.y - cy));
    let us = src.iter().map(|p| norm(ns, p)).collect();
    let ud = dst.iter().map(|p| norm(nd, p)).collect();
    Ok((ns, nd, us, ud))
}

pub fn estimate_affine(correspondences: &[Correspondence]) -> Result<TransformModel> {
    if correspondences.len() < MIN_AFFINE_POINTS {
        return Err(Error::RegistrationNotPossible {
            found: correspondences.len(),
        });
    }
    let (ns, nd, us, ud) = normalized_sets(correspondences)?;
    let design = DMatrix::from_fn(us.len(), 3, |r, c| [us[r].x, us[r].y, 1.0][c]);
    let bx = DVector::from_iterator(ud.len(), ud.iter().map(|p| p.x));
    let by = DVector::from_iterator(ud.len(), ud.iter().map(|p| p.y));
    let sol = solve_least_squares(design, &[bx, by])?;
    let a = Matrix3::new(
        sol[0][0], sol[0][1], sol[0][2], sol[1][0], sol[1][1], sol[1][2], 0.0, 0.0, 1.0,
    );
    let ts = Matrix3::new(ns.0, 0.0, -ns.0 * ns.1, 0.0, ns.0, -ns.0 * ns.2, 0.0, 0.0, 1.0);
    let td_inv = Matrix3::new(1.0 / nd.0, 0.0, nd.1, 0.0, 1.0 / nd.0, nd.2, 0.0, 0.0, 1.0);
    let m = td_inv * a * ts;
    Ok(TransformModel {
        kind: TransformKind::Affine,
        coefficients: Coefficients::Linear(m),
    })
}

pub fn estimate_quadratic(correspondences: &[Correspondence]) -> Result<TransformModel> {
    if correspondences.len() < MIN_QUADRATIC_POINTS {
        return Err(Error::InsufficientMatches {
            found: correspondences.len(),
            required: MIN_QUADRATIC_POINTS,
        });
    }
    let (ns, nd, us, ud) = normalized_sets(correspondences)?;
    let design = DMatrix::from_fn(us.len(), 6, |r, c| monomials(us[r])[c]);
    let bx = DVector::from_iterator(ud.len(), ud.iter().map(|p| p.x));
    let by = DVector::from_iterator(ud.len(), ud.iter().map(|p| p.y));
    let sol = solve_least_squares(design, &[bx, by])?;
    let expand = expand_normalized(ns.0, ns.1, ns.2);
    let mut theta = [[0.0; 6]; 2];
    for (axis, row) in theta.iter_mut().enumerate() {
        // Normalised output u' = Σ sol_k · m_k(u, v), then x' = u'/s' + c'.
        for k in 0..6 {
            for j in 0..6 {
                row[j] += sol[axis][k] * expand[k][j];
            }
        }
        let (c_out, s_out) = (if axis == 0 { nd.1 } else { nd.2 }, nd.0);
        for v in row.iter_mut() {
            *v /= s_out;
        }
        row[5] += c_out;
    }
    Ok(TransformModel::quadratic(theta))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
    Bicubic,
}

impl FromStr for Interpolation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "nearest" | "1" => Ok(Interpolation::Nearest),
            "bilinear" | "2" => Ok(Interpolation::Bilinear),
            "bicubic" | "3" => Ok(Interpolation::Bicubic),
            other => Err(format!("invalid interpolation {other:?}")),
        }
    }
}

impl fmt::Display for Interpolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interpolation::Nearest => "nearest",
            Interpolation::Bilinear => "bilinear",
            Interpolation::Bicubic => "bicubic",
        })
    }
}

/// Output frame of a resampling: canvas size and where the reference
/// image's origin sits inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub rows: usize,
    pub cols: usize,
    /// `[x, y]` canvas position of reference pixel (0, 0).
    pub ref_offset: [i64; 2],
}

impl Canvas {
    pub fn of_dims(dims: Dims) -> Self {
        Canvas {
            rows: dims.rows,
            cols: dims.cols,
            ref_offset: [0, 0],
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.rows, self.cols)
    }

    /// Reference-frame position of canvas pixel `(row, col)`.
    pub fn to_reference(&self, row: usize, col: usize) -> Point {
        Point::new(
            col as f64 - self.ref_offset[0] as f64,
            row as f64 - self.ref_offset[1] as f64,
        )
    }
}

const EDGE_TOLERANCE: f64 = 1e-6;
/// Canvases larger than this multiple of the reference extent are refused.
pub const MAX_CANVAS_GROWTH: usize = 4;

/// Union bounding box of the reference frame and the mapped border of the
/// sensed image.
pub fn union_canvas(model: &TransformModel, sensed: Dims, reference: Dims) -> Result<Canvas> {
    let (mut x0, mut y0) = (0.0f64, 0.0f64);
    let (mut x1, mut y1) = ((reference.cols - 1) as f64, (reference.rows - 1) as f64);
    let (w, h) = ((sensed.cols - 1) as f64, (sensed.rows - 1) as f64);
    // Corners suffice for linear kinds; quadratic borders may bulge.
    let steps = 64;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        for p in [
            Point::new(t * w, 0.0),
            Point::new(t * w, h),
            Point::new(0.0, t * h),
            Point::new(w, t * h),
        ] {
            let q = model.apply(p);
            if !(q.x.is_finite() && q.y.is_finite()) {
                return Err(Error::ResampleFailure("model maps the border to infinity".into()));
            }
            x0 = x0.min(q.x);
            y0 = y0.min(q.y);
            x1 = x1.max(q.x);
            y1 = y1.max(q.y);
        }
    }
    let lo = |v: f64| (v + EDGE_TOLERANCE).floor() as i64;
    let hi = |v: f64| (v - EDGE_TOLERANCE).ceil() as i64;
    let (ox, oy) = (lo(x0), lo(y0));
    let cols = (hi(x1) - ox + 1) as usize;
    let rows = (hi(y1) - oy + 1) as usize;
    let limit = MAX_CANVAS_GROWTH * reference.rows.max(reference.cols);
    if rows > limit || cols > limit {
        return Err(Error::ResampleFailure(format!(
            "canvas {rows}x{cols} exceeds {limit} pixels per side"
        )));
    }
    Ok(Canvas {
        rows,
        cols,
        ref_offset: [-ox, -oy],
    })
}

pub const INVERSION_ITERATIONS: usize = 20;
pub const INVERSION_TOLERANCE: f64 = 1e-3;

/// Maps every canvas pixel back into sensed coordinates; `None` where the
/// inversion fails.
fn inverse_map(model: &TransformModel, canvas: &Canvas) -> Result<Vec<Option<Point>>> {
    let inv = model
        .affine_part_inverse()
        .ok_or_else(|| Error::ResampleFailure("model is not invertible".into()))?;
    let linear = model.matrix().is_some();
    let mut out = vec![None; canvas.rows * canvas.cols];
    par::for_each_row(&mut out, canvas.cols, |r, row| {
        let mut warm: Option<Point> = None;
        for (c, slot) in row.iter_mut().enumerate() {
            let q = canvas.to_reference(r, c);
            let guess = inv * Vector3::new(q.x, q.y, 1.0);
            let guess = Point::new(guess.x, guess.y);
            if linear {
                *slot = Some(guess);
                continue;
            }
            let p = newton_invert(model, q, warm.unwrap_or(guess))
                .or_else(|| warm.and_then(|_| newton_invert(model, q, guess)));
            warm = p;
            *slot = p;
        }
    });
    Ok(out)
}

// Damped Newton iteration for model(p) = q.
fn newton_invert(model: &TransformModel, q: Point, start: Point) -> Option<Point> {
    let mut p = start;
    let target = Vector2::new(q.x, q.y);
    let residual = |p: Point| {
        let f = model.apply(p);
        Vector2::new(f.x, f.y) - target
    };
    let mut r = residual(p);
    for _ in 0..INVERSION_ITERATIONS {
        if r.norm() < INVERSION_TOLERANCE {
            return Some(p);
        }
        let step = model.jacobian(p).try_inverse()? * r;
        let mut lambda = 1.0;
        loop {
            let cand = Point::new(p.x - lambda * step.x, p.y - lambda * step.y);
            let rc = residual(cand);
            if rc.norm() < r.norm() || lambda < 1.0 / 64.0 {
                p = cand;
                r = rc;
                break;
            }
            lambda *= 0.5;
        }
    }
    (r.norm() < INVERSION_TOLERANCE).then_some(p)
}

fn inside(p: Point, dims: Dims) -> bool {
    p.x >= -EDGE_TOLERANCE
        && p.y >= -EDGE_TOLERANCE
        && p.x <= (dims.cols - 1) as f64 + EDGE_TOLERANCE
        && p.y <= (dims.rows - 1) as f64 + EDGE_TOLERANCE
}

fn clamp_index(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t.powi(3) - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t.powi(3) - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Intensity of `image` at a continuous position already known to lie
/// inside it.
pub fn sample(image: &GrayImage, p: Point, interpolation: Interpolation) -> u8 {
    let Dims { rows, cols } = image.dims();
    let px = |r: isize, c: isize| image.get(clamp_index(r, rows), clamp_index(c, cols)) as f64;
    match interpolation {
        Interpolation::Nearest => px((p.y + 0.5).floor() as isize, (p.x + 0.5).floor() as isize) as u8,
        Interpolation::Bilinear => {
            let (c0, r0) = (p.x.floor(), p.y.floor());
            let (fx, fy) = (p.x - c0, p.y - r0);
            let (c0, r0) = (c0 as isize, r0 as isize);
            let top = px(r0, c0) * (1.0 - fx) + px(r0, c0 + 1) * fx;
            let bottom = px(r0 + 1, c0) * (1.0 - fx) + px(r0 + 1, c0 + 1) * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            (v + 0.5).floor().clamp(0.0, 255.0) as u8
        }
        Interpolation::Bicubic => {
            let (c0, r0) = (p.x.floor(), p.y.floor());
            let (fx, fy) = (p.x - c0, p.y - r0);
            let (c0, r0) = (c0 as isize, r0 as isize);
            let mut v = 0.0;
            for j in -1..=2isize {
                let wy = cubic_weight(fy - j as f64);
                for i in -1..=2isize {
                    v += wy * cubic_weight(fx - i as f64) * px(r0 + j, c0 + i);
                }
            }
            (v + 0.5).floor().clamp(0.0, 255.0) as u8
        }
    }
}

/// A resampled image with its valid-pixel mask and frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampled<T> {
    pub image: T,
    pub valid: BinaryMask,
    pub canvas: Canvas,
}

/// Resamples `sensed` onto `canvas`; invalid pixels are 0.
pub fn resample_into(
    sensed: &GrayImage,
    model: &TransformModel,
    interpolation: Interpolation,
    canvas: Canvas,
) -> Result<Resampled<GrayImage>> {
    let map = inverse_map(model, &canvas)?;
    let dims = sensed.dims();
    let valid: Vec<bool> = map.iter().map(|p| p.is_some_and(|p| inside(p, dims))).collect();
    let data: Vec<u8> = par::map_range(map.len(), |i| match map[i] {
        Some(p) if valid[i] => sample(sensed, p, interpolation),
        _ => 0,
    });
    Ok(Resampled {
        image: GrayImage::new(canvas.rows, canvas.cols, data)?,
        valid: BinaryMask::new(canvas.rows, canvas.cols, valid)?,
        canvas,
    })
}

/// Resamples `sensed` onto the union canvas of both frames.
pub fn resample(
    sensed: &GrayImage,
    model: &TransformModel,
    interpolation: Interpolation,
    reference: Dims,
) -> Result<Resampled<GrayImage>> {
    let canvas = union_canvas(model, sensed.dims(), reference)?;
    resample_into(sensed, model, interpolation, canvas)
}

/// Colour variant of [`resample`]; channels share the inverse mapping.
pub fn resample_rgb(
    sensed: &RgbImage,
    model: &TransformModel,
    interpolation: Interpolation,
    reference: Dims,
) -> Result<Resampled<RgbImage>> {
    let canvas = union_canvas(model, sensed.dims(), reference)?;
    let channels: Vec<Resampled<GrayImage>> = (0..3)
        .map(|k| resample_into(&sensed.channel(k), model, interpolation, canvas))
        .collect::<Result<_>>()?;
    let image = RgbImage::from_channels(&channels[0].image, &channels[1].image, &channels[2].image)?;
    Ok(Resampled {
        image,
        valid: channels[0].valid.clone(),
        canvas,
    })
}

/// Places `reference` at its offset in the canvas: image plus coverage mask.
pub fn place_reference(reference: &GrayImage, canvas: &Canvas) -> (GrayImage, BinaryMask) {
    let [ox, oy] = canvas.ref_offset;
    let at = |r: usize, c: usize| {
        let (rr, rc) = (r as i64 - oy, c as i64 - ox);
        (rr >= 0 && rc >= 0 && (rr as usize) < reference.rows() && (rc as usize) < reference.cols())
            .then(|| reference.get(rr as usize, rc as usize))
    };
    let image = GrayImage::from_fn(canvas.rows, canvas.cols, |r, c| at(r, c).unwrap_or(0));
    let mask = BinaryMask::from_fn(canvas.dims(), |r, c| at(r, c).is_some());
    (image, mask)
}

/// 50% blend of the reference and the registered image where both exist,
/// either one alone elsewhere.
pub fn overlay(reference: &GrayImage, registered: &Resampled<GrayImage>) -> GrayImage {
    let (placed, covered) = place_reference(reference, &registered.canvas);
    GrayImage::from_fn(registered.canvas.rows, registered.canvas.cols, |r, c| {
        let a = placed.get(r, c) as u16;
        let b = registered.image.get(r, c) as u16;
        match (covered.get(r, c), registered.valid.get(r, c)) {
            (true, true) => ((a + b + 1) / 2) as u8,
            (true, false) => a as u8,
            (false, true) => b as u8,
            (false, false) => 0,
        }
    })
}
