//! Synthetic fundus-like images with known vessel trees.
//!
//! Vessels are Gaussian ridges (full width at half maximum equal to the
//! branch width) drawn along straight segments; a branch's children start at
//! its end. Randomness (noise, generated trees) comes from Xoshiro256**
//! seeded through SplitMix64, so a spec renders to the same bytes everywhere.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::enhancement::Polarity;
use crate::error::{Error, Result};
use crate::par;
use crate::raster::GrayImage;
use crate::transform::{resample_into, Canvas, Interpolation, Point, TransformKind, TransformModel};

pub const MIN_WIDTH: f64 = 2.0;
pub const MIN_SIBLING_ANGLE: f64 = 30.0;
const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

/// One straight vessel piece. Angles follow the image convention: degrees,
/// counter-clockwise, 0° along +x, with y growing downward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    /// `[x, y]`; required on roots, forbidden on children.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<[f64; 2]>,
    pub angle: f64,
    pub length: f64,
    pub width: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<BranchSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VesselTreeSpec {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub branches: Vec<BranchSpec>,
    pub polarity: Polarity,
    /// Background intensity before illumination and noise.
    pub background: f64,
    /// Peak vessel contrast against the background.
    pub contrast: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Left-to-right linear illumination ramp, peak to peak.
    #[serde(default)]
    pub illumination: f64,
    /// Radius of the circular field of view around the image centre;
    /// everything outside is set to 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_radius: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBifurcation {
    pub center: Point,
    /// Direction of the parent (pointing back along it) followed by the two
    /// children, degrees.
    pub branch_angles: [f64; 3],
    pub widths: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedTransform {
    pub kind: TransformKind,
    pub coefficients: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub coords: String,
    pub bifurcations: Vec<GroundTruthBifurcation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<AppliedTransform>,
}

fn direction(angle_deg: f64) -> (f64, f64) {
    let (s, c) = angle_deg.to_radians().sin_cos();
    (c, -s)
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    a: Point,
    b: Point,
    width: f64,
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    p.distance(Point::new(a.x + t * dx, a.y + t * dy))
}

fn validate_branch(b: &BranchSpec, is_root: bool, path: &str) -> Result<()> {
    let err = |msg: String| Err(Error::Spec(format!("{path}: {msg}")));
    if is_root != b.start.is_some() {
        return err(if is_root {
            "root branch needs a start point".into()
        } else {
            "child branches start at their parent's end; remove \"start\"".into()
        });
    }
    if !(b.width >= MIN_WIDTH) {
        return err(format!("width {} is below {MIN_WIDTH}", b.width));
    }
    if !(b.length > 0.0) || !b.angle.is_finite() {
        return err("length must be positive and angle finite".into());
    }
    if b.children.len() > 2 {
        return err(format!("{} children; at most 2 are allowed", b.children.len()));
    }
    if let [c1, c2] = &b.children[..] {
        let d = (c1.angle - c2.angle).rem_euclid(360.0);
        if d.min(360.0 - d) < MIN_SIBLING_ANGLE {
            return err(format!(
                "sibling branches are {:.1}° apart; at least {MIN_SIBLING_ANGLE}° required",
                d.min(360.0 - d)
            ));
        }
    }
    for (k, c) in b.children.iter().enumerate() {
        validate_branch(c, false, &format!("{path}.children[{k}]"))?;
    }
    Ok(())
}

impl VesselTreeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Spec("image dimensions must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.background.is_finite() || !self.contrast.is_finite() {
            return Err(Error::Spec(
                "noise_sigma must be non-negative, background and contrast finite".into(),
            ));
        }
        for (k, b) in self.branches.iter().enumerate() {
            validate_branch(b, true, &format!("branches[{k}]"))?;
        }
        Ok(())
    }

    fn collect(&self) -> (Vec<Segment>, Vec<GroundTruthBifurcation>) {
        fn walk(
            b: &BranchSpec,
            start: Point,
            segs: &mut Vec<Segment>,
            bifs: &mut Vec<GroundTruthBifurcation>,
        ) {
            let (dx, dy) = direction(b.angle);
            let end = Point::new(start.x + b.length * dx, start.y + b.length * dy);
            segs.push(Segment {
                a: start,
                b: end,
                width: b.width,
            });
            if let [c1, c2] = &b.children[..] {
                bifs.push(GroundTruthBifurcation {
                    center: end,
                    branch_angles: [
                        (b.angle + 180.0).rem_euclid(360.0),
                        c1.angle.rem_euclid(360.0),
                        c2.angle.rem_euclid(360.0),
                    ],
                    widths: [b.width, c1.width, c2.width],
                });
            }
            for c in &b.children {
                walk(c, end, segs, bifs);
            }
        }
        let mut segs = Vec::new();
        let mut bifs = Vec::new();
        for b in &self.branches {
            let [x, y] = b.start.expect("validated root");
            walk(b, Point::new(x, y), &mut segs, &mut bifs);
        }
        (segs, bifs)
    }
}

/// Renders the spec; noise is drawn in raster order from the seed.
pub fn render(spec: &VesselTreeSpec) -> Result<(GrayImage, GroundTruth)> {
    spec.validate()?;
    let (segments, bifurcations) = spec.collect();
    let (rows, cols) = (spec.rows, spec.cols);

    // Ridge strength per pixel: max over segments of the Gaussian profile.
    let mut ridge = vec![0.0f64; rows * cols];
    par::for_each_row(&mut ridge, cols, |r, row| {
        let y = r as f64;
        for s in &segments {
            let sigma = s.width / FWHM_PER_SIGMA;
            let reach = 4.0 * sigma + 1.0;
            if y < s.a.y.min(s.b.y) - reach || y > s.a.y.max(s.b.y) + reach {
                continue;
            }
            let c0 = (s.a.x.min(s.b.x) - reach).floor().max(0.0) as usize;
            let c1 = ((s.a.x.max(s.b.x) + reach).ceil().max(0.0) as usize).min(cols - 1);
            for c in c0..=c1.max(c0).min(cols - 1) {
                let d = segment_distance(Point::new(c as f64, y), s.a, s.b);
                let g = (-d * d / (2.0 * sigma * sigma)).exp();
                if g > row[c] {
                    row[c] = g;
                }
            }
        }
    });

    let sign = match spec.polarity {
        Polarity::BrightVessel => 1.0,
        Polarity::DarkVessel => -1.0,
    };
    let mut rng = Xoshiro256StarStar::seed_from_u64(spec.seed);
    let noise = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise_sigma).expect("validated sigma"));
    let (cx, cy) = ((cols - 1) as f64 / 2.0, (rows - 1) as f64 / 2.0);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let ramp = if cols > 1 {
                spec.illumination * (c as f64 / (cols - 1) as f64 - 0.5)
            } else {
                0.0
            };
            let mut v = spec.background + ramp + sign * spec.contrast * ridge[r * cols + c];
            if let Some(n) = &noise {
                v += n.sample(&mut rng);
            }
            let outside = spec
                .mask_radius
                .is_some_and(|rad| (c as f64 - cx).hypot(r as f64 - cy) > rad);
            data.push(if outside {
                0
            } else {
                (v + 0.5).floor().clamp(0.0, 255.0) as u8
            });
        }
    }
    Ok((
        GrayImage::new(rows, cols, data)?,
        GroundTruth {
            coords: "xy0".into(),
            bifurcations,
            transform: None,
        },
    ))
}

/// Resamples `image` by `model` onto a canvas of its own size and maps the
/// ground truth along.
pub fn warp(
    image: &GrayImage,
    truth: &GroundTruth,
    model: &TransformModel,
) -> Result<(GrayImage, GroundTruth)> {
    let out = resample_into(
        image,
        model,
        Interpolation::Bilinear,
        Canvas::of_dims(image.dims()),
    )?;
    let bifurcations = truth
        .bifurcations
        .iter()
        .map(|b| {
            let center = model.apply(b.center);
            let branch_angles = b.branch_angles.map(|a| {
                let (dx, dy) = direction(a);
                let q = model.apply(Point::new(b.center.x + 20.0 * dx, b.center.y + 20.0 * dy));
                (-(q.y - center.y)).atan2(q.x - center.x).to_degrees().rem_euclid(360.0)
            });
            GroundTruthBifurcation {
                center,
                branch_angles,
                widths: b.widths,
            }
        })
        .collect();
    Ok((
        out.image,
        GroundTruth {
            coords: "xy0".into(),
            bifurcations,
            transform: Some(AppliedTransform {
                kind: model.kind(),
                coefficients: model.coefficients(),
            }),
        },
    ))
}

/// Knobs of [`random_tree_spec`].
#[derive(Clone, Debug, PartialEq)]
pub struct RandomTreeParams {
    pub rows: usize,
    pub cols: usize,
    pub bifurcations: usize,
    pub polarity: Polarity,
    pub noise_sigma: f64,
    pub illumination: f64,
    /// Minimum distance between unrelated vessels and around bifurcations.
    pub clearance: f64,
}

impl Default for RandomTreeParams {
    fn default() -> Self {
        RandomTreeParams {
            rows: 1024,
            cols: 1024,
            bifurcations: 20,
            polarity: Polarity::BrightVessel,
            noise_sigma: 2.0,
            illumination: 20.0,
            clearance: 25.0,
        }
    }
}

struct Node {
    start: Point,
    angle: f64,
    length: f64,
    width: f64,
    parent: Option<usize>,
    children: Vec<usize>,
}

impl Node {
    fn end(&self) -> Point {
        let (dx, dy) = direction(self.angle);
        Point::new(self.start.x + self.length * dx, self.start.y + self.length * dy)
    }
}

/// A random tree with at least `params.bifurcations` bifurcations kept apart
/// from each other and from the field-of-view rim.
pub fn random_tree_spec(seed: u64, params: &RandomTreeParams) -> Result<VesselTreeSpec> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let (cx, cy) = ((params.cols - 1) as f64 / 2.0, (params.rows - 1) as f64 / 2.0);
    let mask_radius = 0.47 * params.rows.min(params.cols) as f64;
    let inner = mask_radius - params.clearance;
    let centre = Point::new(cx, cy);
    let mut nodes: Vec<Node> = Vec::new();
    let mut bifurcations = 0usize;

    let clear_of = |nodes: &[Node], a: Point, b: Point, skip: &[usize], from: f64| -> bool {
        let len = a.distance(b);
        let steps = (len / 2.0).ceil() as usize;
        (0..=steps).all(|k| {
            let t = k as f64 / steps.max(1) as f64;
            let p = Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
            if p.distance(centre) > inner {
                return false;
            }
            if t * len < from {
                return true;
            }
            nodes.iter().enumerate().all(|(i, n)| {
                skip.contains(&i) || segment_distance(p, n.start, n.end()) >= params.clearance
            })
        })
    };

    let mut queue: std::collections::VecDeque<usize> = Default::default();
    let mut attempts = 0;
    while bifurcations < params.bifurcations {
        attempts += 1;
        if attempts > 20_000 {
            return Err(Error::Spec(format!(
                "could not place {} bifurcations (placed {bifurcations})",
                params.bifurcations
            )));
        }
        let Some(tip) = queue.pop_front() else {
            // New root entering from near the rim, heading roughly inward.
            let phi: f64 = rng.random_range(0.0..360.0);
            let (dx, dy) = direction(phi);
            let start = Point::new(cx + (inner - 2.0) * dx, cy + (inner - 2.0) * dy);
            let angle = (phi + 180.0 + rng.random_range(-25.0..25.0)).rem_euclid(360.0);
            let length = rng.random_range(90.0..150.0);
            let node = Node {
                start,
                angle,
                length,
                width: rng.random_range(6.0..10.0),
                parent: None,
                children: vec![],
            };
            let end = node.end();
            if clear_of(&nodes, start, end, &[], 0.0) {
                nodes.push(node);
                queue.push_back(nodes.len() - 1);
            }
            continue;
        };
        let parent = &nodes[tip];
        let origin = parent.end();
        // The bifurcation centre must be clear of everything but its parent.
        let centre_ok = nodes.iter().enumerate().all(|(i, n)| {
            i == tip || segment_distance(origin, n.start, n.end()) >= 1.5 * params.clearance
        });
        if !centre_ok || parent.width < 3.5 {
            continue;
        }
        for _ in 0..12 {
            let spread_a: f64 = rng.random_range(15.0..65.0);
            let spread_b: f64 = rng.random_range(30.0..95.0);
            let (a1, a2) = if rng.random_bool(0.5) {
                (parent.angle + spread_a, parent.angle - spread_b)
            } else {
                (parent.angle - spread_a, parent.angle + spread_b)
            };
            let w1 = (parent.width * rng.random_range(0.65..0.95)).max(3.0);
            let w2 = (parent.width * rng.random_range(0.4..0.8)).max(3.0);
            let l1 = rng.random_range(70.0..130.0);
            let l2 = rng.random_range(70.0..130.0);
            let c1 = Node {
                start: origin,
                angle: a1.rem_euclid(360.0),
                length: l1,
                width: w1,
                parent: Some(tip),
                children: vec![],
            };
            let c2 = Node {
                start: origin,
                angle: a2.rem_euclid(360.0),
                length: l2,
                width: w2,
                parent: Some(tip),
                children: vec![],
            };
            let near = params.clearance + 5.0;
            if !clear_of(&nodes, origin, c1.end(), &[tip], near)
                || !clear_of(&nodes, origin, c2.end(), &[tip], near)
                || segment_distance(c2.end(), origin, c1.end()) < params.clearance
                || segment_distance(c1.end(), origin, c2.end()) < params.clearance
            {
                continue;
            }
            let i1 = nodes.len();
            nodes.push(c1);
            nodes.push(c2);
            nodes[tip].children = vec![i1, i1 + 1];
            queue.push_back(i1);
            queue.push_back(i1 + 1);
            bifurcations += 1;
            break;
        }
    }

    fn build(nodes: &[Node], i: usize) -> BranchSpec {
        let n = &nodes[i];
        BranchSpec {
            start: n.parent.is_none().then_some([n.start.x, n.start.y]),
            angle: n.angle,
            length: n.length,
            width: n.width,
            children: n.children.iter().map(|&c| build(nodes, c)).collect(),
        }
    }
    let branches = (0..nodes.len())
        .filter(|&i| nodes[i].parent.is_none())
        .map(|i| build(&nodes, i))
        .collect();
    let (background, contrast) = match params.polarity {
        Polarity::BrightVessel => (60.0, 120.0),
        Polarity::DarkVessel => (170.0, 90.0),
    };
    Ok(VesselTreeSpec {
        seed,
        rows: params.rows,
        cols: params.cols,
        branches,
        polarity: params.polarity,
        background,
        contrast,
        noise_sigma: params.noise_sigma,
        illumination: params.illumination,
        mask_radius: Some(mask_radius),
    })
}

/// A single Y: parent from the left, children at the given angles.
pub fn y_spec(size: usize, child_angles: [f64; 2], widths: [f64; 3], polarity: Polarity) -> VesselTreeSpec {
    let c = (size - 1) as f64 / 2.0;
    let arm = size as f64 * 0.4;
    VesselTreeSpec {
        seed: 1,
        rows: size,
        cols: size,
        branches: vec![BranchSpec {
            start: Some([c - arm, c]),
            angle: 0.0,
            length: arm,
            width: widths[0],
            children: vec![
                BranchSpec {
                    start: None,
                    angle: child_angles[0],
                    length: arm,
                    width: widths[1],
                    children: vec![],
                },
                BranchSpec {
                    start: None,
                    angle: child_angles[1],
                    length: arm,
                    width: widths[2],
                    children: vec![],
                },
            ],
        }],
        polarity,
        background: 60.0,
        contrast: 120.0,
        noise_sigma: 0.0,
        illumination: 0.0,
        mask_radius: None,
    }
}
