//! Bifurcation (y-feature) detection on the vessel mask.
//!
//! The mask is thinned to a one-pixel skeleton; skeleton pixels with at
//! least three skeleton neighbours are candidates, merged per 8-connected
//! cluster into their centroid. Candidates in crowded 41×41 windows are
//! discarded, and the rest must show exactly three vessel branches on the
//! radius-20 ring of the enhanced image around them.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::par;
use crate::raster::{
    index_area, index_circumference, label_components, line_slope_angle, neighbors_8, BinaryMask,
    Dims, GrayImage, Pixel,
};

/// Side of the square bifurcation region.
pub const REGION_SIZE: usize = 41;
pub const RING_RADIUS: usize = REGION_SIZE / 2;

// Deletion tables of the two thinning sub-iterations, indexed by the
// neighbourhood byte (bit k set when neighbour k, counter-clockwise from
// east, is foreground).
fn thinning_tables() -> &'static [[bool; 256]; 2] {
    static TABLES: OnceLock<[[bool; 256]; 2]> = OnceLock::new();
    TABLES.get_or_init(|| {
        let mut tables = [[false; 256]; 2];
        for code in 0..256usize {
            // x[1..=8] with x[9] = x[1]
            let mut x = [false; 10];
            for k in 0..8 {
                x[k + 1] = code & (1 << k) != 0;
            }
            x[9] = x[1];

            let crossings = (1..=4)
                .filter(|&i| !x[2 * i - 1] && (x[2 * i] || x[2 * i + 1]))
                .count();
            let n1 = (1..=4).filter(|&k| x[2 * k - 1] || x[2 * k]).count();
            let n2 = (1..=4).filter(|&k| x[2 * k] || x[2 * k + 1]).count();
            let thin_enough = (2..=3).contains(&n1.min(n2));
            if crossings != 1 || !thin_enough {
                continue;
            }
            tables[0][code] = !((x[2] || x[3] || !x[8]) && x[1]);
            tables[1][code] = !((x[6] || x[7] || !x[4]) && x[5]);
        }
        tables
    })
}

fn neighbourhood_code(mask: &BinaryMask, r: usize, c: usize) -> usize {
    neighbors_8()
        .iter()
        .enumerate()
        .filter(|(_, &(dr, dc))| mask.get_signed(r as isize + dr, c as isize + dc))
        .fold(0, |code, (k, _)| code | (1 << k))
}

/// One-pixel-wide, connectivity-preserving thinning (two-subiteration
/// parallel scheme), repeated until no pixel changes.
pub fn skeletonize(mask: &BinaryMask) -> BinaryMask {
    let tables = thinning_tables();
    let mut skel = mask.clone();
    let cols = mask.dims().cols;
    let mut live: Vec<usize> = mask
        .data()
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect();
    loop {
        let mut changed = false;
        for table in tables {
            let doomed: Vec<usize> = live
                .iter()
                .copied()
                .filter(|&i| table[neighbourhood_code(&skel, i / cols, i % cols)])
                .collect();
            if doomed.is_empty() {
                continue;
            }
            changed = true;
            for &i in &doomed {
                skel.data_mut()[i] = false;
            }
            live.retain(|&i| skel.data()[i]);
        }
        if !changed {
            return skel;
        }
    }
}

/// Skeleton pixels with three or more skeleton neighbours.
pub fn bifurcation_candidates(skeleton: &BinaryMask) -> BinaryMask {
    BinaryMask::from_fn(skeleton.dims(), |r, c| {
        skeleton.get(r, c) && neighbourhood_code(skeleton, r, c).count_ones() >= 3
    })
}

/// Replaces each 8-connected cluster of candidates by its centroid
/// (round-half-up per coordinate). Output is in row-major order.
pub fn cluster_candidates(candidates: &BinaryMask) -> Vec<Pixel> {
    let labels = label_components(candidates);
    let mut sums = vec![(0usize, 0usize); labels.num_labels()];
    let cols = candidates.dims().cols;
    for (i, &l) in labels.labels.iter().enumerate() {
        if l != 0 {
            let s = &mut sums[l as usize - 1];
            s.0 += i / cols;
            s.1 += i % cols;
        }
    }
    let mut points: Vec<Pixel> = sums
        .iter()
        .zip(&labels.counts)
        .map(|(&(rs, cs), &n)| {
            // floor(sum/n + 1/2) in integers
            Pixel::new((2 * rs + n) / (2 * n), (2 * cs + n) / (2 * n))
        })
        .collect();
    points.sort();
    points
}

/// Drops every point that shares a `window × window` neighbourhood with
/// more than two points (itself included), along with all of those points.
pub fn density_filter(points: &[Pixel], window: usize) -> Vec<Pixel> {
    let half = (window / 2) as isize;
    let near = |a: &Pixel, b: &Pixel| {
        (a.row as isize - b.row as isize).abs() <= half
            && (a.col as isize - b.col as isize).abs() <= half
    };
    let mut doomed = vec![false; points.len()];
    for p in points {
        let members: Vec<usize> = (0..points.len()).filter(|&j| near(p, &points[j])).collect();
        if members.len() > 2 {
            for j in members {
                doomed[j] = true;
            }
        }
    }
    points
        .iter()
        .zip(&doomed)
        .filter(|(_, &d)| !d)
        .map(|(p, _)| *p)
        .collect()
}

/// The radius-20 ring of the 41×41 region, in angular order.
pub fn region_ring() -> &'static [Pixel] {
    static RING: OnceLock<Vec<Pixel>> = OnceLock::new();
    RING.get_or_init(|| index_circumference(REGION_SIZE).expect("41 is a valid ring size"))
}

pub fn region_center() -> Pixel {
    Pixel::new(RING_RADIUS, RING_RADIUS)
}

/// A validated bifurcation.
#[derive(Clone, Debug, PartialEq)]
pub struct BifurcationFeature {
    /// Centre in the full image.
    pub index: Pixel,
    /// Branch positions on the region ring, in angular order.
    pub branch_positions: [Pixel; 3],
    /// 41×41 crop of the enhanced image centred on `index`.
    pub region: GrayImage,
    /// Dimensions of the source image.
    pub source_dims: Dims,
}

impl BifurcationFeature {
    /// Branch directions in degrees, measured from the region centre.
    pub fn branch_angles(&self) -> [f64; 3] {
        self.branch_positions.map(|p| {
            line_slope_angle(region_center(), p)
                .expect("ring pixels differ from the centre")
                .1
        })
    }

    /// Branch position translated into full-image coordinates.
    pub fn branch_in_image(&self, k: usize) -> Pixel {
        let p = self.branch_positions[k];
        Pixel::new(
            self.index.row + p.row - RING_RADIUS,
            self.index.col + p.col - RING_RADIUS,
        )
    }
}

/// Why a candidate was not accepted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "cause")]
pub enum Rejection {
    /// Closer than the ring radius to the image border.
    Border,
    /// Fewer than three above-threshold arcs on the ring.
    TooFewArcs { arcs: usize },
    /// Fewer than three branches remain after the angular separation rule.
    TooFewAfterSeparation { remaining: usize },
}

/// Ring-profile validation constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationParams {
    pub threshold_factor: f64,
    pub min_separation_deg: f64,
    pub density_window: usize,
}

impl Default for ValidationParams {
    fn default() -> Self {
        ValidationParams {
            threshold_factor: 1.3,
            min_separation_deg: 25.0,
            density_window: REGION_SIZE,
        }
    }
}

/// Maximal runs of ring samples strictly above `threshold`, treating the
/// profile as circular. Each run lists ring indexes in traversal order.
pub fn above_threshold_arcs(profile: &[f64], threshold: f64) -> Vec<Vec<usize>> {
    let n = profile.len();
    let above: Vec<bool> = profile.iter().map(|&v| v > threshold).collect();
    let Some(start) = (0..n).find(|&k| !above[k]) else {
        return if n == 0 { vec![] } else { vec![(0..n).collect()] };
    };
    let mut arcs = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for step in 1..=n {
        let k = (start + step) % n;
        if above[k] {
            current.push(k);
        } else if !current.is_empty() {
            arcs.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        arcs.push(current);
    }
    arcs
}

fn circular_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Ring-profile test of one candidate against the enhanced image.
pub fn validate_bifurcation(
    enhanced: &GrayImage,
    point: Pixel,
    params: &ValidationParams,
) -> std::result::Result<BifurcationFeature, Rejection> {
    let region = enhanced
        .crop_centered(point, RING_RADIUS)
        .map_err(|_| Rejection::Border)?;
    let ring = region_ring();
    let center = region_center();
    let profile: Vec<f64> = ring.iter().map(|&p| region.at(p) as f64).collect();
    let mean = profile.iter().sum::<f64>() / profile.len() as f64;
    let arcs = above_threshold_arcs(&profile, params.threshold_factor * mean);
    if arcs.len() < 3 {
        return Err(Rejection::TooFewArcs { arcs: arcs.len() });
    }

    // Peak of each arc: strongest sample, first in traversal order on ties.
    let mut peaks: Vec<usize> = arcs
        .iter()
        .map(|arc| {
            let mut best = arc[0];
            for &k in arc {
                if profile[k] > profile[best] {
                    best = k;
                }
            }
            best
        })
        .collect();

    // Keep peaks at least `min_separation_deg` from every stronger one.
    peaks.sort_by(|&a, &b| profile[b].total_cmp(&profile[a]).then(a.cmp(&b)));
    let angle = |k: usize| line_slope_angle(center, ring[k]).expect("ring excludes centre").1;
    let mut kept: Vec<usize> = Vec::new();
    for k in peaks {
        if kept
            .iter()
            .all(|&j| circular_gap(angle(j), angle(k)) >= params.min_separation_deg)
        {
            kept.push(k);
        }
    }
    if kept.len() < 3 {
        return Err(Rejection::TooFewAfterSeparation {
            remaining: kept.len(),
        });
    }
    if kept.len() > 3 {
        let band_sum = |k: usize| -> u64 {
            index_area(center, ring[k], region.dims())
                .expect("ring lies inside the region")
                .iter()
                .map(|&p| region.at(p) as u64)
                .sum()
        };
        let mut scored: Vec<(u64, usize)> = kept.iter().map(|&k| (band_sum(k), k)).collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        kept = scored.into_iter().take(3).map(|(_, k)| k).collect();
    }
    kept.sort_unstable();
    Ok(BifurcationFeature {
        index: point,
        branch_positions: [ring[kept[0]], ring[kept[1]], ring[kept[2]]],
        region,
        source_dims: enhanced.dims(),
    })
}

/// Intermediate products of bifurcation detection.
#[derive(Clone, Debug)]
pub struct BifurcationDetection {
    pub skeleton: BinaryMask,
    pub candidates: BinaryMask,
    pub clustered: Vec<Pixel>,
    pub dense_filtered: Vec<Pixel>,
    pub rejections: Vec<(Pixel, Rejection)>,
    /// Accepted features sorted by centre (row-major).
    pub features: Vec<BifurcationFeature>,
}

/// Skeleton → candidates → clusters → density filter → ring validation.
pub fn detect_bifurcations(
    enhanced: &GrayImage,
    vessels: &BinaryMask,
    params: &ValidationParams,
) -> Result<BifurcationDetection> {
    let skeleton = skeletonize(vessels);
    let candidates = bifurcation_candidates(&skeleton);
    let clustered = cluster_candidates(&candidates);
    let dense_filtered = density_filter(&clustered, params.density_window);
    let outcomes = par::map_slice(&dense_filtered, |&p| (p, validate_bifurcation(enhanced, p, params)));
    let mut features = Vec::new();
    let mut rejections = Vec::new();
    for (p, outcome) in outcomes {
        match outcome {
            Ok(f) => features.push(f),
            Err(r) => rejections.push((p, r)),
        }
    }
    Ok(BifurcationDetection {
        skeleton,
        candidates,
        clustered,
        dense_filtered,
        rejections,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from_rows(rows: &[&str]) -> BinaryMask {
        let dims = Dims::new(rows.len(), rows[0].len());
        BinaryMask::from_fn(dims, |r, c| rows[r].as_bytes()[c] == b'#')
    }

    fn component_count(mask: &BinaryMask) -> usize {
        label_components(mask).num_labels()
    }

    /// Synthetic enhanced region: dark background with bright Gaussian arms
    /// leaving the centre at the given angles (degrees) and peak levels.
    fn arms_image(size: usize, arms: &[(f64, f64)], width_sigma: f64) -> GrayImage {
        let c = (size / 2) as f64;
        GrayImage::from_fn(size, size, |r, col| {
            let (x, y) = (col as f64 - c, -(r as f64 - c));
            let mut v: f64 = 10.0;
            for &(deg, level) in arms {
                let (s, co) = deg.to_radians().sin_cos();
                let t = x * co + y * s;
                if t < 0.0 {
                    continue;
                }
                let d = -x * s + y * co;
                v = v.max(10.0 + level * (-d * d / (2.0 * width_sigma * width_sigma)).exp());
            }
            v.round().min(255.0) as u8
        })
    }

    #[test]
    fn thin_line_is_unchanged() {
        let m = mask_from_rows(&[".....", "#####", "....."]);
        assert_eq!(skeletonize(&m), m);
        let diag = BinaryMask::from_fn(Dims::new(8, 8), |r, c| r == c);
        assert_eq!(skeletonize(&diag), diag);
    }

    #[test]
    fn bar_thins_to_single_path() {
        let dims = Dims::new(15, 60);
        let bar = BinaryMask::from_fn(dims, |r, c| (5..10).contains(&r) && (5..55).contains(&c));
        let skel = skeletonize(&bar);
        assert!(skel.is_subset_of(&bar));
        assert_eq!(component_count(&skel), 1);
        // one pixel per column along the interior of the bar
        for c in 8..52 {
            let n = (0..15).filter(|&r| skel.get(r, c)).count();
            assert_eq!(n, 1, "column {c}");
        }
        // no skeleton pixel has a redundant 4-neighbour square
        assert_eq!(bifurcation_candidates(&skel).count(), 0);
        let span: Vec<usize> = skel.pixels().map(|p| p.col).collect();
        assert!(span.iter().min().unwrap() <= &8 && span.iter().max().unwrap() >= &51);
    }

    #[test]
    fn empty_mask_has_empty_skeleton() {
        let m = BinaryMask::empty(Dims::new(5, 5));
        assert_eq!(skeletonize(&m), m);
    }

    #[test]
    fn candidate_rule() {
        let line = BinaryMask::from_fn(Dims::new(5, 9), |r, _| r == 2);
        assert_eq!(bifurcation_candidates(&line).count(), 0);
        let plus = mask_from_rows(&["..#..", "..#..", "#####", "..#..", "..#.."]);
        let cand = bifurcation_candidates(&plus);
        assert!(cand.get(2, 2));
    }

    #[test]
    fn junction_fragment_clusters_to_one_point() {
        // Skeleton fragment where two branches leave a short trunk: the
        // junction pixels all have three or more skeleton neighbours.
        let frag = mask_from_rows(&[
            "#.......#",
            ".#.....#.",
            "..#...#..",
            "...#.#...",
            "....#....",
            "...##....",
            "....#....",
            "....#....",
        ]);
        let cand = bifurcation_candidates(&frag);
        let expected: Vec<Pixel> = frag
            .pixels()
            .filter(|p| neighbourhood_code(&frag, p.row, p.col).count_ones() >= 3)
            .collect();
        assert_eq!(cand.pixels().collect::<Vec<_>>(), expected);
        assert!(expected.len() >= 2);
        let centres = cluster_candidates(&cand);
        assert_eq!(centres.len(), 1);
        let c = centres[0];
        assert!(expected
            .iter()
            .all(|p| p.row.abs_diff(c.row) <= 2 && p.col.abs_diff(c.col) <= 2));
    }

    #[test]
    fn centroid_rounds_half_up() {
        let mut m = BinaryMask::empty(Dims::new(20, 20));
        m.set(10, 10, true);
        m.set(10, 11, true);
        assert_eq!(cluster_candidates(&m), vec![Pixel::new(10, 11)]);
        let mut single = BinaryMask::empty(Dims::new(20, 20));
        single.set(3, 4, true);
        assert_eq!(cluster_candidates(&single), vec![Pixel::new(3, 4)]);
    }

    #[test]
    fn density_rule() {
        let three = [Pixel::new(100, 100), Pixel::new(105, 110), Pixel::new(90, 95)];
        assert!(density_filter(&three, 41).is_empty());
        let two = [Pixel::new(100, 100), Pixel::new(100, 110)];
        assert_eq!(density_filter(&two, 41), two.to_vec());

        let mut pts: Vec<Pixel> = (0..20)
            .map(|k| Pixel::new(300 + (k % 5) * 3, 300 + (k / 5) * 4))
            .collect();
        pts.push(Pixel::new(300, 520));
        assert_eq!(density_filter(&pts, 41), vec![Pixel::new(300, 520)]);
    }

    #[test]
    fn arcs_wrap_around_the_seam() {
        let profile = [9.0, 9.0, 0.0, 0.0, 9.0, 0.0, 9.0];
        let arcs = above_threshold_arcs(&profile, 5.0);
        assert_eq!(arcs, vec![vec![4], vec![6, 0, 1]]);
        assert!(above_threshold_arcs(&[1.0; 5], 5.0).is_empty());
    }

    #[test]
    fn homogeneous_region_is_rejected() {
        let img = GrayImage::filled(61, 61, 120);
        let r = validate_bifurcation(&img, Pixel::new(30, 30), &ValidationParams::default());
        assert_eq!(r.unwrap_err(), Rejection::TooFewArcs { arcs: 0 });
    }

    #[test]
    fn straight_vessel_is_rejected() {
        let img = arms_image(61, &[(30.0, 200.0), (210.0, 200.0)], 2.0);
        let r = validate_bifurcation(&img, Pixel::new(30, 30), &ValidationParams::default());
        assert_eq!(r.unwrap_err(), Rejection::TooFewArcs { arcs: 2 });
    }

    #[test]
    fn border_candidates_are_rejected() {
        let img = GrayImage::filled(61, 61, 120);
        let r = validate_bifurcation(&img, Pixel::new(19, 30), &ValidationParams::default());
        assert_eq!(r.unwrap_err(), Rejection::Border);
        let r = validate_bifurcation(&img, Pixel::new(30, 41), &ValidationParams::default());
        assert_eq!(r.unwrap_err(), Rejection::Border);
    }

    #[test]
    fn ideal_y_is_accepted() {
        let truth = [0.0, 120.0, 240.0];
        let arms: Vec<(f64, f64)> = truth.iter().map(|&a| (a, 200.0)).collect();
        let img = arms_image(61, &arms, 2.0);
        let f = validate_bifurcation(&img, Pixel::new(30, 30), &ValidationParams::default())
            .expect("accepted");
        let mut angles = f.branch_angles().to_vec();
        angles.sort_by(f64::total_cmp);
        for (a, t) in angles.iter().zip(truth) {
            assert!(circular_gap(*a, t) <= 10.0, "{angles:?}");
        }
        assert_eq!(f.region.dims(), Dims::new(41, 41));
        for p in f.branch_positions {
            assert!(region_ring().contains(&p));
        }
    }

    #[test]
    fn close_branches_are_merged_by_separation() {
        // Two arms 15° apart collapse into one; only two branches remain.
        let img = arms_image(61, &[(0.0, 200.0), (15.0, 150.0), (180.0, 200.0)], 1.0);
        let r = validate_bifurcation(&img, Pixel::new(30, 30), &ValidationParams::default());
        assert_eq!(r.unwrap_err(), Rejection::TooFewAfterSeparation { remaining: 2 });
    }

    #[test]
    fn crossing_keeps_three_strongest() {
        let img = arms_image(
            61,
            &[(0.0, 220.0), (90.0, 220.0), (180.0, 220.0), (270.0, 120.0)],
            2.0,
        );
        let f = validate_bifurcation(&img, Pixel::new(30, 30), &ValidationParams::default())
            .expect("accepted");
        let angles = f.branch_angles();
        assert!(angles.iter().all(|&a| circular_gap(a, 270.0) > 45.0), "{angles:?}");
    }

    fn random_blob_mask() -> impl Strategy<Value = BinaryMask> {
        proptest::collection::vec((2usize..28, 2usize..28, 1usize..5), 1..6).prop_map(|blobs| {
            BinaryMask::from_fn(Dims::new(30, 30), |r, c| {
                blobs.iter().any(|&(br, bc, rad)| {
                    (r as isize - br as isize).abs() <= rad as isize
                        && (c as isize - bc as isize).abs() <= 2 * rad as isize
                })
            })
        })
    }

    proptest! {
        #[test]
        fn skeleton_invariants(mask in random_blob_mask()) {
            let skel = skeletonize(&mask);
            prop_assert!(skel.is_subset_of(&mask));
            prop_assert_eq!(component_count(&skel), component_count(&mask));
            prop_assert_eq!(skeletonize(&skel), skel);
        }

        #[test]
        fn density_filter_is_idempotent_subset(
            pts in proptest::collection::btree_set((0usize..200, 0usize..200), 0..30)
        ) {
            let pts: Vec<Pixel> = pts.into_iter().map(|(r, c)| Pixel::new(r, c)).collect();
            let once = density_filter(&pts, 41);
            prop_assert!(once.iter().all(|p| pts.contains(p)));
            prop_assert_eq!(density_filter(&once, 41), once.clone());
        }

        #[test]
        fn validation_is_translation_equivariant(dr in 0usize..15, dc in 0usize..15) {
            let arms = [(10.0, 200.0), (140.0, 180.0), (250.0, 190.0)];
            let base = arms_image(61, &arms, 2.0);
            let big = GrayImage::from_fn(90, 90, |r, c| {
                if r >= dr && c >= dc && r - dr < 61 && c - dc < 61 {
                    base.get(r - dr, c - dc)
                } else {
                    10
                }
            });
            let a = validate_bifurcation(&base, Pixel::new(30, 30), &ValidationParams::default());
            let b = validate_bifurcation(&big, Pixel::new(30 + dr, 30 + dc), &ValidationParams::default());
            match (a, b) {
                (Ok(fa), Ok(fb)) => {
                    for (x, y) in fa.branch_angles().iter().zip(fb.branch_angles()) {
                        prop_assert!(circular_gap(*x, y) <= 1.0);
                    }
                }
                (Err(ea), Err(eb)) => prop_assert_eq!(ea, eb),
                other => prop_assert!(false, "outcome differs: {:?}", other.0.is_ok()),
            }
        }
    }
}
