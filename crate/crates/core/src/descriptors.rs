//! Per-feature descriptors: intensity entropy and mutual information of the
//! bifurcation regions, branch slope classes and widths, and the
//! four-component angle/width invariant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{region_center, region_ring, BifurcationFeature};
use crate::raster::{index_line, line_slope_angle, GrayImage, Pixel};

const BINS: usize = 256;

fn plogp_bits(count: u64, total: f64) -> f64 {
    if count == 0 {
        0.0
    } else {
        let p = count as f64 / total;
        -p * p.log2()
    }
}

fn histogram(image: &GrayImage) -> [u64; BINS] {
    let mut h = [0u64; BINS];
    for &v in image.data() {
        h[v as usize] += 1;
    }
    h
}

/// First-order entropy of the 256-bin intensity histogram, in bits.
pub fn global_entropy(image: &GrayImage) -> f64 {
    let n = image.data().len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    histogram(image).iter().map(|&c| plogp_bits(c, n)).sum()
}

/// Entropy of the joint histogram of co-located pixels, in bits.
pub fn joint_entropy(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            (a.rows(), a.cols()),
            (b.rows(), b.cols()),
        ));
    }
    let n = a.data().len();
    if n == 0 {
        return Ok(0.0);
    }
    // Counting by sorting the pair codes beats clearing a 65536-bin table
    // for 41×41 regions.
    let mut keys: Vec<u16> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as u16) << 8 | y as u16)
        .collect();
    keys.sort_unstable();
    let total = n as f64;
    let mut h = 0.0;
    let mut run = 1u64;
    for k in 1..=keys.len() {
        if k < keys.len() && keys[k] == keys[k - 1] {
            run += 1;
        } else {
            h += plogp_bits(run, total);
            run = 1;
        }
    }
    Ok(h)
}

/// `H(A) + H(B) − H(A, B)` in bits.
pub fn mutual_information(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    let joint = joint_entropy(a, b)?;
    Ok((global_entropy(a) + global_entropy(b) - joint).max(0.0))
}

/// Branch direction class, 1–8 in 45° sectors centred on the axes and
/// diagonals; class 1 is `(337.5°, 360°) ∪ [0°, 22.5°]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeClass {
    pub class: u8,
    pub angle: f64,
}

pub fn slope_class_of_angle(angle: f64) -> u8 {
    let a = angle.rem_euclid(360.0);
    if a <= 22.5 || a > 337.5 {
        1
    } else {
        ((a - 22.5) / 45.0).ceil() as u8 + 1
    }
}

/// Slope classes of the three branches of a region.
pub fn slope_class(branch_positions: &[Pixel; 3]) -> Result<[SlopeClass; 3]> {
    let ring = region_ring();
    let mut out = [SlopeClass { class: 0, angle: 0.0 }; 3];
    for (slot, &p) in out.iter_mut().zip(branch_positions) {
        if !ring.contains(&p) {
            return Err(Error::InvalidInput(format!(
                "branch position ({}, {}) is not on the region ring",
                p.row, p.col
            )));
        }
        let angle = line_slope_angle(region_center(), p)?.1;
        *slot = SlopeClass {
            class: slope_class_of_angle(angle),
            angle,
        };
    }
    Ok(out)
}

/// Pixels of the center-to-branch line skipped before width sampling.
pub const WIDTH_SKIP: usize = 5;
/// Samples per perpendicular profile.
pub const PROFILE_LEN: usize = 10;

// Perpendicular step (row, col) per slope class.
fn perpendicular_step(class: u8) -> (isize, isize) {
    match class {
        1 | 5 => (1, 0),
        3 | 7 => (0, 1),
        2 | 6 => (1, 1),
        _ => (1, -1),
    }
}

/// Vessel width of one branch from the first-difference extrema of short
/// perpendicular profiles along the center-to-branch line.
///
/// Profiles that would leave the region are skipped. Diagonal classes are
/// scaled by √2 before rounding.
pub fn branch_width(region: &GrayImage, branch: Pixel, class: SlopeClass) -> Result<u32> {
    if !region_ring().contains(&branch) {
        return Err(Error::InvalidInput(
            "branch position is not on the region ring".into(),
        ));
    }
    let line = index_line(region_center(), branch, region.dims())?;
    let (sr, sc) = perpendicular_step(class.class);
    let half = (PROFILE_LEN / 2) as isize;
    let mut widths = Vec::new();
    'line: for p in line.iter().skip(WIDTH_SKIP) {
        let mut profile = [0i32; PROFILE_LEN];
        for (slot, k) in profile.iter_mut().zip(-half..half) {
            let (r, c) = (p.row as isize + k * sr, p.col as isize + k * sc);
            if !region.dims().contains_signed(r, c) {
                continue 'line;
            }
            *slot = region.get(r as usize, c as usize) as i32;
        }
        let diff: Vec<i32> = profile.windows(2).map(|w| w[1] - w[0]).collect();
        let (mut imax, mut imin) = (0, 0);
        for (i, &d) in diff.iter().enumerate() {
            if d > diff[imax] {
                imax = i;
            }
            if d < diff[imin] {
                imin = i;
            }
        }
        let w = imin as i64 - imax as i64;
        if w > 0 {
            widths.push(w as f64);
        }
    }
    if widths.is_empty() {
        return Err(Error::WidthUndetermined);
    }
    let mean = widths.iter().sum::<f64>() / widths.len() as f64;
    let scaled = if class.class % 2 == 0 {
        mean * std::f64::consts::SQRT_2
    } else {
        mean
    };
    Ok((scaled + 0.5).floor() as u32)
}

/// Angle/width invariant of a bifurcation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantDescriptor {
    /// Smallest inter-branch angle, degrees.
    pub p1: f64,
    /// Inter-branch angle next to `p1` on the side of its wider branch,
    /// reported as the smaller of the two arcs it spans.
    pub p2: f64,
    /// Wider over narrower width of the two branches bounding `p1`.
    pub p3: f64,
    /// Width of the outer branch of `p2` over the branch it shares with `p1`.
    pub p4: f64,
}

impl InvariantDescriptor {
    pub fn to_array(self) -> [f64; 4] {
        [self.p1, self.p2, self.p3, self.p4]
    }
}

/// Circular gaps between consecutive branches in increasing angle order;
/// gap `k` runs from sorted branch `k` to `k + 1`.
pub fn inter_branch_angles(angles: [f64; 3]) -> ([usize; 3], [f64; 3]) {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| angles[i].total_cmp(&angles[j]).then(i.cmp(&j)));
    let a = order.map(|i| angles[i].rem_euclid(360.0));
    let gaps = [a[1] - a[0], a[2] - a[1], 360.0 - (a[2] - a[0])];
    (order, gaps)
}

/// The invariant from branch angles and widths (both in branch order).
///
/// Branches are walked in increasing angle. `p1` is the smallest gap; the
/// side of `p2` follows the wider of its two branches, the later one in
/// angle order winning ties.
pub fn invariants(angles: [f64; 3], widths: [u32; 3]) -> Result<InvariantDescriptor> {
    if widths.contains(&0) {
        return Err(Error::WidthUndetermined);
    }
    let (order, gaps) = inter_branch_angles(angles);
    let mut g = 0;
    for k in 1..3 {
        if gaps[k] < gaps[g] {
            g = k;
        }
    }
    let lo = order[g];
    let hi = order[(g + 1) % 3];
    let far = order[(g + 2) % 3];
    let (w_lo, w_hi, w_far) = (widths[lo] as f64, widths[hi] as f64, widths[far] as f64);
    let (p2_raw, shared) = if w_hi >= w_lo {
        (gaps[(g + 1) % 3], w_hi)
    } else {
        (gaps[(g + 2) % 3], w_lo)
    };
    Ok(InvariantDescriptor {
        p1: gaps[g],
        p2: p2_raw.min(360.0 - p2_raw),
        p3: w_lo.max(w_hi) / w_lo.min(w_hi),
        p4: w_far / shared,
    })
}

/// Per-branch measurements of one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchInfo {
    pub position: Pixel,
    pub angle: f64,
    pub slope_class: u8,
    pub width: Option<u32>,
}

/// Everything the matchers need about one feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub branches: [BranchInfo; 3],
    /// `None` when any width is undetermined.
    pub invariant: Option<InvariantDescriptor>,
}

pub fn describe(feature: &BifurcationFeature) -> Result<FeatureDescriptor> {
    let classes = slope_class(&feature.branch_positions)?;
    let mut branches = Vec::with_capacity(3);
    for (k, class) in classes.iter().enumerate() {
        let p = feature.branch_positions[k];
        let width = match branch_width(&feature.region, p, *class) {
            Ok(w) => Some(w),
            Err(Error::WidthUndetermined) => None,
            Err(e) => return Err(e),
        };
        branches.push(BranchInfo {
            position: p,
            angle: class.angle,
            slope_class: class.class,
            width,
        });
    }
    let branches: [BranchInfo; 3] = branches.try_into().expect("three branches");
    let invariant = match (branches[0].width, branches[1].width, branches[2].width) {
        (Some(a), Some(b), Some(c)) => {
            invariants([branches[0].angle, branches[1].angle, branches[2].angle], [a, b, c]).ok()
        }
        _ => None,
    };
    Ok(FeatureDescriptor {
        branches,
        invariant,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::RING_RADIUS;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_image(rng: &mut impl Rng, n: usize, levels: u8) -> GrayImage {
        GrayImage::from_fn(n, n, |_, _| rng.random_range(0..levels))
    }

    fn naive_mi(a: &GrayImage, b: &GrayImage) -> f64 {
        let n = a.data().len() as f64;
        let mut joint = vec![vec![0.0; 256]; 256];
        let mut pa = vec![0.0; 256];
        let mut pb = vec![0.0; 256];
        for (&x, &y) in a.data().iter().zip(b.data()) {
            joint[x as usize][y as usize] += 1.0 / n;
            pa[x as usize] += 1.0 / n;
            pb[y as usize] += 1.0 / n;
        }
        let mut mi = 0.0;
        for i in 0..256 {
            for j in 0..256 {
                if joint[i][j] > 0.0 {
                    mi += joint[i][j] * (joint[i][j] / (pa[i] * pb[j])).log2();
                }
            }
        }
        mi
    }

    fn ring_point_at(angle: f64) -> Pixel {
        let ring = region_ring();
        let center = region_center();
        *ring
            .iter()
            .min_by(|a, b| {
                let da = line_slope_angle(center, **a).unwrap().1;
                let db = line_slope_angle(center, **b).unwrap().1;
                let ga = (da - angle).rem_euclid(360.0).min((angle - da).rem_euclid(360.0));
                let gb = (db - angle).rem_euclid(360.0).min((angle - db).rem_euclid(360.0));
                ga.total_cmp(&gb)
            })
            .unwrap()
    }

    /// 41×41 region with a bright bar of the given width through the centre
    /// along `angle` degrees.
    fn bar_region(angle: f64, width: f64) -> GrayImage {
        let c = RING_RADIUS as f64;
        let (s, co) = angle.to_radians().sin_cos();
        GrayImage::from_fn(41, 41, |r, col| {
            let (x, y) = (col as f64 - c, -(r as f64 - c));
            let d = (-x * s + y * co).abs();
            if d <= (width - 1.0) / 2.0 + 1e-9 {
                200
            } else {
                20
            }
        })
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(global_entropy(&GrayImage::filled(5, 5, 9)), 0.0);
        let two = GrayImage::from_fn(4, 4, |r, _| if r < 2 { 0 } else { 255 });
        assert!((global_entropy(&two) - 1.0).abs() < 1e-12);
        let four = GrayImage::from_fn(4, 4, |r, _| r as u8 * 10);
        assert!((global_entropy(&four) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mi_identities() {
        let mut rng = rand_xoshiro::Xoshiro256StarStar::seed_from_u64(7);
        let a = random_image(&mut rng, 16, 255);
        let b = random_image(&mut rng, 16, 255);
        assert!((mutual_information(&a, &a).unwrap() - global_entropy(&a)).abs() < 1e-9);
        let k = GrayImage::filled(16, 16, 42);
        assert!(mutual_information(&k, &b).unwrap().abs() < 1e-12);
        assert!((mutual_information(&a, &b).unwrap() - naive_mi(&a, &b)).abs() < 1e-9);
        assert!(mutual_information(&a, &GrayImage::filled(3, 3, 0)).is_err());
    }

    #[test]
    fn slope_class_bins() {
        assert_eq!(slope_class_of_angle(0.0), 1);
        assert_eq!(slope_class_of_angle(22.5), 1);
        assert_eq!(slope_class_of_angle(22.6), 2);
        assert_eq!(slope_class_of_angle(67.5), 2);
        assert_eq!(slope_class_of_angle(90.0), 3);
        assert_eq!(slope_class_of_angle(180.0), 5);
        assert_eq!(slope_class_of_angle(337.5), 8);
        assert_eq!(slope_class_of_angle(337.6), 1);
        assert_eq!(slope_class_of_angle(359.9), 1);
    }

    #[test]
    fn slope_class_needs_ring_positions() {
        let bad = [Pixel::new(20, 20), Pixel::new(0, 20), Pixel::new(20, 0)];
        assert!(slope_class(&bad).is_err());
        let ok = [ring_point_at(0.0), ring_point_at(90.0), ring_point_at(225.0)];
        let classes = slope_class(&ok).unwrap();
        assert_eq!(classes.map(|c| c.class), [1, 3, 6]);
    }

    #[test]
    fn horizontal_bar_width() {
        let region = bar_region(0.0, 5.0);
        let p = ring_point_at(0.0);
        let class = slope_class(&[p, ring_point_at(120.0), ring_point_at(240.0)]).unwrap()[0];
        assert_eq!(branch_width(&region, p, class).unwrap(), 5);
    }

    #[test]
    fn vertical_and_diagonal_bar_width() {
        let region = bar_region(90.0, 5.0);
        let p = ring_point_at(90.0);
        let class = SlopeClass { class: 3, angle: 90.0 };
        assert_eq!(branch_width(&region, p, class).unwrap(), 5);

        let region = bar_region(45.0, 5.0);
        let p = ring_point_at(45.0);
        let class = SlopeClass { class: 2, angle: 45.0 };
        let w = branch_width(&region, p, class).unwrap() as i64;
        assert!((w - 5).abs() <= 1, "{w}");
    }

    #[test]
    fn flat_region_width_is_undetermined() {
        let region = GrayImage::filled(41, 41, 80);
        let p = ring_point_at(0.0);
        let class = SlopeClass { class: 1, angle: 0.0 };
        assert!(matches!(
            branch_width(&region, p, class),
            Err(Error::WidthUndetermined)
        ));
    }

    #[test]
    fn table_rows_angles() {
        let d = invariants([69.8, 302.9, 206.6], [5, 5, 4]).unwrap();
        assert!((d.p1 - 96.3).abs() < 1.0 && (d.p2 - 126.9).abs() < 1.0, "{d:?}");
        assert_eq!((d.p3, d.p4), (1.25, 1.0));

        let d = invariants([122.9, 49.7, 319.1], [5, 5, 4]).unwrap();
        assert!((d.p1 - 73.2).abs() < 1.0 && (d.p2 - 163.8).abs() < 1.0, "{d:?}");
    }

    #[test]
    fn equilateral_invariant() {
        let d = invariants([0.0, 120.0, 240.0], [4, 4, 4]).unwrap();
        assert!((d.p1 - 120.0).abs() < 1e-9 && (d.p2 - 120.0).abs() < 1e-9);
        assert_eq!((d.p3, d.p4), (1.0, 1.0));
    }

    #[test]
    fn width_side_rule() {
        // p1 between 0° (w 3) and 40° (w 6): the wider branch is the later
        // one, so p2 is the 40°→200° gap and p4 compares 200° with 40°.
        let d = invariants([0.0, 40.0, 200.0], [3, 6, 9]).unwrap();
        assert!((d.p1 - 40.0).abs() < 1e-9);
        assert!((d.p2 - 160.0).abs() < 1e-9);
        assert_eq!((d.p3, d.p4), (2.0, 1.5));
        // Swap the widths: p2 becomes the 200°→0° gap through the 0° branch.
        let d = invariants([0.0, 40.0, 200.0], [6, 3, 9]).unwrap();
        assert!((d.p2 - 160.0).abs() < 1e-9);
        assert_eq!((d.p3, d.p4), (2.0, 1.5));
        let d = invariants([0.0, 40.0, 250.0], [6, 3, 9]).unwrap();
        assert!((d.p2 - 110.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn gaps_sum_to_full_turn(a in 0.0f64..360.0, b in 0.0f64..360.0, c in 0.0f64..360.0) {
            let (_, gaps) = inter_branch_angles([a, b, c]);
            prop_assert!((gaps.iter().sum::<f64>() - 360.0).abs() < 1e-6);
            prop_assert!(gaps.iter().all(|&g| g >= 0.0));
        }

        #[test]
        fn invariant_is_rotation_and_order_free(
            a in 0.0f64..360.0, d1 in 30.0f64..150.0, d2 in 30.0f64..150.0,
            w in proptest::array::uniform3(2u32..9), rot in 0.0f64..360.0,
        ) {
            let angles = [a, a + d1, a + d1 + d2].map(|x| x.rem_euclid(360.0));
            let base = invariants(angles, w).unwrap();
            let turned = invariants(angles.map(|x| (x + rot).rem_euclid(360.0)), w).unwrap();
            let permuted = invariants([angles[2], angles[0], angles[1]], [w[2], w[0], w[1]]).unwrap();
            for other in [turned, permuted] {
                prop_assert!((other.p1 - base.p1).abs() < 1e-6);
                prop_assert!((other.p2 - base.p2).abs() < 1e-6);
                prop_assert_eq!(other.p3, base.p3);
                prop_assert_eq!(other.p4, base.p4);
            }
            prop_assert!(base.p1 > 0.0 && base.p1 <= 120.0 + 1e-9);
            prop_assert!(base.p3 >= 1.0);
        }

        #[test]
        fn mi_symmetric_and_non_negative(seed in any::<u64>()) {
            let mut rng = rand_xoshiro::Xoshiro256StarStar::seed_from_u64(seed);
            let a = random_image(&mut rng, 12, 8);
            let b = random_image(&mut rng, 12, 8);
            let ab = mutual_information(&a, &b).unwrap();
            let ba = mutual_information(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - naive_mi(&a, &b)).abs() < 1e-9);
        }
    }
}
