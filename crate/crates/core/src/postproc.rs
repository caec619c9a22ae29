//! From probability map to labelled gland instances: Otsu threshold,
//! binary opening, hole filling, small-object removal and 8-connected
//! component labelling.

use std::collections::BTreeSet;

use crate::{Error, Result};

/// Per-pixel foreground probability in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::shape(
                "ProbabilityMap::new",
                format!("{} values for a {width}x{height} map", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape(
                "BinaryMask::new",
                format!("{} bits for a {width}x{height} mask", bits.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Per-pixel instance labels; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl InstanceMask {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(
                "InstanceMask::new",
                format!("{} labels for a {width}x{height} mask", labels.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Distinct non-zero labels in ascending order.
    pub fn instance_labels(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        set.into_iter().collect()
    }

    pub fn instance_count(&self) -> usize {
        self.instance_labels().len()
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }
}

pub const OTSU_BINS: usize = 256;

/// Threshold returned when the histogram cannot be split.
pub const DEGENERATE_THRESHOLD: f64 = 0.5;

pub(crate) fn histogram_bin(p: f64) -> usize {
    ((p * OTSU_BINS as f64).floor() as usize).min(OTSU_BINS - 1)
}

/// `a / b > c / d` for non-negative integers, exact.
fn frac_greater(a: u128, b: u128, c: u128, d: u128) -> bool {
    let (qa, ra) = (a / b, a % b);
    let (qc, rc) = (c / d, c % d);
    if qa != qc {
        return qa > qc;
    }
    ra * d > rc * b
}

/// Otsu threshold over a 256-bin histogram of `[0, 1]`.
///
/// Candidate `k` splits bins `0..=k` from the rest and corresponds to the
/// boundary `(k + 1) / 256`. Between-class variance is compared in exact
/// integer arithmetic and the first (lowest) maximiser wins.
pub fn otsu_threshold(p: &ProbabilityMap) -> f64 {
    let mut hist = [0u64; OTSU_BINS];
    for &v in &p.data {
        hist[histogram_bin(v)] += 1;
    }
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(b, &h)| b as u64 * h).sum();

    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, u128, u128)> = None;
    for (k, &h) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        n0 += h;
        s0 += k as u64 * h;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = s - s0;
        // n0 n1 (m0 - m1)^2 = (s0 n1 - s1 n0)^2 / (n0 n1)
        let diff = (s0 as i128 * n1 as i128 - s1 as i128 * n0 as i128).unsigned_abs();
        let num = diff * diff;
        let den = n0 as u128 * n1 as u128;
        if num == 0 {
            continue;
        }
        match best {
            Some((_, bn, bd)) if !frac_greater(num, den, bn, bd) => {}
            _ => best = Some((k, num, den)),
        }
    }
    match best {
        Some((k, _, _)) => (k + 1) as f64 / OTSU_BINS as f64,
        None => DEGENERATE_THRESHOLD,
    }
}

/// Foreground where `p > t`.
pub fn binarize(p: &ProbabilityMap, t: f64) -> BinaryMask {
    BinaryMask {
        width: p.width,
        height: p.height,
        bits: p.data.iter().map(|&v| v > t).collect(),
    }
}

pub const DEFAULT_MIN_AREA_FRACTION: f64 = 0.001;

const CROSS: [(isize, isize); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];
const RING8: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];
const RING4: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

fn offset(x: usize, y: usize, d: (isize, isize), w: usize, h: usize) -> Option<usize> {
    let xx = x as isize + d.0;
    let yy = y as isize + d.1;
    (xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h)
        .then(|| yy as usize * w + xx as usize)
}

/// Opening by the 3×3 cross: the union of all crosses that fit inside both
/// the mask and the image.
fn open_cross(bits: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut eroded = vec![false; bits.len()];
    for y in 0..h {
        for x in 0..w {
            eroded[y * w + x] = CROSS
                .iter()
                .all(|&d| offset(x, y, d, w, h).is_some_and(|i| bits[i]));
        }
    }
    let mut out = vec![false; bits.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = CROSS
                .iter()
                .any(|&d| offset(x, y, d, w, h).is_some_and(|i| eroded[i]));
        }
    }
    out
}

/// Labels connected runs of `value` pixels in raster order of first pixel.
fn label_components(
    bits: &[bool],
    w: usize,
    h: usize,
    value: bool,
    ring: &[(isize, isize)],
) -> (Vec<u32>, Vec<usize>) {
    let mut labels = vec![0u32; bits.len()];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..bits.len() {
        if bits[start] != value || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        labels[start] = label;
        stack.push(start);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            area += 1;
            let (x, y) = (i % w, i / w);
            for &d in ring {
                if let Some(j) = offset(x, y, d, w, h) {
                    if bits[j] == value && labels[j] == 0 {
                        labels[j] = label;
                        stack.push(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Background regions (4-connected) that never touch the border become
/// foreground.
fn fill_holes(bits: &[bool], w: usize, h: usize) -> Vec<bool> {
    let (labels, areas) = label_components(bits, w, h, false, &RING4);
    let mut reaches_border = vec![false; areas.len() + 1];
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                reaches_border[labels[y * w + x] as usize] = true;
            }
        }
    }
    bits.iter()
        .zip(&labels)
        .map(|(&b, &l)| b || !reaches_border[l as usize])
        .collect()
}

/// Opening with a 3×3 cross, then hole filling, then removal of
/// 8-connected components smaller than `min_area_frac * W * H` pixels.
pub fn morph_cleanup(m: &BinaryMask, min_area_frac: f64) -> BinaryMask {
    let (w, h) = (m.width, m.height);
    if w == 0 || h == 0 {
        return m.clone();
    }
    let opened = open_cross(&m.bits, w, h);
    let filled = fill_holes(&opened, w, h);
    let min_area = min_area_frac * (w * h) as f64;
    let (labels, areas) = label_components(&filled, w, h, true, &RING8);
    let bits = labels
        .iter()
        .map(|&l| l != 0 && areas[l as usize - 1] as f64 >= min_area)
        .collect();
    BinaryMask {
        width: w,
        height: h,
        bits,
    }
}

/// 8-connected component labelling; labels `1..=n` in raster order.
pub fn extract_instances(m: &BinaryMask) -> InstanceMask {
    let (labels, _) = label_components(&m.bits, m.width, m.height, true, &RING8);
    InstanceMask {
        width: m.width,
        height: m.height,
        labels,
    }
}

/// Otsu, cleanup and labelling in one call.
pub fn segment(p: &ProbabilityMap, min_area_frac: f64) -> InstanceMask {
    let t = otsu_threshold(p);
    extract_instances(&morph_cleanup(&binarize(p, t), min_area_frac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let w = rows[0].len();
        let bits = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        BinaryMask::new(w, rows.len(), bits).unwrap()
    }

    fn square(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> BinaryMask {
        let mut bits = vec![false; w * h];
        for &(x0, y0, rw, rh) in rects {
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    bits[y * w + x] = true;
                }
            }
        }
        BinaryMask::new(w, h, bits).unwrap()
    }

    /// Rectangles minus their four corner pixels, which the cross opening
    /// leaves untouched.
    fn rounded(w: usize, h: usize, rects: &[(usize, usize, usize, usize)]) -> BinaryMask {
        let mut bits = square(w, h, rects).bits().to_vec();
        for &(x0, y0, rw, rh) in rects {
            for (x, y) in [(x0, y0), (x0 + rw - 1, y0), (x0, y0 + rh - 1), (x0 + rw - 1, y0 + rh - 1)] {
                bits[y * w + x] = false;
            }
        }
        BinaryMask::new(w, h, bits).unwrap()
    }

    #[test]
    fn otsu_splits_two_levels() {
        let data: Vec<f64> = (0..100).map(|i| if i < 60 { 0.2 } else { 0.8 }).collect();
        let t = otsu_threshold(&ProbabilityMap::new(10, 10, data).unwrap());
        assert!(t > 0.2 && t < 0.8, "t = {t}");
        // lowest maximiser: first boundary above the 0.2 bin
        assert_eq!(t, (histogram_bin(0.2) + 1) as f64 / 256.0);
    }

    #[test]
    fn otsu_constant_map() {
        let t = otsu_threshold(&ProbabilityMap::new(3, 3, vec![0.7; 9]).unwrap());
        assert_eq!(t, DEGENERATE_THRESHOLD);
    }

    #[test]
    fn binarize_examples() {
        let p = ProbabilityMap::new(2, 1, vec![0.3, 0.7]).unwrap();
        assert_eq!(binarize(&p, 0.5).bits(), &[false, true]);
        assert_eq!(binarize(&p, 1.0).count(), 0);
        assert_eq!(binarize(&p, 0.0).count(), 2);
    }

    #[test]
    fn isolated_pixel_removed() {
        let mut bits = vec![false; 100 * 100];
        bits[50 * 100 + 50] = true;
        let m = BinaryMask::new(100, 100, bits).unwrap();
        assert_eq!(morph_cleanup(&m, DEFAULT_MIN_AREA_FRACTION).count(), 0);
    }

    #[test]
    fn interior_hole_filled() {
        let m = rounded(40, 40, &[(10, 10, 20, 20)]);
        let mut bits = m.bits().to_vec();
        bits[20 * 40 + 20] = false;
        let holed = BinaryMask::new(40, 40, bits).unwrap();
        assert_eq!(morph_cleanup(&holed, DEFAULT_MIN_AREA_FRACTION), m);
    }

    #[test]
    fn clean_mask_unchanged() {
        let m = rounded(50, 40, &[(5, 5, 10, 12), (25, 20, 15, 15)]);
        let corners = square(50, 40, &[(5, 5, 10, 12), (25, 20, 15, 15)]);
        assert_eq!(morph_cleanup(&corners, DEFAULT_MIN_AREA_FRACTION), m);
        let once = morph_cleanup(&m, DEFAULT_MIN_AREA_FRACTION);
        assert_eq!(once, m);
        assert_eq!(morph_cleanup(&once, DEFAULT_MIN_AREA_FRACTION), once);
    }

    #[test]
    fn opening_removes_thin_spurs() {
        let m = mask_from(&[
            "..........",
            ".####.....",
            ".#########",
            ".####.....",
            "..........",
        ]);
        let out = morph_cleanup(&m, 0.0);
        // the one-pixel-high spur cannot hold a cross
        assert!(!out.get(8, 2));
    }

    #[test]
    fn instances_raster_order_and_diagonals() {
        let empty = BinaryMask::new(4, 4, vec![false; 16]).unwrap();
        assert_eq!(extract_instances(&empty).instance_count(), 0);

        let two = square(10, 10, &[(6, 1, 2, 2), (1, 5, 3, 3)]);
        let inst = extract_instances(&two);
        assert_eq!(inst.instance_labels(), vec![1, 2]);
        assert_eq!(inst.get(6, 1), 1);
        assert_eq!(inst.get(1, 5), 2);

        let diag = mask_from(&["#..", ".#.", "..#"]);
        assert_eq!(extract_instances(&diag).instance_count(), 1);
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        (3usize..24, 3usize..24).prop_flat_map(|(w, h)| {
            proptest::collection::vec(proptest::bool::weighted(0.55), w * h)
                .prop_map(move |bits| BinaryMask::new(w, h, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn cleanup_is_idempotent(m in arb_mask(), frac in 0.0f64..0.05) {
            let once = morph_cleanup(&m, frac);
            prop_assert_eq!(morph_cleanup(&once, frac), once);
        }

        #[test]
        fn labels_are_translation_stable(m in arb_mask(), dx in 0usize..4, dy in 0usize..4) {
            let (w, h) = (m.width(), m.height());
            let (tw, th) = (w + dx, h + dy);
            let mut bits = vec![false; tw * th];
            for y in 0..h {
                for x in 0..w {
                    bits[(y + dy) * tw + x + dx] = m.get(x, y);
                }
            }
            let a = extract_instances(&m);
            let b = extract_instances(&BinaryMask::new(tw, th, bits).unwrap());
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(a.get(x, y), b.get(x + dx, y + dy));
                }
            }
        }

        #[test]
        fn each_label_is_one_component(m in arb_mask()) {
            let inst = extract_instances(&m);
            for l in inst.instance_labels() {
                let bits: Vec<bool> = inst.labels().iter().map(|&v| v == l).collect();
                let (_, areas) = label_components(&bits, m.width(), m.height(), true, &RING8);
                prop_assert_eq!(areas.len(), 1);
            }
            prop_assert_eq!(inst.foreground(), m);
        }

        #[test]
        fn otsu_never_keeps_zero_pixels(data in proptest::collection::vec(0.0f64..=1.0, 1..200)) {
            let mut data = data;
            data[0] = 0.0;
            let p = ProbabilityMap::new(data.len(), 1, data).unwrap();
            let b = binarize(&p, otsu_threshold(&p));
            prop_assert!(!b.bits()[0]);
        }
    }
}
