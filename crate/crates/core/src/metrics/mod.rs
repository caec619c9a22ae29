//! Object-level segmentation scores.
//!
//! Every predicted object is paired with the ground-truth object it overlaps
//! most, and every ground-truth object with the predicted object it overlaps
//! most. Overlap ties go to the smaller object, then to the lower label.
//! Per-object scores are area-weighted within each side and the two sides
//! averaged.
//!
//! Empty-set conventions:
//! - Dice of two empty sets is 1, of one empty set 0.
//! - Hausdorff against an empty set (an unmatched object) is the image
//!   diagonal `sqrt(W² + H²)`.
//! - Both masks empty: object Dice 1, object Hausdorff 0, F1 1.

mod distance;

pub use distance::hausdorff_exact;

use std::collections::{BTreeMap, HashSet};

use crate::postproc::InstanceMask;
use crate::{Error, Result};

pub type Pixel = (usize, usize);

/// Overlap fraction of a ground-truth object a detection must exceed.
pub const DETECTION_OVERLAP: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct InstancePair {
    prediction: InstanceMask,
    ground_truth: InstanceMask,
}

impl InstancePair {
    pub fn new(prediction: InstanceMask, ground_truth: InstanceMask) -> Result<Self> {
        if (prediction.width(), prediction.height())
            != (ground_truth.width(), ground_truth.height())
        {
            return Err(Error::shape(
                "InstancePair::new",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    prediction.width(),
                    prediction.height(),
                    ground_truth.width(),
                    ground_truth.height()
                ),
            ));
        }
        Ok(Self {
            prediction,
            ground_truth,
        })
    }

    pub fn prediction(&self) -> &InstanceMask {
        &self.prediction
    }

    pub fn ground_truth(&self) -> &InstanceMask {
        &self.ground_truth
    }

    fn diagonal(&self) -> f64 {
        let (w, h) = (self.prediction.width() as f64, self.prediction.height() as f64);
        (w * w + h * h).sqrt()
    }
}

/// `2|a ∩ b| / (|a| + |b|)`; 1 when both are empty.
pub fn dice(a: &[Pixel], b: &[Pixel]) -> f64 {
    let sa: HashSet<Pixel> = a.iter().copied().collect();
    let sb: HashSet<Pixel> = b.iter().copied().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    2.0 * inter as f64 / (sa.len() + sb.len()) as f64
}

/// Hausdorff distance with the empty-set penalty `diagonal`.
pub fn hausdorff(a: &[Pixel], b: &[Pixel], diagonal: f64) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    hausdorff_exact(a, b).unwrap_or(diagonal)
}

/// Objects of one mask, indexed in ascending label order.
struct Objects {
    labels: Vec<u32>,
    pixels: Vec<Vec<Pixel>>,
}

impl Objects {
    fn of(mask: &InstanceMask) -> Self {
        let mut by_label: BTreeMap<u32, Vec<Pixel>> = BTreeMap::new();
        for (i, &l) in mask.labels().iter().enumerate() {
            if l != 0 {
                by_label
                    .entry(l)
                    .or_default()
                    .push((i % mask.width(), i / mask.width()));
            }
        }
        let (labels, pixels) = by_label.into_iter().unzip();
        Self { labels, pixels }
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn area(&self, i: usize) -> usize {
        self.pixels[i].len()
    }

    fn total_area(&self) -> usize {
        self.pixels.iter().map(Vec::len).sum()
    }

    fn index_of(&self) -> BTreeMap<u32, usize> {
        self.labels.iter().enumerate().map(|(i, &l)| (l, i)).collect()
    }
}

/// Objects on both sides plus their pairwise overlap counts.
struct Matching {
    pred: Objects,
    gt: Objects,
    /// `overlap[i][j]` = |pred_i ∩ gt_j|
    overlap: Vec<Vec<usize>>,
}

impl Matching {
    fn new(pair: &InstancePair) -> Self {
        let pred = Objects::of(&pair.prediction);
        let gt = Objects::of(&pair.ground_truth);
        let (pi, gi) = (pred.index_of(), gt.index_of());
        let mut overlap = vec![vec![0usize; gt.len()]; pred.len()];
        for (&p, &g) in pair.prediction.labels().iter().zip(pair.ground_truth.labels()) {
            if p != 0 && g != 0 {
                overlap[pi[&p]][gi[&g]] += 1;
            }
        }
        Self { pred, gt, overlap }
    }

    fn pick(candidates: impl Iterator<Item = (usize, usize)>, other: &Objects) -> Option<usize> {
        // (index, overlap): max overlap, then smaller area, then lower index
        let mut best: Option<(usize, usize)> = None;
        for (j, ov) in candidates {
            if ov == 0 {
                continue;
            }
            best = match best {
                None => Some((j, ov)),
                Some((bj, bov)) => {
                    if ov > bov || (ov == bov && other.area(j) < other.area(bj)) {
                        Some((j, ov))
                    } else {
                        Some((bj, bov))
                    }
                }
            };
        }
        best.map(|(j, _)| j)
    }

    fn gt_for_pred(&self, i: usize) -> Option<usize> {
        Self::pick(self.overlap[i].iter().copied().enumerate(), &self.gt)
    }

    fn pred_for_gt(&self, j: usize) -> Option<usize> {
        Self::pick((0..self.pred.len()).map(|i| (i, self.overlap[i][j])), &self.pred)
    }

    /// Area-weighted average of `score` over both sides.
    fn weighted(&self, score: impl Fn(Option<usize>, Option<usize>, usize) -> f64) -> f64 {
        let mut total = 0.0;
        let pred_area = self.pred.total_area() as f64;
        for i in 0..self.pred.len() {
            let g = self.gt_for_pred(i);
            let ov = g.map_or(0, |j| self.overlap[i][j]);
            total += self.pred.area(i) as f64 / pred_area * score(Some(i), g, ov);
        }
        let gt_area = self.gt.total_area() as f64;
        for j in 0..self.gt.len() {
            let p = self.pred_for_gt(j);
            let ov = p.map_or(0, |i| self.overlap[i][j]);
            total += self.gt.area(j) as f64 / gt_area * score(p, Some(j), ov);
        }
        0.5 * total
    }
}

pub fn object_dice(pair: &InstancePair) -> f64 {
    let m = Matching::new(pair);
    if m.pred.len() == 0 && m.gt.len() == 0 {
        return 1.0;
    }
    m.weighted(|p, g, ov| match (p, g) {
        (Some(i), Some(j)) => 2.0 * ov as f64 / (m.pred.area(i) + m.gt.area(j)) as f64,
        _ => 0.0,
    })
}

pub fn object_hausdorff(pair: &InstancePair) -> f64 {
    let m = Matching::new(pair);
    if m.pred.len() == 0 && m.gt.len() == 0 {
        return 0.0;
    }
    let diag = pair.diagonal();
    m.weighted(|p, g, _| match (p, g) {
        (Some(i), Some(j)) => hausdorff(&m.pred.pixels[i], &m.gt.pixels[j], diag),
        _ => diag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Greedy one-to-one detection matching. A prediction is a true positive
/// when it covers more than half of its best ground-truth object and that
/// object is still unclaimed.
pub fn detection_f1(pair: &InstancePair) -> Detection {
    let m = Matching::new(pair);
    let (n_pred, n_gt) = (m.pred.len(), m.gt.len());
    if n_pred == 0 && n_gt == 0 {
        return Detection {
            f1: 1.0,
            precision: 1.0,
            recall: 1.0,
            tp: 0,
            fp: 0,
            fn_: 0,
        };
    }
    let mut candidates: Vec<(usize, Option<usize>, usize)> = (0..n_pred)
        .map(|i| {
            let g = m.gt_for_pred(i);
            (i, g, g.map_or(0, |j| m.overlap[i][j]))
        })
        .collect();
    // descending overlap, stable in label order
    candidates.sort_by_key(|c| std::cmp::Reverse(c.2));
    let mut claimed = vec![false; n_gt];
    let mut tp = 0;
    for (_, g, ov) in candidates {
        if let Some(j) = g {
            if !claimed[j] && ov as f64 / m.gt.area(j) as f64 > DETECTION_OVERLAP {
                claimed[j] = true;
                tp += 1;
            }
        }
    }
    let fp = n_pred - tp;
    let fn_ = n_gt - tp;
    let precision = if n_pred > 0 { tp as f64 / n_pred as f64 } else { 0.0 };
    let recall = if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Detection {
        f1,
        precision,
        recall,
        tp,
        fp,
        fn_,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub object_dice: f64,
    pub object_hausdorff: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn evaluate(pair: &InstancePair) -> MetricsReport {
    let det = detection_f1(pair);
    MetricsReport {
        object_dice: object_dice(pair),
        object_hausdorff: object_hausdorff(pair),
        f1: det.f1,
        precision: det.precision,
        recall: det.recall,
        tp: det.tp,
        fp: det.fp,
        fn_: det.fn_,
    }
}

/// Per-image mean of the scores; counts are summed.
pub fn corpus_mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(MetricsReport {
        object_dice: mean(|r| r.object_dice),
        object_hausdorff: mean(|r| r.object_hausdorff),
        f1: mean(|r| r.f1),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        tp: reports.iter().map(|r| r.tp).sum(),
        fp: reports.iter().map(|r| r.fp).sum(),
        fn_: reports.iter().map(|r| r.fn_).sum(),
    })
}
