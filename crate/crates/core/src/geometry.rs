// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bounding-box arithmetic and the rule for fusing the outputs of two face
//! detectors that ran on the same frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default IOU above which two detections of different detectors are fused.
pub const DEFAULT_MERGE_THRESHOLD: f64 = 0.8;

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Builds a box, rejecting non-finite, negative, zero-area or inverted input.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::invalid_input(format!(
                "invalid bounding box ({x_min}, {y_min}, {x_max}, {y_max})"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        coords.iter().all(|c| c.is_finite() && *c >= 0.0)
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Overlap rectangle, or `None` when the boxes share no area.
    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let x_min = self.x_min.max(other.x_min);
        let y_min = self.y_min.max(other.y_min);
        let x_max = self.x_max.min(other.x_max);
        let y_max = self.y_max.min(other.y_max);
        (x_min < x_max && y_min < y_max).then_some(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// True when `inner` lies entirely inside `self` (boundaries may touch).
    pub fn contains(&self, inner: &Self) -> bool {
        self.x_min <= inner.x_min
            && self.y_min <= inner.y_min
            && self.x_max >= inner.x_max
            && self.y_max >= inner.y_max
    }

    fn sort_key(&self) -> (f64, f64) {
        (self.x_min, self.y_min)
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let Some(inter) = a.intersection(b) else {
        return 0.0;
    };
    let inter_area = inter.area();
    let union = a.area() + b.area() - inter_area;
    if union <= 0.0 {
        return 0.0;
    }
    (inter_area / union).clamp(0.0, 1.0)
}

/// Result of fusing two detections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Merged {
    /// Both detections describe the same face.
    One(BoundingBox),
    /// The detections are kept as two separate faces.
    Two(BoundingBox, BoundingBox),
}

impl Merged {
    pub fn boxes(&self) -> Vec<BoundingBox> {
        match *self {
            Merged::One(b) => vec![b],
            Merged::Two(a, b) => vec![a, b],
        }
    }
}

/// Fuse detection `a` from the first detector with detection `b` from the
/// second one.
///
/// The containment cases are checked first: if one box lies inside the other
/// the inner box wins. Otherwise the overlap rectangle is kept when the IOU
/// reaches `threshold`, and both boxes survive in every other case.
pub fn merge_detections(a: &BoundingBox, b: &BoundingBox, threshold: f64) -> Merged {
    if b.contains(a) {
        return Merged::One(*a);
    }
    if a.contains(b) {
        return Merged::One(*b);
    }
    if iou(a, b) >= threshold {
        if let Some(inter) = a.intersection(b) {
            return Merged::One(inter);
        }
    }
    Merged::Two(*a, *b)
}

/// Which detection of a fused pair contributed the surviving geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeSource {
    First(usize),
    Second(usize),
    /// `first[i]` and `second[j]` were fused; the box is whichever of the two
    /// was inner, or their overlap.
    Pair(usize, usize),
}

/// One box of a merged frame together with where it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergedDetection {
    pub bbox: BoundingBox,
    pub source: MergeSource,
}

/// Merge the complete outputs of two detectors for one frame.
///
/// Pairs that [`merge_detections`] would fuse are taken greedily in
/// descending IOU order (ties by the first box's `(x_min, y_min)`); no box is
/// consumed twice. Everything left unpaired passes through unchanged, first
/// detector before second, each in input order.
pub fn merge_frame_detailed(
    first: &[BoundingBox],
    second: &[BoundingBox],
    threshold: f64,
) -> Vec<MergedDetection> {
    let mut candidates = Vec::new();
    for (i, a) in first.iter().enumerate() {
        for (j, b) in second.iter().enumerate() {
            if let Merged::One(_) = merge_detections(a, b, threshold) {
                candidates.push((iou(a, b), i, j));
            }
        }
    }
    candidates.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then_with(|| {
                let (ka, kb) = (first[x.1].sort_key(), first[y.1].sort_key());
                ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
            })
            .then_with(|| {
                let (ka, kb) = (second[x.2].sort_key(), second[y.2].sort_key());
                ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
            })
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });

    let mut used_first = vec![false; first.len()];
    let mut used_second = vec![false; second.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if used_first[i] || used_second[j] {
            continue;
        }
        used_first[i] = true;
        used_second[j] = true;
        pairs.push((i, j));
    }
    pairs.sort_unstable();

    let mut out = Vec::with_capacity(first.len() + second.len() - pairs.len());
    for (i, j) in pairs {
        if let Merged::One(bbox) = merge_detections(&first[i], &second[j], threshold) {
            out.push(MergedDetection {
                bbox,
                source: MergeSource::Pair(i, j),
            });
        }
    }
    out.extend(
        first
            .iter()
            .enumerate()
            .filter(|(i, _)| !used_first[*i])
            .map(|(i, b)| MergedDetection {
                bbox: *b,
                source: MergeSource::First(i),
            }),
    );
    out.extend(
        second
            .iter()
            .enumerate()
            .filter(|(j, _)| !used_second[*j])
            .map(|(j, b)| MergedDetection {
                bbox: *b,
                source: MergeSource::Second(j),
            }),
    );
    out
}

pub fn merge_frame(
    first: &[BoundingBox],
    second: &[BoundingBox],
    threshold: f64,
) -> Vec<BoundingBox> {
    merge_frame_detailed(first, second, threshold)
        .into_iter()
        .map(|d| d.bbox)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &bx(0.0, 0.0, 10.0, 20.0)) - 0.5).abs() < 1e-12);
        // edge contact has no area
        assert_eq!(iou(&a, &bx(10.0, 0.0, 20.0, 10.0)), 0.0);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 5.0).is_err());
        assert!(BoundingBox::new(5.0, 0.0, 1.0, 5.0).is_err());
        assert!(BoundingBox::new(-1.0, 0.0, 1.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 5.0).is_err());
    }

    #[test]
    fn merge_prefers_inner_box() {
        let inner = bx(2.0, 2.0, 8.0, 8.0);
        let outer = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(merge_detections(&inner, &outer, 0.8), Merged::One(inner));
        assert_eq!(merge_detections(&outer, &inner, 0.8), Merged::One(inner));
        // IOU is only 0.36 here, containment still wins
        assert!(iou(&inner, &outer) < 0.8);
    }

    #[test]
    fn merge_high_iou_takes_intersection() {
        // equal boxes shifted by s: IOU = (20 - s) / (20 + s), so s = 60/37 gives 0.85
        let s = 60.0 / 37.0;
        let a = bx(0.0, 0.0, 20.0, 10.0);
        let b = bx(s, 0.0, 20.0 + s, 10.0);
        assert!((iou(&a, &b) - 0.85).abs() < 1e-12);
        assert_eq!(
            merge_detections(&a, &b, 0.8),
            Merged::One(bx(s, 0.0, 20.0, 10.0))
        );
        assert_eq!(merge_detections(&a, &b, 0.9), Merged::Two(a, b));
    }

    #[test]
    fn merge_disjoint_keeps_both() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(50.0, 50.0, 60.0, 60.0);
        assert_eq!(merge_detections(&a, &b, 0.8), Merged::Two(a, b));
    }

    #[test]
    fn merge_frame_empty_side() {
        let b = bx(1.0, 1.0, 5.0, 5.0);
        assert_eq!(merge_frame(&[], &[b], 0.8), vec![b]);
        assert_eq!(merge_frame(&[b], &[], 0.8), vec![b]);
    }

    #[test]
    fn merge_frame_identical_lists_dedup() {
        let list = vec![
            bx(0.0, 0.0, 10.0, 10.0),
            bx(20.0, 0.0, 30.0, 10.0),
            bx(40.0, 0.0, 50.0, 10.0),
        ];
        assert_eq!(merge_frame(&list, &list, 0.8), list);
    }

    #[test]
    fn merge_frame_three_by_three_one_cross_pair() {
        // only (first[0], second[1]) overlap; shift s = 20/19 gives IOU 0.9
        let s = 20.0 / 19.0;
        let first = vec![
            bx(0.0, 0.0, 20.0, 10.0),
            bx(100.0, 0.0, 120.0, 10.0),
            bx(200.0, 0.0, 220.0, 10.0),
        ];
        let second = vec![
            bx(0.0, 100.0, 20.0, 110.0),
            bx(s, 0.0, 20.0 + s, 10.0),
            bx(300.0, 0.0, 320.0, 10.0),
        ];
        let out = merge_frame_detailed(&first, &second, 0.8);
        assert_eq!(out.len(), 5);
        assert_eq!(out[0].source, MergeSource::Pair(0, 1));
        assert_eq!(out[0].bbox, bx(s, 0.0, 20.0, 10.0));
    }

    #[test]
    fn greedy_pairing_takes_best_iou_first() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b_small = bx(1.0, 1.0, 9.0, 9.0);
        let b_near = bx(0.2, 0.0, 10.2, 10.0);
        // b_small is contained (IOU 0.64), b_near has IOU ~0.96: b_near pairs first
        let out = merge_frame_detailed(&[a], &[b_small, b_near], 0.8);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].source, MergeSource::Pair(0, 1));
        assert_eq!(out[1].source, MergeSource::Second(0));
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64)
            .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn merged_boxes_stay_inside_union(a in arb_box(), b in arb_box(), t in 0.05..1.0f64) {
            let hull = BoundingBox {
                x_min: a.x_min.min(b.x_min),
                y_min: a.y_min.min(b.y_min),
                x_max: a.x_max.max(b.x_max),
                y_max: a.y_max.max(b.y_max),
            };
            for m in merge_detections(&a, &b, t).boxes() {
                prop_assert!(a.contains(&m) || b.contains(&m) || (hull.contains(&m) && a.intersection(&b).is_some()));
            }
        }

        #[test]
        fn containment_beats_threshold(a in arb_box(), dx in 0.0..1.0f64, dy in 0.0..1.0f64, s in 0.1..1.0f64) {
            let inner = BoundingBox::new(
                a.x_min + dx * (1.0 - s) * a.width(),
                a.y_min + dy * (1.0 - s) * a.height(),
                a.x_min + dx * (1.0 - s) * a.width() + s * a.width(),
                a.y_min + dy * (1.0 - s) * a.height() + s * a.height(),
            );
            if let Ok(inner) = inner {
                if a.contains(&inner) {
                    prop_assert_eq!(merge_detections(&inner, &a, 1.0), Merged::One(inner));
                    prop_assert_eq!(merge_detections(&a, &inner, 1.0), Merged::One(inner));
                }
            }
        }

        #[test]
        fn merge_frame_consumes_each_box_once(
            first in prop::collection::vec(arb_box(), 0..6),
            second in prop::collection::vec(arb_box(), 0..6),
        ) {
            let out = merge_frame_detailed(&first, &second, 0.8);
            let mut seen_first = vec![0; first.len()];
            let mut seen_second = vec![0; second.len()];
            let mut merges = 0;
            for d in &out {
                match d.source {
                    MergeSource::First(i) => seen_first[i] += 1,
                    MergeSource::Second(j) => seen_second[j] += 1,
                    MergeSource::Pair(i, j) => {
                        seen_first[i] += 1;
                        seen_second[j] += 1;
                        merges += 1;
                    }
                }
            }
            prop_assert!(seen_first.iter().chain(&seen_second).all(|&c| c == 1));
            prop_assert!(out.len() <= first.len() + second.len());
            prop_assert!(out.len() + merges >= first.len().max(second.len()));
        }
    }
}
