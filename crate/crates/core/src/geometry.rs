//! Box algebra on normalized center-size boxes, overlap metrics and greedy
//! non-maximum suppression.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in center-size form, normalized to the image extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { cx: 0.5 * (x1 + x2), cy: 0.5 * (y1 + y2), w: x2 - x1, h: y2 - y1 }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn to_corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Clips the box to the unit square.
    pub fn clamp_unit(&self) -> Self {
        let (x1, y1, x2, y2) = self.to_corners();
        Self::from_corners(x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0))
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.to_corners();
    let (bx1, by1, bx2, by2) = b.to_corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    iw * ih
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU; 0 when the enclosing hull is empty.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.to_corners();
    let (bx1, by1, bx2, by2) = b.to_corners();
    let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    if hull <= 0.0 {
        return 0.0;
    }
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    iou(a, b) - (hull - union) / hull
}

/// Indices of `scores` sorted by descending score; equal scores keep the
/// lower index first.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression.
///
/// A candidate is dropped when its IoU with an already kept box is strictly
/// greater than `iou_threshold` (and, with `class_aware`, the classes agree).
/// Returns kept indices in descending score order.
pub fn nms(dets: &[(BBox, usize, f64)], iou_threshold: f64, class_aware: bool) -> Vec<usize> {
    let scores: Vec<f64> = dets.iter().map(|d| d.2).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in argsort_desc(&scores) {
        let (bi, ci, _) = &dets[i];
        let suppressed = kept.iter().any(|&j| {
            let (bj, cj, _) = &dets[j];
            (!class_aware || ci == cj) && iou(bi, bj) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_corners(x1, y1, x2, y2)
    }

    #[test]
    fn corner_conversion() {
        assert_eq!(BBox::new(0.5, 0.5, 1.0, 1.0).to_corners(), (0.0, 0.0, 1.0, 1.0));
        assert_eq!(BBox::new(0.5, 0.5, 0.0, 0.0).to_corners(), (0.5, 0.5, 0.5, 0.5));
        assert_eq!(BBox::new(0.25, 0.25, 0.5, 0.5).to_corners(), (0.0, 0.0, 0.5, 0.5));
    }

    #[test]
    fn iou_cases() {
        let a = corners(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &corners(3.0, 3.0, 4.0, 4.0)), 0.0);
        assert!((iou(&a, &corners(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-12);
        let p = BBox::new(0.3, 0.3, 0.0, 0.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn giou_cases() {
        let a = corners(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a), 1.0);
        assert!((giou(&a, &corners(1.0, 1.0, 2.0, 2.0)) + 0.5).abs() < 1e-12);
        assert!((giou(&corners(0.0, 0.0, 2.0, 2.0), &a) - 0.25).abs() < 1e-12);
        let p = BBox::new(0.3, 0.3, 0.0, 0.0);
        assert_eq!(giou(&p, &p), 0.0);
    }

    #[test]
    fn nms_small_cases() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert!(nms(&[], 0.5, true).is_empty());
        assert_eq!(nms(&[(b, 0, 0.3)], 0.5, true), vec![0]);
        assert_eq!(nms(&[(b, 1, 0.8), (b, 1, 0.9)], 0.5, true), vec![1]);
        // different classes survive class-aware suppression only
        assert_eq!(nms(&[(b, 0, 0.8), (b, 1, 0.9)], 0.5, true), vec![1, 0]);
        assert_eq!(nms(&[(b, 0, 0.8), (b, 1, 0.9)], 0.5, false), vec![1]);
        // equal scores: lower index wins
        assert_eq!(nms(&[(b, 0, 0.5), (b, 0, 0.5)], 0.5, true), vec![0]);
        // threshold 1.0 with strict comparison keeps exact duplicates too
        assert_eq!(nms(&[(b, 0, 0.5), (b, 0, 0.4)], 1.0, true), vec![0, 1]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..0.6f64, 0.0..0.6f64).prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        }

        #[test]
        fn giou_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let (g, i) = (giou(&a, &b), iou(&a, &b));
            prop_assert!(g <= i + 1e-12);
            prop_assert!((-1.0..=1.0).contains(&g));
            prop_assert!((0.0..=1.0).contains(&i));
        }

        #[test]
        fn corners_round_trip(b in arb_box()) {
            let (x1, y1, x2, y2) = b.to_corners();
            prop_assert!(x1 <= x2 && y1 <= y2);
            let r = BBox::from_corners(x1, y1, x2, y2);
            prop_assert!((r.cx - b.cx).abs() < 1e-6 && (r.cy - b.cy).abs() < 1e-6);
            prop_assert!((r.w - b.w).abs() < 1e-6 && (r.h - b.h).abs() < 1e-6);
        }

        #[test]
        fn nms_keeps_no_overlapping_pair(
            dets in prop::collection::vec((arb_box(), 0usize..3, 0.0..1.0f64), 0..30),
            thr in 0.1..1.0f64,
        ) {
            let kept = nms(&dets, thr, true);
            for (a, &i) in kept.iter().enumerate() {
                for &j in &kept[a + 1..] {
                    if dets[i].1 == dets[j].1 {
                        prop_assert!(iou(&dets[i].0, &dets[j].0) <= thr);
                    }
                }
                prop_assert!(i < dets.len());
            }
        }
    }
}
