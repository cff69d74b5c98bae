//! COCO-style average precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::matching::GroundTruth;
use crate::model::Detection;

pub const MAX_DETECTIONS: usize = 100;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Precision envelope sampled at recall 0, 0.01, ..., 1.
    #[default]
    Coco101,
    /// Area under the full precision envelope.
    AllPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean over thresholds and over classes that have ground truth.
    pub map: f64,
    pub map50: f64,
    /// Per class: AP averaged over thresholds; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    pub per_class50: Vec<Option<f64>>,
    pub num_detections: usize,
    pub num_ground_truth: usize,
    /// Per class: interpolated precision at the 101 recall points, IoU 0.5.
    pub pr_curve50: Vec<Vec<f64>>,
}

/// AP of one class at one threshold. `dets` holds `(image, score, det index)`.
struct ClassCurve {
    /// Cumulative `(recall, precision)` after each detection in global score order.
    points: Vec<(f64, f64)>,
}

impl ClassCurve {
    fn envelope(&self) -> Vec<f64> {
        let mut env: Vec<f64> = self.points.iter().map(|p| p.1).collect();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        env
    }

    fn sampled(&self) -> Vec<f64> {
        let env = self.envelope();
        (0..=100)
            .map(|r| {
                let r = r as f64 / 100.0;
                let idx = self.points.partition_point(|p| p.0 < r);
                env.get(idx).copied().unwrap_or(0.0)
            })
            .collect()
    }

    fn ap(&self, interpolation: Interpolation) -> f64 {
        match interpolation {
            Interpolation::Coco101 => self.sampled().iter().sum::<f64>() / 101.0,
            Interpolation::AllPoint => {
                let env = self.envelope();
                let mut prev = 0.0;
                let mut area = 0.0;
                for (p, e) in self.points.iter().zip(env) {
                    area += (p.0 - prev) * e;
                    prev = p.0;
                }
                area
            }
        }
    }
}

fn check_classes(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize) -> Result<()> {
    let bad = dets
        .iter()
        .flatten()
        .map(|d| d.class_id)
        .chain(gts.iter().flatten().map(|g| g.class_id))
        .find(|&c| c >= num_classes);
    match bad {
        Some(c) => Err(Error::UnknownClass(c)),
        None => Ok(()),
    }
}

/// Per-image detections of one class, highest score first (ties keep input
/// order), capped at [`MAX_DETECTIONS`].
fn class_detections(dets: &[Vec<Detection>], class: usize) -> Vec<Vec<&Detection>> {
    dets.iter()
        .map(|img| {
            let mut d: Vec<&Detection> = img.iter().filter(|d| d.class_id == class).collect();
            d.sort_by(|a, b| b.score.total_cmp(&a.score));
            d.truncate(MAX_DETECTIONS);
            d
        })
        .collect()
}

fn curve(
    dets: &[Vec<&Detection>],
    gts: &[Vec<GroundTruth>],
    class: usize,
    threshold: f64,
) -> Option<ClassCurve> {
    let npos: usize = gts.iter().flatten().filter(|g| g.class_id == class).count();
    if npos == 0 {
        return None;
    }
    // (score, image, rank within image, is true positive)
    let mut flat: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, (d, g)) in dets.iter().zip(gts).enumerate() {
        let g: Vec<&GroundTruth> = g.iter().filter(|g| g.class_id == class).collect();
        let mut taken = vec![false; g.len()];
        for (rank, det) in d.iter().enumerate() {
            let mut best = None;
            let mut best_iou = threshold;
            for (j, gt) in g.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(&det.bbox, &gt.bbox);
                if o >= best_iou && best.is_none_or(|_| o > best_iou) {
                    best_iou = o;
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                taken[j] = true;
            }
            flat.push((det.score, img, rank, best.is_some()));
        }
    }
    flat.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut tp = 0usize;
    let points = flat
        .iter()
        .enumerate()
        .map(|(i, f)| {
            tp += f.3 as usize;
            (tp as f64 / npos as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    Some(ClassCurve { points })
}

/// COCO-style AP over `thresholds` for detections and ground truth given
/// per image (same length, same order).
pub fn coco_map(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    thresholds: &[f64],
    interpolation: Interpolation,
) -> Result<EvalResult> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    if thresholds.is_empty() {
        return Err(Error::Config("no IoU thresholds".into()));
    }
    check_classes(dets, gts, num_classes)?;

    let mut per_class = Vec::with_capacity(num_classes);
    let mut per_class50 = Vec::with_capacity(num_classes);
    let mut pr_curve50 = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let d = class_detections(dets, c);
        let aps: Option<Vec<f64>> = thresholds
            .iter()
            .map(|&t| curve(&d, gts, c, t).map(|cv| cv.ap(interpolation)))
            .collect();
        per_class.push(aps.map(|a| a.iter().sum::<f64>() / a.len() as f64));
        let c50 = curve(&d, gts, c, 0.5);
        per_class50.push(c50.as_ref().map(|cv| cv.ap(interpolation)));
        pr_curve50.push(c50.map(|cv| cv.sampled()).unwrap_or_default());
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    Ok(EvalResult {
        map: mean(&per_class),
        map50: mean(&per_class50),
        per_class,
        per_class50,
        num_detections: dets.iter().map(Vec::len).sum(),
        num_ground_truth: gts.iter().map(Vec::len).sum(),
        pr_curve50,
    })
}

/// `coco_map` over the standard thresholds with 101-point interpolation.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize) -> Result<EvalResult> {
    coco_map(dets, gts, num_classes, &coco_thresholds(), Interpolation::Coco101)
}

/// `(degraded - clean) / clean`; 0 when the clean score is 0.
pub fn relative_drop(clean: f64, degraded: f64) -> f64 {
    if clean == 0.0 {
        0.0
    } else {
        (degraded - clean) / clean
    }
}
