//! Independent reference implementations shared by the property tests and
//! the acceptance suite.
#![allow(dead_code)]

use mdqf::autograd::Tape;
use mdqf::datagen::{generate_scene, SceneSpec};
use mdqf::detector::{BranchDetector, DetectorConfig, Modality, ProposalSet};
use mdqf::eval::coco_thresholds;
use mdqf::fusion::FusionConfig;
use mdqf::geometry::iou;
use mdqf::loss::branch_loss_on_tape;
use mdqf::matching::{GroundTruth, LossWeights};
use mdqf::nn::{ParamId, ParamSet};
use mdqf::raster::Image;
use mdqf::{BBox, Detection, MdqfModel};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Quadratic NMS: repeatedly take the best remaining candidate (ties to the
/// lower index) and strike everything it overlaps by more than `thr`.
pub fn nms_reference(dets: &[(BBox, usize, f64)], thr: f64, class_aware: bool) -> Vec<usize> {
    let mut alive = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if alive[i] && best.is_none_or(|b| dets[i].2 > dets[b].2) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..dets.len() {
            if alive[i] && (!class_aware || dets[i].1 == dets[b].1) && iou(&dets[i].0, &dets[b].0) > thr {
                alive[i] = false;
            }
        }
    }
    kept
}

/// Exhaustive minimum over all assignments of the smaller side.
pub fn assignment_reference(cost: &Array2<f64>) -> f64 {
    let (r, c) = cost.dim();
    let transpose = r > c;
    let (rows, cols) = if transpose { (c, r) } else { (r, c) };
    let at = |i: usize, j: usize| if transpose { cost[[j, i]] } else { cost[[i, j]] };
    fn go(i: usize, rows: usize, cols: usize, used: &mut Vec<bool>, at: &dyn Fn(usize, usize) -> f64) -> f64 {
        if i == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                best = best.min(at(i, j) + go(i + 1, rows, cols, used, at));
                used[j] = false;
            }
        }
        best
    }
    go(0, rows, cols, &mut vec![false; cols], &at)
}

/// Scores of the union `[rgb; tir]` sorted descending, first `k`, with the
/// union index of each (ties to the lower index).
pub fn topk_reference(rgb: &[f64], tir: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = rgb.iter().chain(tir).copied().enumerate().collect();
    // insertion sort: stable and obviously correct
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 && all[j - 1].1 < all[j].1 {
            all.swap(j - 1, j);
            j -= 1;
        }
    }
    all.truncate(k);
    all
}

/// Greedy matching of one image's class detections (already in score order)
/// to ground truth: each detection takes the unmatched box of highest IoU
/// at or above `thr`, ties to the lower ground-truth index.
fn true_positives(dets: &[&Detection], gts: &[&GroundTruth], thr: f64) -> usize {
    let mut taken = vec![false; gts.len()];
    let mut tp = 0;
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let o = iou(&d.bbox, &g.bbox);
            if !taken[j] && o >= thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            tp += 1;
        }
    }
    tp
}

/// AP of one class at one threshold, recomputing precision and recall from
/// scratch at every cut of the global ranking.
fn ap_reference(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class: usize, thr: f64) -> Option<f64> {
    let npos = gts.iter().flatten().filter(|g| g.class_id == class).count();
    if npos == 0 {
        return None;
    }
    // global ranking: score, then image, then position within the image's score order
    let mut ranked: Vec<(f64, usize, usize, Detection)> = Vec::new();
    for (img, d) in dets.iter().enumerate() {
        let mut own: Vec<&Detection> = d.iter().filter(|d| d.class_id == class).collect();
        own.sort_by(|a, b| b.score.total_cmp(&a.score));
        for (r, x) in own.into_iter().enumerate() {
            ranked.push((x.score, img, r, *x));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pr = Vec::new();
    for cut in 1..=ranked.len() {
        let mut tp = 0;
        for (img, g) in gts.iter().enumerate() {
            let mine: Vec<&Detection> = ranked[..cut].iter().filter(|r| r.1 == img).map(|r| &r.3).collect();
            let g: Vec<&GroundTruth> = g.iter().filter(|g| g.class_id == class).collect();
            tp += true_positives(&mine, &g, thr);
        }
        pr.push((tp as f64 / npos as f64, tp as f64 / cut as f64));
    }
    let sum: f64 = (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            pr.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
        })
        .sum();
    Some(sum / 101.0)
}

/// `(mAP, mAP50)` by brute force.
pub fn map_reference(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize) -> (f64, f64) {
    let mut all = Vec::new();
    let mut at50 = Vec::new();
    for c in 0..num_classes {
        let per: Option<Vec<f64>> = coco_thresholds().iter().map(|&t| ap_reference(dets, gts, c, t)).collect();
        if let Some(per) = per {
            all.push(per.iter().sum::<f64>() / per.len() as f64);
            at50.push(ap_reference(dets, gts, c, 0.5).expect("class has ground truth"));
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    (mean(&all), mean(&at50))
}

/// Box on a coarse grid so that exact overlaps and IoU ties occur.
pub fn grid_box(rng: &mut ChaCha8Rng) -> BBox {
    let q = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| rng.gen_range(lo..=hi) as f64 / 10.0;
    BBox::new(q(rng, 2, 8), q(rng, 2, 8), q(rng, 1, 4), q(rng, 1, 4))
}

/// A random instance of at most 5 images with at most 6 detections each.
pub fn micro_instance(rng: &mut ChaCha8Rng, num_classes: usize) -> (Vec<Vec<Detection>>, Vec<Vec<GroundTruth>>) {
    let images = rng.gen_range(1..=5);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let g: Vec<GroundTruth> = (0..rng.gen_range(0..=4))
            .map(|_| GroundTruth { bbox: grid_box(rng), class_id: rng.gen_range(0..num_classes) })
            .collect();
        let d: Vec<Detection> = (0..rng.gen_range(0..=6))
            .map(|_| {
                // half the detections sit near a ground-truth box
                let bbox = match g.get(rng.gen_range(0..g.len().max(1) * 2)) {
                    Some(gt) => BBox::new(gt.bbox.cx + rng.gen_range(-0.05..0.05), gt.bbox.cy, gt.bbox.w, gt.bbox.h),
                    None => grid_box(rng),
                };
                Detection {
                    bbox,
                    class_id: rng.gen_range(0..num_classes),
                    // a few distinct values so score ties happen
                    score: rng.gen_range(1..=8) as f64 / 8.0,
                    origin: Modality::Rgb,
                }
            })
            .collect();
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}

/// Proposal set with one class whose scores are `sigmoid(logits)`.
pub fn proposals_from_logits(logits: &[f64]) -> ProposalSet {
    let n = logits.len();
    let boxes = Array2::from_shape_fn((n, 4), |(i, j)| if j < 2 { (i as f64 + 0.5) / n as f64 } else { 0.1 });
    ProposalSet::new(boxes, Array2::from_shape_vec((n, 1), logits.to_vec()).expect("column"))
}

pub const FD_STEP: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn tiny_config(channels: usize, seed: u64) -> DetectorConfig {
    DetectorConfig {
        image_height: 16,
        image_width: 16,
        channels,
        patch: 8,
        width: 16,
        heads: 2,
        ffn_width: 32,
        encoder_layers: 1,
        stages: 2,
        num_queries: 4,
        num_classes: 3,
        seed,
        spatial_prior: 1.0,
    }
}

fn randomize(ps: &mut ParamSet, rng: &mut ChaCha8Rng) {
    for i in 0..ps.len() {
        ps.get_mut(ParamId(i as u32)).mapv_inplace(|x| x + rng.gen_range(-0.3..0.3));
    }
}

pub struct GradInstance {
    pub model: MdqfModel,
    pub rgb: Image,
    pub tir: Image,
    pub gts: Vec<GroundTruth>,
}

/// d = 16, N = 4 per branch, k = 6, 2 stages, parameters moved away from
/// their identity / zero initializations so every path carries gradient.
pub fn gradient_instance() -> GradInstance {
    let rgb = BranchDetector::new(Modality::Rgb, tiny_config(3, 1)).unwrap();
    let tir = BranchDetector::new(Modality::Tir, tiny_config(1, 2)).unwrap();
    let fusion = FusionConfig { k_train: 6, k_test: 6, ..FusionConfig::for_queries(4, 16) };
    let mut model = MdqfModel::new(rgb, tir, fusion, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    randomize(&mut model.rgb.params, &mut rng);
    randomize(&mut model.tir.params, &mut rng);
    randomize(&mut model.adapters.params, &mut rng);
    let scene = generate_scene(&SceneSpec {
        height: 16,
        width: 16,
        min_size: 4.0,
        max_size: 7.0,
        min_objects: 2,
        max_objects: 2,
        seed: 5,
        ..SceneSpec::default()
    })
    .unwrap();
    let gts = vec![
        GroundTruth { bbox: BBox::new(0.3, 0.35, 0.3, 0.25), class_id: 1 },
        GroundTruth { bbox: BBox::new(0.7, 0.6, 0.2, 0.4), class_id: 2 },
    ];
    GradInstance { model, rgb: scene.rgb, tir: scene.tir, gts }
}

/// Joint loss on a fresh tape. With `replay`, stop-gradient inputs keep the
/// values of the unperturbed pass.
pub fn joint_loss_tape(g: &GradInstance, replay: Option<&[Array2<f64>]>) -> (f64, Tape, mdqf::autograd::Var) {
    let mut tape = match replay {
        Some(v) => Tape::replaying(v.to_vec()),
        None => Tape::new(),
    };
    let m = &g.model;
    let out = m.forward_fused_on_tape(&mut tape, &g.rgb, &g.tir, m.fusion.k_train).unwrap();
    let w = LossWeights::default();
    let (a, _) = branch_loss_on_tape(&mut tape, &out.rgb, 2, &g.gts, w).unwrap();
    let (b, _) = branch_loss_on_tape(&mut tape, &out.tir, 2, &g.gts, w).unwrap();
    let l = tape.add(a, b);
    (tape.value(l)[[0, 0]], tape, l)
}

#[derive(Clone, Copy)]
pub enum Part {
    Rgb,
    Tir,
    Adapters,
}

pub fn part_params(model: &mut MdqfModel, part: Part) -> &mut ParamSet {
    match part {
        Part::Rgb => &mut model.rgb.params,
        Part::Tir => &mut model.tir.params,
        Part::Adapters => &mut model.adapters.params,
    }
}

/// Central differences on `samples` random entries of every decoder, head
/// and adapter array. Returns `(worst relative error, entries checked, worst entry)`.
pub fn joint_gradient_check(samples: usize) -> (f64, usize, String) {
    let mut g = gradient_instance();
    let (_, tape, l) = joint_loss_tape(&g, None);
    let grads = tape.backward(l).params();
    let stopped = tape.stopped_values().to_vec();
    let mut worst: f64 = 0.0;
    let mut worst_at = String::new();
    let mut checked = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for part in [Part::Rgb, Part::Tir, Part::Adapters] {
        let names: Vec<String> = part_params(&mut g.model, part)
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with("decoder.") || n.starts_with("head") || n.starts_with("adapter"))
            .collect();
        for name in names {
            let ps = part_params(&mut g.model, part);
            let id = ps.id(&name).unwrap();
            let key = ps.key(id);
            let shape = ps.get(id).dim();
            let analytic = grads.get(&key).cloned().unwrap_or_else(|| Array2::zeros(shape));
            for _ in 0..samples {
                let (r, c) = (rng.gen_range(0..shape.0), rng.gen_range(0..shape.1));
                let orig = part_params(&mut g.model, part).get(id)[[r, c]];
                part_params(&mut g.model, part).get_mut(id)[[r, c]] = orig + FD_STEP;
                let plus = joint_loss_tape(&g, Some(&stopped)).0;
                part_params(&mut g.model, part).get_mut(id)[[r, c]] = orig - FD_STEP;
                let minus = joint_loss_tape(&g, Some(&stopped)).0;
                part_params(&mut g.model, part).get_mut(id)[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let e = rel_err(analytic[[r, c]], numeric);
                if e > worst {
                    worst = e;
                    worst_at = format!("{name}[{r},{c}]: analytic {} numeric {numeric}", analytic[[r, c]]);
                }
                checked += 1;
            }
        }
    }
    (worst, checked, worst_at)
}
