//! Per-stage detection loss and its sums over stages and branches.
//!
//! Classification uses per-class sigmoid cross-entropy over every prediction
//! (matched rows target a one-hot vector, unmatched rows all zeros), summed and
//! divided by the ground-truth count. Box terms average `1 - giou` and the
//! coordinate-wise absolute error over matched pairs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::detector::{ProposalSet, StageVars};
use crate::error::{Error, Result};
use crate::matching::{hungarian_match, Assignment, GroundTruth, LossWeights};

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
}

impl LossComponents {
    pub fn weighted(&self, w: LossWeights) -> f64 {
        w.alpha * self.cls + w.beta * self.iou + w.gamma * self.l1
    }
}

impl std::ops::AddAssign for LossComponents {
    fn add_assign(&mut self, o: Self) {
        self.cls += o.cls;
        self.iou += o.iou;
        self.l1 += o.l1;
    }
}

/// Stage loss on a tape. Returns the weighted scalar and the unweighted terms.
pub fn stage_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    boxes: Var,
    gts: &[GroundTruth],
    assignment: &Assignment,
    weights: LossWeights,
) -> (Var, LossComponents) {
    let (n, c) = tape.value(logits).dim();
    let mut targets = Array2::zeros((n, c));
    for &(p, g) in &assignment.pairs {
        targets[[p, gts[g].class_id]] = 1.0;
    }
    let norm = gts.len().max(1) as f64;
    let bce = tape.bce_with_logits(logits, targets);
    let cls = tape.scale(bce, 1.0 / norm);
    let mut parts = LossComponents { cls: tape.value(cls)[[0, 0]], ..Default::default() };
    let mut total = tape.scale(cls, weights.alpha);

    let matched = assignment.pairs.len();
    if matched > 0 {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let target = Array2::from_shape_fn((matched, 4), |(i, j)| gts[assignment.pairs[i].1].bbox.to_array()[j]);
        let picked = tape.gather_rows(boxes, &rows);
        let giou = tape.giou_loss(picked, target.clone());
        let giou = tape.scale(giou, 1.0 / matched as f64);
        let l1 = tape.l1_loss(picked, target);
        let l1 = tape.scale(l1, 1.0 / (4.0 * matched as f64));
        parts.iou = tape.value(giou)[[0, 0]];
        parts.l1 = tape.value(l1)[[0, 0]];
        let giou = tape.scale(giou, weights.beta);
        let l1 = tape.scale(l1, weights.gamma);
        total = tape.add(total, giou);
        total = tape.add(total, l1);
    }
    (total, parts)
}

/// Value-level stage loss.
pub fn stage_loss(
    predictions: &ProposalSet,
    gts: &[GroundTruth],
    assignment: &Assignment,
    weights: LossWeights,
) -> (f64, LossComponents) {
    let mut tape = Tape::new();
    let logits = tape.constant(predictions.class_logits.clone());
    let boxes = tape.constant(predictions.boxes.clone());
    let (total, parts) = stage_loss_on_tape(&mut tape, logits, boxes, gts, assignment, weights);
    (tape.value(total)[[0, 0]], parts)
}

/// Sum of stage losses, each stage matched independently.
pub fn branch_loss_on_tape(
    tape: &mut Tape,
    stages: &[StageVars],
    expected_stages: usize,
    gts: &[GroundTruth],
    weights: LossWeights,
) -> Result<(Var, LossComponents)> {
    if stages.len() != expected_stages || stages.is_empty() {
        return Err(Error::StageCount { expected: expected_stages, got: stages.len() });
    }
    let mut total: Option<Var> = None;
    let mut parts = LossComponents::default();
    for s in stages {
        let proposals = s.proposals(tape);
        let assignment = hungarian_match(&proposals, gts, weights);
        let (l, p) = stage_loss_on_tape(tape, s.logits, s.boxes, gts, &assignment, weights);
        parts += p;
        total = Some(match total {
            Some(t) => tape.add(t, l),
            None => l,
        });
    }
    Ok((total.expect("at least one stage"), parts))
}

/// Value-level branch loss over the stage outputs of one branch.
pub fn branch_loss(
    stages: &[ProposalSet],
    expected_stages: usize,
    gts: &[GroundTruth],
    weights: LossWeights,
) -> Result<f64> {
    if stages.len() != expected_stages || stages.is_empty() {
        return Err(Error::StageCount { expected: expected_stages, got: stages.len() });
    }
    Ok(stages
        .iter()
        .map(|p| stage_loss(p, gts, &hungarian_match(p, gts, weights), weights).0)
        .sum())
}

/// `branch_loss(rgb) + branch_loss(tir)`, both against the same ground truth.
pub fn joint_loss(
    rgb: &[ProposalSet],
    tir: &[ProposalSet],
    expected_stages: usize,
    gts: &[GroundTruth],
    weights: LossWeights,
) -> Result<f64> {
    Ok(branch_loss(rgb, expected_stages, gts, weights)? + branch_loss(tir, expected_stages, gts, weights)?)
}
