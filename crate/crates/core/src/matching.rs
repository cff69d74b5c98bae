//! Optimal bipartite matching between predictions and ground truth.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::detector::{sigmoid, ProposalSet};
use crate::geometry::{giou, BBox};

/// A labeled ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Weights of the classification, GIoU and L1 terms, shared by the matching
/// cost and the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.125, beta: 0.25, gamma: 0.625 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(prediction, ground truth)` pairs, sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Minimum-cost assignment for a rectangular cost matrix. Returns
/// `min(rows, cols)` `(row, col)` pairs sorted by row.
///
/// Shortest augmenting paths with row/column potentials, O(n²m).
pub fn linear_sum_assignment(cost: &Array2<f64>) -> Vec<(usize, usize)> {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    if rows > cols {
        let mut pairs: Vec<_> = linear_sum_assignment(&cost.t().to_owned())
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        return pairs;
    }

    // 1-based arrays; column 0 is a virtual source.
    let (n, m) = (rows, cols);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<_> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    pairs
}

/// `cost[i, j]` between prediction `i` and ground truth `j`.
pub fn matching_cost(predictions: &ProposalSet, gts: &[GroundTruth], weights: LossWeights) -> Array2<f64> {
    Array2::from_shape_fn((predictions.len(), gts.len()), |(i, j)| {
        let gt = &gts[j];
        let prob = sigmoid(predictions.class_logits[[i, gt.class_id]]);
        let p = BBox::new(
            predictions.boxes[[i, 0]],
            predictions.boxes[[i, 1]],
            predictions.boxes[[i, 2]],
            predictions.boxes[[i, 3]],
        );
        let l1 = gt
            .bbox
            .to_array()
            .iter()
            .zip(p.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 4.0;
        weights.alpha * (1.0 - prob) + weights.beta * (1.0 - giou(&p, &gt.bbox)) + weights.gamma * l1
    })
}

pub fn hungarian_match(predictions: &ProposalSet, gts: &[GroundTruth], weights: LossWeights) -> Assignment {
    let pairs = if gts.is_empty() {
        Vec::new()
    } else {
        linear_sum_assignment(&matching_cost(predictions, gts, weights))
    };
    let mut matched = vec![false; predictions.len()];
    for &(p, _) in &pairs {
        matched[p] = true;
    }
    let unmatched = (0..predictions.len()).filter(|&i| !matched[i]).collect();
    Assignment { pairs, unmatched }
}
