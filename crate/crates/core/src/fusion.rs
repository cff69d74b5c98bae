//! Cross-branch query fusion.
//!
//! Before every decoder stage the proposals of both branches are ranked
//! together by confidence and the best `k` are kept. The queries attached to
//! the kept proposals are handed to both decoders: each decoder receives its
//! own queries untouched and the other branch's queries after a per-stage,
//! per-direction adapter. Adapters run on every query before selection, so
//! all tensor shapes depend only on `(N, k, d)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::detector::{Modality, ProposalSet, QuerySet};
use crate::error::{Error, Result};
use crate::geometry::argsort_desc;
use crate::nn::{Linear, ParamSet};

/// Parameter-group tag of the adapter bank.
pub const ADAPTER_GROUP: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PostProcess {
    Nms { iou_threshold: f64 },
    Topk { n: usize },
}

impl Default for PostProcess {
    fn default() -> Self {
        PostProcess::Nms { iou_threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// `k` used while training.
    pub k_train: usize,
    /// `k` used at inference.
    pub k_test: usize,
    pub adapter_hidden: usize,
    /// One adapter pair reused by every stage instead of one pair per stage.
    #[serde(default)]
    pub shared_adapters: bool,
    #[serde(default)]
    pub postprocess: PostProcess,
    pub score_floor: f64,
}

impl FusionConfig {
    /// Defaults for `n` queries per branch: keep everything (`k = 2n`).
    pub fn for_queries(n: usize, width: usize) -> Self {
        Self {
            k_train: 2 * n,
            k_test: 2 * n,
            adapter_hidden: width,
            shared_adapters: false,
            postprocess: PostProcess::default(),
            score_floor: 0.05,
        }
    }
}

/// Direction an adapter projects into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ToRgb,
    ToTir,
}

impl Direction {
    pub fn target(self) -> Modality {
        match self {
            Direction::ToRgb => Modality::Rgb,
            Direction::ToTir => Modality::Tir,
        }
    }
}

/// Residual two-layer perceptron `x + W2 gelu(W1 x + b1) + b2`. The output
/// layer starts at zero, so a fresh adapter is the identity.
#[derive(Clone, Copy, Debug)]
pub struct QueryAdapter {
    pub direction: Direction,
    pub stage: usize,
    pub width: usize,
    hidden: Linear,
    out: Linear,
}

impl QueryAdapter {
    pub fn forward(&self, ps: &ParamSet, tape: &mut Tape, queries: Var) -> Var {
        let h = self.hidden.forward(ps, tape, queries);
        let h = tape.gelu(h);
        let y = self.out.forward(ps, tape, h);
        tape.add(queries, y)
    }
}

/// All adapters of a model, stored in their own parameter set.
#[derive(Clone, Debug)]
pub struct AdapterBank {
    pub params: ParamSet,
    pairs: Vec<(QueryAdapter, QueryAdapter)>,
    shared: bool,
}

impl PartialEq for AdapterBank {
    fn eq(&self, other: &Self) -> bool {
        self.shared == other.shared && self.params == other.params
    }
}

impl AdapterBank {
    pub fn new(stages: usize, width: usize, hidden: usize, shared: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e55);
        let mut ps = ParamSet::new(ADAPTER_GROUP);
        let count = if shared { 1 } else { stages };
        let mut make = |ps: &mut ParamSet, stage: usize, direction: Direction| {
            let tag = match direction {
                Direction::ToRgb => "to_rgb",
                Direction::ToTir => "to_tir",
            };
            let name = format!("adapter.stage{stage}.{tag}");
            QueryAdapter {
                direction,
                stage,
                width,
                hidden: Linear::new(ps, &mut rng, &format!("{name}.hidden"), width, hidden),
                out: Linear::zeros(ps, &format!("{name}.out"), hidden, width),
            }
        };
        let pairs = (0..count)
            .map(|s| (make(&mut ps, s, Direction::ToRgb), make(&mut ps, s, Direction::ToTir)))
            .collect();
        Self { params: ps, pairs, shared }
    }

    pub fn stages(&self) -> usize {
        self.pairs.len()
    }

    /// `(to-rgb, to-tir)` adapters used before decoder stage `stage` (0-based).
    pub fn pair(&self, stage: usize) -> (QueryAdapter, QueryAdapter) {
        if self.shared {
            self.pairs[0]
        } else {
            self.pairs[stage]
        }
    }

    /// Applies an adapter row-wise to a whole query set.
    pub fn adapt(&self, adapter: &QueryAdapter, queries: &QuerySet) -> Result<QuerySet> {
        if queries.vectors.ncols() != adapter.width {
            return Err(Error::Shape(format!(
                "adapter width {} does not match query width {}",
                adapter.width,
                queries.vectors.ncols()
            )));
        }
        let mut tape = Tape::new();
        let q = tape.constant(queries.vectors.clone());
        let out = adapter.forward(&self.params, &mut tape, q);
        Ok(QuerySet { vectors: tape.value(out).clone() })
    }
}

/// Indices into the concatenation `[rgb; tir]` of two proposal sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionIndex {
    pub indices: Vec<usize>,
    /// Row count of the RGB half of the union.
    pub rgb_len: usize,
}

impl SelectionIndex {
    pub fn origin(&self, j: usize) -> Modality {
        if self.indices[j] < self.rgb_len {
            Modality::Rgb
        } else {
            Modality::Tir
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Top-`k` of the union of both proposal sets by score. Ties go to RGB
/// before TIR, then to the lower index.
pub fn select_topk(rgb: &ProposalSet, tir: &ProposalSet, k: usize) -> Result<(ProposalSet, SelectionIndex)> {
    let union = ProposalSet::concat(rgb, tir);
    if k == 0 || k > union.len() {
        return Err(Error::KOutOfRange { k, max: union.len() });
    }
    let mut indices = argsort_desc(&union.scores);
    indices.truncate(k);
    let fused = union.select(&indices);
    Ok((fused, SelectionIndex { indices, rgb_len: rgb.len() }))
}

/// Output of one fusion step.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedState {
    /// Proposals shared by both decoders.
    pub proposals: ProposalSet,
    pub queries_rgb: QuerySet,
    pub queries_tir: QuerySet,
    pub selection: SelectionIndex,
}

/// Tape-level fusion result.
#[derive(Clone, Debug)]
pub struct FusedVars {
    pub queries_rgb: Var,
    pub queries_tir: Var,
    /// Box logits of the shared proposals, gathered from both branches.
    pub box_logits: Var,
    pub proposals: ProposalSet,
    pub selection: SelectionIndex,
}

/// One side of the fusion input on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub queries: Var,
    pub box_logits: Var,
}

fn check_selection(selection: &SelectionIndex, union_len: usize) -> Result<()> {
    match selection.indices.iter().find(|&&i| i >= union_len) {
        Some(&index) => Err(Error::IndexOutOfBounds { index, len: union_len }),
        None => Ok(()),
    }
}

/// Builds `[Q_rgb, Ψ_rgb(Q_tir)](Z)` and `[Ψ_tir(Q_rgb), Q_tir](Z)` on a tape.
pub fn gather_on_tape(
    bank: &AdapterBank,
    tape: &mut Tape,
    stage: usize,
    rgb_queries: Var,
    tir_queries: Var,
    selection: &SelectionIndex,
) -> Result<(Var, Var)> {
    let (to_rgb, to_tir) = bank.pair(stage);
    let union_len = tape.value(rgb_queries).nrows() + tape.value(tir_queries).nrows();
    check_selection(selection, union_len)?;
    let tir_as_rgb = to_rgb.forward(&bank.params, tape, tir_queries);
    let rgb_as_tir = to_tir.forward(&bank.params, tape, rgb_queries);
    let stack_rgb = tape.concat_rows(&[rgb_queries, tir_as_rgb]);
    let stack_tir = tape.concat_rows(&[rgb_as_tir, tir_queries]);
    let q_rgb = tape.gather_rows(stack_rgb, &selection.indices);
    let q_tir = tape.gather_rows(stack_tir, &selection.indices);
    Ok((q_rgb, q_tir))
}

/// Value-level version of [`gather_on_tape`] using stage `stage` adapters.
pub fn gather_fused_queries(
    bank: &AdapterBank,
    stage: usize,
    rgb: &QuerySet,
    tir: &QuerySet,
    selection: &SelectionIndex,
) -> Result<(QuerySet, QuerySet)> {
    let (to_rgb, _) = bank.pair(stage);
    if rgb.vectors.ncols() != to_rgb.width || tir.vectors.ncols() != to_rgb.width {
        return Err(Error::Shape("query width does not match adapters".into()));
    }
    let mut tape = Tape::new();
    let r = tape.constant(rgb.vectors.clone());
    let t = tape.constant(tir.vectors.clone());
    let (a, b) = gather_on_tape(bank, &mut tape, stage, r, t, selection)?;
    Ok((QuerySet { vectors: tape.value(a).clone() }, QuerySet { vectors: tape.value(b).clone() }))
}

/// Fusion step on a tape: select, then gather adapted queries and box logits.
pub fn fuse_on_tape(
    bank: &AdapterBank,
    tape: &mut Tape,
    stage: usize,
    rgb: (&ProposalSet, BranchVars),
    tir: (&ProposalSet, BranchVars),
    k: usize,
) -> Result<FusedVars> {
    let (proposals, selection) = select_topk(rgb.0, tir.0, k)?;
    let (queries_rgb, queries_tir) = gather_on_tape(bank, tape, stage, rgb.1.queries, tir.1.queries, &selection)?;
    let logits = tape.concat_rows(&[rgb.1.box_logits, tir.1.box_logits]);
    let box_logits = tape.gather_rows(logits, &selection.indices);
    Ok(FusedVars { queries_rgb, queries_tir, box_logits, proposals, selection })
}

/// Value-level fusion step.
pub fn fuse(
    bank: &AdapterBank,
    stage: usize,
    rgb: (&ProposalSet, &QuerySet),
    tir: (&ProposalSet, &QuerySet),
    k: usize,
) -> Result<FusedState> {
    let (proposals, selection) = select_topk(rgb.0, tir.0, k)?;
    let (queries_rgb, queries_tir) = gather_fused_queries(bank, stage, rgb.1, tir.1, &selection)?;
    Ok(FusedState { proposals, queries_rgb, queries_tir, selection })
}
