//! A self-contained single-modality detector with iterative query refinement.
//!
//! The branch turns an image into encoder memory (patch embedding plus a few
//! self-attention blocks), then refines a fixed set of learned queries
//! through a stack of decoder layers. Every decoder layer is followed by its
//! own prediction head that re-scores the queries and nudges their boxes in
//! inverse-sigmoid space.

use std::f64::consts::PI;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamSet};
use crate::raster::Image;

/// Number of decoder stages of a full-size branch.
pub const DECODER_STAGES: usize = 6;

const PRIOR_PROB: f64 = 0.01;
const INV_SIGMOID_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Tir,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Tir => "tir",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Rgb => Modality::Tir,
            Modality::Tir => Modality::Rgb,
        }
    }

    /// Parameter-group tag used on a shared tape.
    pub fn group(self) -> u32 {
        match self {
            Modality::Rgb => 0,
            Modality::Tir => 1,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "tir" => Ok(Modality::Tir),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch: usize,
    /// Model width `d`.
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub encoder_layers: usize,
    pub stages: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Strength of the Gaussian bias that steers each query's
    /// cross-attention toward its current box; 0 disables it.
    #[serde(default = "default_spatial_prior")]
    pub spatial_prior: f64,
}

fn default_spatial_prior() -> f64 {
    16.0
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            channels: 3,
            patch: 8,
            width: 64,
            heads: 4,
            ffn_width: 128,
            encoder_layers: 2,
            stages: DECODER_STAGES,
            num_queries: 20,
            num_classes: 3,
            seed: 0,
            spatial_prior: default_spatial_prior(),
        }
    }
}

impl DetectorConfig {
    pub fn for_modality(modality: Modality) -> Self {
        let channels = match modality {
            Modality::Rgb => 3,
            Modality::Tir => 1,
        };
        Self { channels, ..Self::default() }
    }

    pub fn tokens(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.image_height.is_multiple_of(self.patch) || !self.image_width.is_multiple_of(self.patch) {
            return Err(Error::IndivisibleImage {
                height: self.image_height,
                width: self.image_width,
                patch: self.patch,
            });
        }
        if !self.width.is_multiple_of(4) || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} must be divisible by 4 and by heads {}", self.width, self.heads));
        }
        if !(self.spatial_prior >= 0.0 && self.spatial_prior.is_finite()) {
            return bad(format!("spatial_prior must be finite and nonnegative, got {}", self.spatial_prior));
        }
        if self.stages == 0 || self.num_queries == 0 || self.num_classes == 0 || self.channels == 0 {
            return bad("stages, queries, classes and channels must be positive".into());
        }
        Ok(())
    }
}

/// Encoder output: one row per spatial token.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderMemory {
    pub features: Array2<f64>,
    pub positions: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    pub vectors: Array2<f64>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

/// Boxes, class logits and the derived confidence of a set of queries.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    /// `(N, 4)` normalized center-size boxes.
    pub boxes: Array2<f64>,
    /// `max_c sigmoid(class_logits[i, c])`.
    pub scores: Vec<f64>,
    pub class_logits: Array2<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_sigmoid(p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    let a = p.max(INV_SIGMOID_EPS);
    let b = (1.0 - p).max(INV_SIGMOID_EPS);
    (a / b).ln()
}

impl ProposalSet {
    pub fn new(boxes: Array2<f64>, class_logits: Array2<f64>) -> Self {
        assert_eq!(boxes.nrows(), class_logits.nrows());
        let scores = class_logits
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&l| sigmoid(l)).fold(0.0, f64::max))
            .collect();
        Self { boxes, scores, class_logits }
    }

    pub fn len(&self) -> usize {
        self.boxes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.nrows() == 0
    }

    /// Class with the highest logit for row `i` (lowest id on ties).
    pub fn best_class(&self, i: usize) -> usize {
        let row = self.class_logits.row(i);
        let mut best = 0;
        for (c, &l) in row.iter().enumerate() {
            if l > row[best] {
                best = c;
            }
        }
        best
    }

    pub fn select(&self, rows: &[usize]) -> ProposalSet {
        ProposalSet {
            boxes: self.boxes.select(Axis(0), rows),
            scores: rows.iter().map(|&r| self.scores[r]).collect(),
            class_logits: self.class_logits.select(Axis(0), rows),
        }
    }

    pub fn concat(a: &ProposalSet, b: &ProposalSet) -> ProposalSet {
        let cat = |x: &Array2<f64>, y: &Array2<f64>| {
            ndarray::concatenate(Axis(0), &[x.view(), y.view()]).expect("widths agree")
        };
        ProposalSet {
            boxes: cat(&a.boxes, &b.boxes),
            scores: a.scores.iter().chain(&b.scores).copied().collect(),
            class_logits: cat(&a.class_logits, &b.class_logits),
        }
    }
}

/// One decoder stage on a tape: refined queries, class logits and boxes.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub queries: Var,
    pub logits: Var,
    pub boxes: Var,
}

impl StageVars {
    pub fn proposals(&self, tape: &Tape) -> ProposalSet {
        ProposalSet::new(tape.value(self.boxes).clone(), tape.value(self.logits).clone())
    }

    pub fn queries(&self, tape: &Tape) -> QuerySet {
        QuerySet { vectors: tape.value(self.queries).clone() }
    }
}

/// Stage-0 inputs on a tape. `box_logits` stays attached so that the learned
/// anchors receive gradient through the first refinement.
#[derive(Clone, Copy, Debug)]
pub struct InitVars {
    pub queries: Var,
    pub box_logits: Var,
    pub class_logits: Var,
}

impl InitVars {
    pub fn proposals(&self, tape: &Tape) -> ProposalSet {
        let boxes = tape.value(self.box_logits).mapv(sigmoid);
        ProposalSet::new(boxes, tape.value(self.class_logits).clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MemoryVars {
    pub features: Var,
    /// Features plus positional encoding, used as attention keys.
    pub keys: Var,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp,
    norm3: LayerNorm,
}

#[derive(Clone, Debug)]
struct PredictionHead {
    class: Linear,
    bbox: Mlp,
}

#[derive(Clone, Debug)]
struct Layout {
    patch_embed: Linear,
    encoder: Vec<EncoderBlock>,
    encoder_norm: LayerNorm,
    query_pos: Mlp,
    anchors: ParamId,
    content: ParamId,
    decoder: Vec<DecoderLayer>,
    heads: Vec<PredictionHead>,
}

/// Parameters under these prefixes are held fixed during joint training.
pub const FROZEN_PREFIXES: [&str; 2] = ["backbone.", "encoder."];

pub fn is_frozen_name(name: &str) -> bool {
    FROZEN_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug)]
pub struct BranchDetector {
    pub modality: Modality,
    pub config: DetectorConfig,
    pub params: ParamSet,
    layout: Layout,
    memory_positions: Array2<f64>,
    token_centers: Array2<f64>,
}

impl PartialEq for BranchDetector {
    fn eq(&self, other: &Self) -> bool {
        self.modality == other.modality && self.config == other.config && self.params == other.params
    }
}

/// Sine/cosine features of each column of `coords` (values in [0, 1]),
/// `per_coord` features per column.
pub fn sine_embedding(coords: &Array2<f64>, per_coord: usize) -> Array2<f64> {
    let n = coords.nrows();
    let mut out = Array2::zeros((n, coords.ncols() * per_coord));
    for (i, row) in coords.rows().into_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            for j in 0..per_coord / 2 {
                let freq = 10000f64.powf(2.0 * j as f64 / per_coord as f64);
                let a = v * 2.0 * PI / freq;
                out[[i, c * per_coord + 2 * j]] = a.sin();
                out[[i, c * per_coord + 2 * j + 1]] = a.cos();
            }
        }
    }
    out
}

/// Normalized `(x, y)` centers of the patch tokens, row-major.
fn token_centers(config: &DetectorConfig) -> Array2<f64> {
    let gh = config.image_height / config.patch;
    let gw = config.image_width / config.patch;
    let mut centers = Array2::zeros((gh * gw, 2));
    for gy in 0..gh {
        for gx in 0..gw {
            centers[[gy * gw + gx, 0]] = (gx as f64 + 0.5) / gw as f64;
            centers[[gy * gw + gx, 1]] = (gy as f64 + 0.5) / gh as f64;
        }
    }
    centers
}

fn token_positions(config: &DetectorConfig) -> Array2<f64> {
    sine_embedding(&token_centers(config), config.width / 2)
}

/// `-strength/2 · ((dx/sx)² + (dy/sy)²)` between each box center and each
/// token center, with `sx = w/2` plus half a token.
fn spatial_bias(boxes: &Array2<f64>, centers: &Array2<f64>, strength: f64, cell: (f64, f64)) -> Array2<f64> {
    Array2::from_shape_fn((boxes.nrows(), centers.nrows()), |(i, t)| {
        let sx = 0.5 * boxes[[i, 2]] + 0.5 * cell.0;
        let sy = 0.5 * boxes[[i, 3]] + 0.5 * cell.1;
        let dx = (centers[[t, 0]] - boxes[[i, 0]]) / sx;
        let dy = (centers[[t, 1]] - boxes[[i, 1]]) / sy;
        -0.5 * strength * (dx * dx + dy * dy)
    })
}

impl BranchDetector {
    /// Builds a freshly initialized detector; the layout is a pure function of
    /// the configuration and the values a pure function of `config.seed`.
    pub fn new(modality: Modality, config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (0x5eed_0000 + modality.group() as u64));
        let mut ps = ParamSet::new(modality.group());
        let d = config.width;
        let patch_dim = config.patch * config.patch * config.channels;
        let mlp = |ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, i: usize, h: usize, o: usize| Mlp {
            hidden: Linear::new(ps, rng, &format!("{name}.hidden"), i, h),
            out: Linear::new(ps, rng, &format!("{name}.out"), h, o),
        };

        let patch_embed = Linear::new(&mut ps, &mut rng, "backbone.patch_embed", patch_dim, d);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let n = format!("encoder.block{i}");
                EncoderBlock {
                    norm1: LayerNorm::new(&mut ps, &format!("{n}.norm1"), d),
                    attn: MultiHeadAttention::new(&mut ps, &mut rng, &format!("{n}.attn"), d, config.heads),
                    norm2: LayerNorm::new(&mut ps, &format!("{n}.norm2"), d),
                    ffn: mlp(&mut ps, &mut rng, &format!("{n}.ffn"), d, config.ffn_width, d),
                }
            })
            .collect();
        let encoder_norm = LayerNorm::new(&mut ps, "encoder.norm", d);
        let query_pos = mlp(&mut ps, &mut rng, "decoder.query_pos", d, d, d);

        // Anchors start on a jittered grid with a moderate size, stored as logits.
        let n = config.num_queries;
        let cols = (n as f64).sqrt().ceil() as usize;
        let rows = n.div_ceil(cols);
        let mut anchors = Array2::zeros((n, 4));
        for i in 0..n {
            let (r, c) = (i / cols, i % cols);
            let cx = (c as f64 + 0.5) / cols as f64;
            let cy = (r as f64 + 0.5) / rows as f64;
            let jitter = |rng: &mut ChaCha8Rng| rand::Rng::gen_range(rng, -0.02..0.02);
            anchors[[i, 0]] = inverse_sigmoid(cx + jitter(&mut rng));
            anchors[[i, 1]] = inverse_sigmoid(cy + jitter(&mut rng));
            anchors[[i, 2]] = inverse_sigmoid(0.25);
            anchors[[i, 3]] = inverse_sigmoid(0.25);
        }
        let anchors = ps.add("decoder.anchors", anchors);
        let content = ps.add(
            "decoder.content",
            Array2::from_shape_simple_fn((n, d), || rand::Rng::gen_range(&mut rng, -0.1..0.1)),
        );

        let decoder = (0..config.stages)
            .map(|i| {
                let n = format!("decoder.layer{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(&mut ps, &mut rng, &format!("{n}.self_attn"), d, config.heads),
                    norm1: LayerNorm::new(&mut ps, &format!("{n}.norm1"), d),
                    cross_attn: MultiHeadAttention::new(&mut ps, &mut rng, &format!("{n}.cross_attn"), d, config.heads),
                    norm2: LayerNorm::new(&mut ps, &format!("{n}.norm2"), d),
                    ffn: mlp(&mut ps, &mut rng, &format!("{n}.ffn"), d, config.ffn_width, d),
                    norm3: LayerNorm::new(&mut ps, &format!("{n}.norm3"), d),
                }
            })
            .collect();

        let prior_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        let heads = (0..config.stages)
            .map(|i| {
                let n = format!("head{i}");
                let class = Linear::new(&mut ps, &mut rng, &format!("{n}.class"), d, config.num_classes);
                ps.get_mut(class.b).fill(prior_bias);
                let bbox = Mlp {
                    hidden: Linear::new(&mut ps, &mut rng, &format!("{n}.bbox.hidden"), d, d),
                    out: Linear::zeros(&mut ps, &format!("{n}.bbox.out"), d, 4),
                };
                PredictionHead { class, bbox }
            })
            .collect();

        let memory_positions = token_positions(&config);
        let token_centers = token_centers(&config);
        Ok(Self {
            modality,
            config,
            params: ps,
            layout: Layout { patch_embed, encoder, encoder_norm, query_pos, anchors, content, decoder, heads },
            memory_positions,
            token_centers,
        })
    }

    pub fn stages(&self) -> usize {
        self.config.stages
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let c = &self.config;
        if !image.height().is_multiple_of(c.patch) || !image.width().is_multiple_of(c.patch) {
            return Err(Error::IndivisibleImage { height: image.height(), width: image.width(), patch: c.patch });
        }
        if image.height() != c.image_height || image.width() != c.image_width || image.channels() != c.channels {
            return Err(Error::Shape(format!(
                "{} branch expects {}x{}x{}, got {}x{}x{}",
                self.modality.as_str(),
                c.image_height,
                c.image_width,
                c.channels,
                image.height(),
                image.width(),
                image.channels()
            )));
        }
        Ok(())
    }

    /// Patch embedding followed by pre-norm self-attention blocks.
    pub fn memory_on_tape(&self, tape: &mut Tape, image: &Image) -> Result<MemoryVars> {
        self.check_image(image)?;
        let ps = &self.params;
        let l = &self.layout;
        let patches = tape.constant(image.patches(self.config.patch)?);
        let pos = tape.constant(self.memory_positions.clone());
        let mut x = l.patch_embed.forward(ps, tape, patches);
        for block in &l.encoder {
            let h = block.norm1.forward(ps, tape, x);
            let qk = tape.add(h, pos);
            let a = block.attn.forward(ps, tape, qk, qk, h);
            x = tape.add(x, a);
            let h = block.norm2.forward(ps, tape, x);
            let f = block.ffn.forward(ps, tape, h);
            x = tape.add(x, f);
        }
        let features = l.encoder_norm.forward(ps, tape, x);
        let keys = tape.add(features, pos);
        Ok(MemoryVars { features, keys })
    }

    pub fn extract_memory(&self, image: &Image) -> Result<EncoderMemory> {
        let mut tape = Tape::new();
        let m = self.memory_on_tape(&mut tape, image)?;
        Ok(EncoderMemory { features: tape.value(m.features).clone(), positions: self.memory_positions.clone() })
    }

    /// Stage-0 queries and anchors. Stage-0 class logits are the constant
    /// prior, so every stage-0 score is equal.
    pub fn init_on_tape(&self, tape: &mut Tape) -> InitVars {
        let queries = self.params.var(tape, self.layout.content);
        let box_logits = self.params.var(tape, self.layout.anchors);
        let prior_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        let class_logits =
            tape.constant(Array2::from_elem((self.config.num_queries, self.config.num_classes), prior_bias));
        InitVars { queries, box_logits, class_logits }
    }

    pub fn init_queries(&self) -> (QuerySet, ProposalSet) {
        let mut tape = Tape::new();
        let init = self.init_on_tape(&mut tape);
        (QuerySet { vectors: tape.value(init.queries).clone() }, init.proposals(&tape))
    }

    /// Decoder layer `layer` (0-based). Boxes condition the queries through
    /// a sine embedding of `(cx, cy, w, h)` passed through a small MLP.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        layer: usize,
        memory: &MemoryVars,
        queries: Var,
        boxes: &Array2<f64>,
    ) -> Var {
        let ps = &self.params;
        let l = &self.layout.decoder[layer];
        let sine = tape.constant(sine_embedding(boxes, self.config.width / 4));
        let pe = self.layout.query_pos.forward(ps, tape, sine);

        let x0 = tape.add(queries, pe);
        let a = l.self_attn.forward(ps, tape, x0, x0, x0);
        let x = tape.add(x0, a);
        let x = l.norm1.forward(ps, tape, x);

        let q = tape.add(x, pe);
        let bias = (self.config.spatial_prior > 0.0).then(|| {
            let c = &self.config;
            let cell = (c.patch as f64 / c.image_width as f64, c.patch as f64 / c.image_height as f64);
            spatial_bias(boxes, &self.token_centers, c.spatial_prior, cell)
        });
        let a = l.cross_attn.forward_with_bias(ps, tape, q, memory.keys, memory.keys, bias.as_ref());
        let x2 = tape.add(x, a);
        let x = l.norm2.forward(ps, tape, x2);

        let f = l.ffn.forward(ps, tape, x);
        let x3 = tape.add(x, f);
        l.norm3.forward(ps, tape, x3)
    }

    /// Head `stage` (0-based): class logits and refined boxes
    /// `sigmoid(prev_box_logits + delta)`.
    pub fn head_on_tape(&self, tape: &mut Tape, stage: usize, queries: Var, prev_box_logits: Var) -> StageVars {
        let ps = &self.params;
        let h = &self.layout.heads[stage];
        let logits = h.class.forward(ps, tape, queries);
        let delta = h.bbox.forward(ps, tape, queries);
        let z = tape.add(prev_box_logits, delta);
        let boxes = tape.sigmoid(z);
        StageVars { queries, logits, boxes }
    }

    /// Runs all decoder stages without any fusion.
    pub fn forward_on_tape(&self, tape: &mut Tape, image: &Image) -> Result<Vec<StageVars>> {
        let memory = self.memory_on_tape(tape, image)?;
        Ok(self.decode_all_on_tape(tape, &memory))
    }

    /// Memory values as tape constants; gradients stop at the encoder.
    pub fn memory_constants(&self, tape: &mut Tape, memory: &EncoderMemory) -> MemoryVars {
        let features = tape.constant(memory.features.clone());
        let keys = tape.constant(&memory.features + &memory.positions);
        MemoryVars { features, keys }
    }

    /// Decoder stages and heads over an already computed memory.
    pub fn decode_all_on_tape(&self, tape: &mut Tape, memory: &MemoryVars) -> Vec<StageVars> {
        let memory = *memory;
        let init = self.init_on_tape(tape);
        let mut queries = init.queries;
        let mut box_logits = init.box_logits;
        let anchors = tape.value(init.box_logits).mapv(sigmoid);
        let mut boxes = tape.stop_gradient(anchors);
        let mut stages = Vec::with_capacity(self.config.stages);
        for i in 0..self.config.stages {
            let q = self.decode_on_tape(tape, i, &memory, queries, &boxes);
            let stage = self.head_on_tape(tape, i, q, box_logits);
            boxes = tape.stop_gradient(tape.value(stage.boxes).clone());
            box_logits = tape.constant(boxes.mapv(inverse_sigmoid));
            queries = stage.queries;
            stages.push(stage);
        }
        stages
    }

    pub fn forward_single(&self, image: &Image) -> Result<Vec<(QuerySet, ProposalSet)>> {
        let mut tape = Tape::new();
        let stages = self.forward_on_tape(&mut tape, image)?;
        Ok(stages.iter().map(|s| (s.queries(&tape), s.proposals(&tape))).collect())
    }

    /// Value-level decoder layer, for inspection and tests.
    pub fn decode_layer(&self, layer: usize, memory: &EncoderMemory, queries: &QuerySet, proposals: &ProposalSet) -> QuerySet {
        let mut tape = Tape::new();
        let mem = self.memory_constants(&mut tape, memory);
        let q = tape.constant(queries.vectors.clone());
        let out = self.decode_on_tape(&mut tape, layer, &mem, q, &proposals.boxes);
        QuerySet { vectors: tape.value(out).clone() }
    }

    /// Value-level prediction head.
    pub fn predict_head(&self, stage: usize, queries: &QuerySet, previous: &ProposalSet) -> ProposalSet {
        let mut tape = Tape::new();
        let q = tape.constant(queries.vectors.clone());
        let prev = tape.constant(previous.boxes.mapv(inverse_sigmoid));
        self.head_on_tape(&mut tape, stage, q, prev).proposals(&tape)
    }

    /// Replaces every parameter value with the one stored under the same name
    /// in `other`. Fails if the sets do not have identical names and shapes.
    pub fn load_params_from(&mut self, other: &ParamSet) -> Result<()> {
        self.params.assign_from(other)
    }

    /// Layer handle of a head's box-delta output, for tests.
    pub fn head_box_out(&self, stage: usize) -> Linear {
        self.layout.heads[stage].bbox.out
    }

    pub fn head_class(&self, stage: usize) -> Linear {
        self.layout.heads[stage].class
    }
}
