//! Two detector branches coupled only through per-stage query fusion.

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::detector::{inverse_sigmoid, BranchDetector, DetectorConfig, MemoryVars, Modality, ProposalSet, QuerySet, StageVars};
use crate::error::{Error, Result};
use crate::fusion::{fuse_on_tape, AdapterBank, BranchVars, FusionConfig, PostProcess, SelectionIndex};
use crate::geometry::{argsort_desc, nms, BBox};
use crate::raster::Image;

/// One final detection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
    pub origin: Modality,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdqfModel {
    pub rgb: BranchDetector,
    pub tir: BranchDetector,
    pub adapters: AdapterBank,
    pub fusion: FusionConfig,
}

/// Tape-level outputs of a fused forward pass.
pub struct FusedTape {
    pub rgb: Vec<StageVars>,
    pub tir: Vec<StageVars>,
    /// Shared proposals and selection consumed by stage `i` of both branches.
    pub shared: Vec<(ProposalSet, SelectionIndex)>,
}

/// Value-level outputs of a fused forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedOutput {
    pub rgb: Vec<(QuerySet, ProposalSet)>,
    pub tir: Vec<(QuerySet, ProposalSet)>,
    pub shared: Vec<(ProposalSet, SelectionIndex)>,
}

impl FusedOutput {
    pub fn final_proposals(&self) -> (&ProposalSet, &ProposalSet) {
        (&self.rgb.last().expect("stages").1, &self.tir.last().expect("stages").1)
    }
}

impl MdqfModel {
    pub fn new(rgb: BranchDetector, tir: BranchDetector, fusion: FusionConfig, seed: u64) -> Result<Self> {
        if rgb.modality != Modality::Rgb || tir.modality != Modality::Tir {
            return Err(Error::Config("branches must be tagged rgb and tir".into()));
        }
        if rgb.config.stages != tir.config.stages
            || rgb.config.width != tir.config.width
            || rgb.config.num_queries != tir.config.num_queries
            || rgb.config.num_classes != tir.config.num_classes
        {
            return Err(Error::Config("branches disagree on stages, width, queries or classes".into()));
        }
        let max_k = 2 * rgb.config.num_queries;
        for k in [fusion.k_train, fusion.k_test] {
            if k == 0 || k > max_k {
                return Err(Error::KOutOfRange { k, max: max_k });
            }
        }
        let adapters = AdapterBank::new(
            rgb.config.stages,
            rgb.config.width,
            fusion.adapter_hidden,
            fusion.shared_adapters,
            seed,
        );
        Ok(Self { rgb, tir, adapters, fusion })
    }

    pub fn branch(&self, modality: Modality) -> &BranchDetector {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Tir => &self.tir,
        }
    }

    /// Scalar parameter count of both branches and the adapters.
    pub fn num_parameters(&self) -> usize {
        self.rgb.params.scalar_count() + self.tir.params.scalar_count() + self.adapters.params.scalar_count()
    }

    /// Swaps in a separately trained branch. Nothing else is touched.
    pub fn replace_branch(&mut self, branch: BranchDetector) -> Result<()> {
        let slot = match branch.modality {
            Modality::Rgb => &mut self.rgb,
            Modality::Tir => &mut self.tir,
        };
        let arch = |c: &DetectorConfig| DetectorConfig { seed: 0, ..c.clone() };
        if arch(&slot.config) != arch(&branch.config) {
            return Err(Error::Config(format!("{} branch configuration differs", branch.modality.as_str())));
        }
        slot.load_params_from(&branch.params)
    }

    pub fn forward_fused_on_tape(&self, tape: &mut Tape, rgb_image: &Image, tir_image: &Image, k: usize) -> Result<FusedTape> {
        let mem_r = self.rgb.memory_on_tape(tape, rgb_image)?;
        let mem_t = self.tir.memory_on_tape(tape, tir_image)?;
        self.decode_fused_on_tape(tape, &mem_r, &mem_t, k)
    }

    /// Fused decoding over already computed branch memories.
    pub fn decode_fused_on_tape(&self, tape: &mut Tape, mem_r: &MemoryVars, mem_t: &MemoryVars, k: usize) -> Result<FusedTape> {
        let (mem_r, mem_t) = (*mem_r, *mem_t);
        let init_r = self.rgb.init_on_tape(tape);
        let init_t = self.tir.init_on_tape(tape);
        let mut props_r = stopped(tape, init_r.proposals(tape));
        let mut props_t = stopped(tape, init_t.proposals(tape));
        let mut vars_r = BranchVars { queries: init_r.queries, box_logits: init_r.box_logits };
        let mut vars_t = BranchVars { queries: init_t.queries, box_logits: init_t.box_logits };

        let stages = self.rgb.stages();
        let mut out = FusedTape { rgb: Vec::with_capacity(stages), tir: Vec::with_capacity(stages), shared: Vec::new() };
        for i in 0..stages {
            let fused = fuse_on_tape(&self.adapters, tape, i, (&props_r, vars_r), (&props_t, vars_t), k)?;
            let boxes = &fused.proposals.boxes;
            let q_r = self.rgb.decode_on_tape(tape, i, &mem_r, fused.queries_rgb, boxes);
            let s_r = self.rgb.head_on_tape(tape, i, q_r, fused.box_logits);
            let q_t = self.tir.decode_on_tape(tape, i, &mem_t, fused.queries_tir, boxes);
            let s_t = self.tir.head_on_tape(tape, i, q_t, fused.box_logits);

            props_r = stopped(tape, s_r.proposals(tape));
            props_t = stopped(tape, s_t.proposals(tape));
            let detached_r = tape.constant(props_r.boxes.mapv(inverse_sigmoid));
            let detached_t = tape.constant(props_t.boxes.mapv(inverse_sigmoid));
            vars_r = BranchVars { queries: s_r.queries, box_logits: detached_r };
            vars_t = BranchVars { queries: s_t.queries, box_logits: detached_t };
            out.rgb.push(s_r);
            out.tir.push(s_t);
            out.shared.push((fused.proposals, fused.selection));
        }
        Ok(out)
    }

    /// Fused inference with `k = k_test`.
    pub fn forward_fused(&self, rgb_image: &Image, tir_image: &Image) -> Result<FusedOutput> {
        self.forward_fused_with_k(rgb_image, tir_image, self.fusion.k_test)
    }

    pub fn forward_fused_with_k(&self, rgb_image: &Image, tir_image: &Image, k: usize) -> Result<FusedOutput> {
        let mut tape = Tape::new();
        let t = self.forward_fused_on_tape(&mut tape, rgb_image, tir_image, k)?;
        let values = |stages: &[StageVars]| stages.iter().map(|s| (s.queries(&tape), s.proposals(&tape))).collect();
        Ok(FusedOutput { rgb: values(&t.rgb), tir: values(&t.tir), shared: t.shared })
    }

    /// One branch alone; fusion and adapters are bypassed.
    pub fn forward_missing(&self, modality: Modality, image: &Image) -> Result<Vec<(QuerySet, ProposalSet)>> {
        self.branch(modality).forward_single(image)
    }

    /// Fused inference followed by the configured post-processing.
    pub fn detect(&self, rgb_image: &Image, tir_image: &Image) -> Result<Vec<Detection>> {
        let out = self.forward_fused(rgb_image, tir_image)?;
        let (r, t) = out.final_proposals();
        Ok(postprocess(&[(r, Modality::Rgb), (t, Modality::Tir)], self.fusion.postprocess, self.fusion.score_floor))
    }

    /// Single-branch inference followed by the configured post-processing.
    pub fn detect_missing(&self, modality: Modality, image: &Image) -> Result<Vec<Detection>> {
        let stages = self.forward_missing(modality, image)?;
        let last = &stages.last().expect("stages").1;
        Ok(postprocess(&[(last, modality)], self.fusion.postprocess, self.fusion.score_floor))
    }
}

/// Boxes leave the graph between stages; scores only drive selection.
fn stopped(tape: &mut Tape, p: ProposalSet) -> ProposalSet {
    let boxes = tape.stop_gradient(p.boxes);
    ProposalSet { boxes, ..p }
}

/// Unions proposal sets (tagged with their branch), drops scores below
/// `score_floor`, then applies class-aware NMS or plain top-`n`.
pub fn postprocess(sets: &[(&ProposalSet, Modality)], mode: PostProcess, score_floor: f64) -> Vec<Detection> {
    let candidates: Vec<Detection> = sets
        .iter()
        .flat_map(|(p, origin)| {
            (0..p.len()).map(move |i| Detection {
                bbox: BBox::new(p.boxes[[i, 0]], p.boxes[[i, 1]], p.boxes[[i, 2]], p.boxes[[i, 3]]),
                class_id: p.best_class(i),
                score: p.scores[i],
                origin: *origin,
            })
        })
        .filter(|d| d.score >= score_floor)
        .collect();
    let keep = match mode {
        PostProcess::Nms { iou_threshold } => {
            let dets: Vec<_> = candidates.iter().map(|d| (d.bbox, d.class_id, d.score)).collect();
            nms(&dets, iou_threshold, true)
        }
        PostProcess::Topk { n } => {
            let scores: Vec<f64> = candidates.iter().map(|d| d.score).collect();
            let mut order = argsort_desc(&scores);
            order.truncate(n);
            order
        }
    };
    keep.into_iter().map(|i| candidates[i]).collect()
}

/// Image-level fusion baseline: one detector on the pixel-wise mean image.
pub fn baseline_image_fusion(
    detector: &BranchDetector,
    rgb_image: &Image,
    tir_image: &Image,
    mode: PostProcess,
    score_floor: f64,
) -> Result<Vec<Detection>> {
    let mean = Image::average(rgb_image, tir_image)?;
    let stages = detector.forward_single(&mean.with_channels(detector.config.channels))?;
    let last = &stages.last().expect("stages").1;
    Ok(postprocess(&[(last, detector.modality)], mode, score_floor))
}

/// Box-level fusion baseline: two independent detectors, union, NMS.
pub fn baseline_box_fusion(
    rgb_detector: &BranchDetector,
    tir_detector: &BranchDetector,
    rgb_image: &Image,
    tir_image: &Image,
    iou_threshold: f64,
    score_floor: f64,
) -> Result<Vec<Detection>> {
    let r = rgb_detector.forward_single(rgb_image)?;
    let t = tir_detector.forward_single(tir_image)?;
    let (r, t) = (&r.last().expect("stages").1, &t.last().expect("stages").1);
    Ok(postprocess(&[(r, Modality::Rgb), (t, Modality::Tir)], PostProcess::Nms { iou_threshold }, score_floor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config(channels: usize) -> DetectorConfig {
        DetectorConfig { width: 16, heads: 2, ffn_width: 32, num_queries: 6, channels, ..DetectorConfig::default() }
    }

    fn model(k: usize) -> MdqfModel {
        let rgb = BranchDetector::new(Modality::Rgb, small_config(3)).unwrap();
        let tir = BranchDetector::new(Modality::Tir, small_config(1)).unwrap();
        let mut fusion = FusionConfig::for_queries(6, 16);
        fusion.k_test = k;
        fusion.k_train = k;
        MdqfModel::new(rgb, tir, fusion, 1).unwrap()
    }

    fn noise(seed: u64, c: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array3::from_shape_simple_fn((64, 64, c), || rng.gen_range(0.0..1.0)))
    }

    fn proposal_set(rows: &[([f64; 4], usize, f64)]) -> ProposalSet {
        let boxes = Array2::from_shape_fn((rows.len(), 4), |(i, j)| rows[i].0[j]);
        let logits = Array2::from_shape_fn((rows.len(), 2), |(i, c)| {
            if c == rows[i].1 {
                (rows[i].2 / (1.0 - rows[i].2)).ln()
            } else {
                -20.0
            }
        });
        ProposalSet::new(boxes, logits)
    }

    #[test]
    fn fused_shapes_and_determinism() {
        let m = model(7);
        let (r, t) = (noise(1, 3), noise(2, 1));
        let out = m.forward_fused(&r, &t).unwrap();
        assert_eq!(out.rgb.len(), 6);
        for ((qr, pr), (qt, pt)) in out.rgb.iter().zip(&out.tir) {
            assert_eq!(qr.vectors.dim(), (7, 16));
            assert_eq!(qt.vectors.dim(), (7, 16));
            assert_eq!((pr.len(), pt.len()), (7, 7));
        }
        assert_eq!(out.shared.len(), 6);
        assert_eq!(out, m.forward_fused(&r, &t).unwrap());
    }

    #[test]
    fn missing_modality_matches_single_branch() {
        let m = model(12);
        let img = noise(3, 1);
        let missing = m.forward_missing(Modality::Tir, &img).unwrap();
        assert_eq!(missing, m.tir.forward_single(&img).unwrap());
        assert_eq!(missing.last().unwrap().1.len(), 6);
    }

    #[test]
    fn symmetric_branches_give_identical_outputs() {
        let tir = BranchDetector::new(Modality::Tir, small_config(1)).unwrap();
        let mut rgb = BranchDetector::new(Modality::Rgb, small_config(1)).unwrap();
        rgb.load_params_from(&tir.params).unwrap();
        let m = MdqfModel::new(rgb, tir, FusionConfig::for_queries(6, 16), 0).unwrap();
        let img = noise(4, 1);
        let out = m.forward_fused(&img, &img).unwrap();
        for (a, b) in out.rgb.iter().zip(&out.tir) {
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn replacing_a_branch_leaves_the_rest_alone() {
        let mut m = model(12);
        let before = m.clone();
        let fresh = BranchDetector::new(Modality::Rgb, DetectorConfig { seed: 99, ..small_config(3) }).unwrap();
        m.replace_branch(fresh.clone()).unwrap();
        assert_eq!(m.tir, before.tir);
        assert_eq!(m.adapters, before.adapters);
        assert_eq!(m.rgb.params, fresh.params);
        let wrong = BranchDetector::new(Modality::Rgb, DetectorConfig::default()).unwrap();
        assert!(m.replace_branch(wrong).is_err());
    }

    #[test]
    fn k_outside_union_is_rejected() {
        let rgb = BranchDetector::new(Modality::Rgb, small_config(3)).unwrap();
        let tir = BranchDetector::new(Modality::Tir, small_config(1)).unwrap();
        let mut fusion = FusionConfig::for_queries(6, 16);
        fusion.k_test = 13;
        assert!(matches!(MdqfModel::new(rgb, tir, fusion, 0), Err(Error::KOutOfRange { .. })));
    }

    #[test]
    fn postprocess_collapses_cross_branch_duplicates() {
        let a = proposal_set(&[([0.5, 0.5, 0.2, 0.2], 0, 0.9)]);
        let b = proposal_set(&[([0.5, 0.5, 0.2, 0.19], 0, 0.7)]);
        let nms_mode = PostProcess::Nms { iou_threshold: 0.5 };
        let dets = postprocess(&[(&a, Modality::Rgb), (&b, Modality::Tir)], nms_mode, 0.05);
        assert_eq!(dets.len(), 1);
        assert!((dets[0].score - 0.9).abs() < 1e-12);
        assert_eq!(dets[0].origin, Modality::Rgb);
        let empty = proposal_set(&[]);
        assert!(postprocess(&[(&empty, Modality::Rgb)], nms_mode, 0.05).is_empty());
    }

    #[test]
    fn topk_keeps_exactly_n() {
        let rows: Vec<_> = (0..1800).map(|i| ([0.5, 0.5, 0.1, 0.1], i % 2, 0.1 + 0.8 * (i as f64 / 1800.0))).collect();
        let (a, b) = rows.split_at(900);
        let (a, b) = (proposal_set(a), proposal_set(b));
        let dets = postprocess(&[(&a, Modality::Rgb), (&b, Modality::Tir)], PostProcess::Topk { n: 300 }, 0.05);
        assert_eq!(dets.len(), 300);
        assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn score_floor_drops_weak_entries() {
        let a = proposal_set(&[([0.2, 0.2, 0.1, 0.1], 0, 0.04), ([0.7, 0.7, 0.1, 0.1], 1, 0.3)]);
        let dets = postprocess(&[(&a, Modality::Rgb)], PostProcess::default(), 0.05);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].class_id, 1);
    }

    #[test]
    fn image_fusion_of_identical_images_matches_single_image() {
        let m = model(12);
        let img = noise(5, 3);
        let mode = PostProcess::default();
        let fused = baseline_image_fusion(&m.rgb, &img, &img, mode, 0.0).unwrap();
        let direct = m.rgb.forward_single(&img).unwrap();
        let direct = postprocess(&[(&direct.last().unwrap().1, Modality::Rgb)], mode, 0.0);
        assert_eq!(fused, direct);
        assert!(baseline_image_fusion(&m.rgb, &img, &Image::filled(32, 32, 1, 0.0), mode, 0.0).is_err());
    }

    #[test]
    fn box_fusion_is_postprocess_of_two_single_runs() {
        let m = model(12);
        let (r, t) = (noise(6, 3), noise(7, 1));
        let got = baseline_box_fusion(&m.rgb, &m.tir, &r, &t, 0.5, 0.0).unwrap();
        let rr = m.rgb.forward_single(&r).unwrap();
        let tt = m.tir.forward_single(&t).unwrap();
        let expect = postprocess(
            &[(&rr.last().unwrap().1, Modality::Rgb), (&tt.last().unwrap().1, Modality::Tir)],
            PostProcess::Nms { iou_threshold: 0.5 },
            0.0,
        );
        assert_eq!(got, expect);
    }
}
