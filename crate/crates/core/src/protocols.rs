//! End-to-end experiments: training pipeline, fusion comparison, degradation
//! robustness, k ablation and decoupled branch updates, reported as tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coco::write_png;
use crate::datagen::{degrade_contrast, generate_dataset, PairedSample, Sample, SceneSpec};
use crate::detector::{BranchDetector, DetectorConfig, Modality};
use crate::error::{Error, Result};
use crate::eval::{evaluate, relative_drop, EvalResult};
use crate::fusion::{FusionConfig, PostProcess};
use crate::matching::GroundTruth;
use crate::model::{baseline_box_fusion, baseline_image_fusion, postprocess, Detection, MdqfModel};
use crate::raster::Image;
use crate::train::{separate_to_joint_loop, single_modality, train_joint, train_separate, TrainConfig, TrainReport};

/// Everything that determines a desk-scale run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SceneSpec,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub rgb: DetectorConfig,
    pub tir: DetectorConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    /// Seeds the adapter initialization.
    pub model_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let rgb = DetectorConfig::for_modality(Modality::Rgb);
        let tir = DetectorConfig { seed: 1, ..DetectorConfig::for_modality(Modality::Tir) };
        let fusion = FusionConfig::for_queries(rgb.num_queries, rgb.width);
        Self {
            data: SceneSpec { seed: 1, ..SceneSpec::default() },
            train_pairs: 200,
            test_pairs: 50,
            rgb,
            tir,
            fusion,
            // Branches start from scratch rather than pretrained backbones and get a few
            // thousand steps, so separate training runs at a larger lr and longer than the
            // reference schedule; joint fine-tuning keeps the reference lr.
            train: TrainConfig {
                separate_epochs: 24,
                joint_epochs: 8,
                lr: 1e-3,
                joint_lr: Some(1e-4),
                ..TrainConfig::default()
            },
            model_seed: 2,
        }
    }
}

impl ExperimentConfig {
    /// Applies one seed to data, initialization and training order.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.rgb.seed = seed.wrapping_mul(4);
        self.tir.seed = seed.wrapping_mul(4).wrapping_add(1);
        self.model_seed = seed.wrapping_mul(4).wrapping_add(2);
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.rgb.validate()?;
        self.tir.validate()?;
        self.train.validate()?;
        if self.train_pairs == 0 || self.test_pairs == 0 {
            return Err(Error::EmptyDataset);
        }
        if self.rgb.image_height != self.data.height || self.rgb.image_width != self.data.width {
            return Err(Error::Config("detector input size differs from the generated images".into()));
        }
        Ok(())
    }

    /// Train and test pairs; test ids follow the train ids, so the sets never share a scene.
    pub fn datasets(&self) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
        let train = generate_dataset(&self.data, self.train_pairs, 0)?;
        let test = generate_dataset(&self.data, self.test_pairs, self.train_pairs as u64)?;
        Ok((train, test))
    }
}

/// Independently trained single-modality detectors used for comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct Baselines {
    /// The branches as they were right after separate training.
    pub rgb: BranchDetector,
    pub tir: BranchDetector,
    /// A detector trained on pixel-wise mean images.
    pub image: Option<BranchDetector>,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub model: MdqfModel,
    pub baselines: Baselines,
    pub rgb_log: TrainReport,
    pub tir_log: TrainReport,
    pub joint_log: TrainReport,
}

/// Separate training of both branches followed by joint training.
pub fn train_pipeline(config: &ExperimentConfig, train: &[PairedSample]) -> Result<Pipeline> {
    config.validate()?;
    let visible = config.train.visible_only_labels;
    let mut rgb = BranchDetector::new(Modality::Rgb, config.rgb.clone())?;
    let rgb_log = train_separate(&mut rgb, &single_modality(train, Modality::Rgb, visible), &config.train)?;
    let mut tir = BranchDetector::new(Modality::Tir, config.tir.clone())?;
    let tir_log = train_separate(&mut tir, &single_modality(train, Modality::Tir, visible), &config.train)?;
    let baselines = Baselines { rgb: rgb.clone(), tir: tir.clone(), image: None };
    let mut model = MdqfModel::new(rgb, tir, config.fusion.clone(), config.model_seed)?;
    let joint_log = train_joint(&mut model, train, &config.train)?;
    Ok(Pipeline { model, baselines, rgb_log, tir_log, joint_log })
}

/// Mean images labelled with every object.
pub fn averaged(data: &[PairedSample]) -> Result<Vec<Sample>> {
    data.iter()
        .map(|s| {
            Ok(Sample { id: s.id, image: Image::average(&s.rgb, &s.tir)?, annotations: s.annotations.clone() })
        })
        .collect()
}

/// The image-level fusion baseline detector: one RGB-shaped branch trained
/// on mean images for the separate-phase schedule.
pub fn train_image_fusion(config: &ExperimentConfig, train: &[PairedSample]) -> Result<BranchDetector> {
    let mut d = BranchDetector::new(Modality::Rgb, config.rgb.clone())?;
    train_separate(&mut d, &averaged(train)?, &config.train)?;
    Ok(d)
}

fn ground_truth(test: &[PairedSample]) -> Vec<Vec<GroundTruth>> {
    test.iter().map(PairedSample::ground_truth).collect()
}

fn score(dets: &[Vec<Detection>], test: &[PairedSample], num_classes: usize) -> Result<EvalResult> {
    evaluate(dets, &ground_truth(test), num_classes)
}

fn per_image<F>(test: &[PairedSample], f: F) -> Result<Vec<Vec<Detection>>>
where
    F: Fn(&PairedSample) -> Result<Vec<Detection>>,
{
    test.iter().map(f).collect()
}

/// A cell of a report table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(title: &str, columns: &[&str]) -> Self {
        Self { title: title.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Full-precision values.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let write = |w: &mut csv::Writer<Vec<u8>>| -> csv::Result<()> {
            w.write_record(&self.columns)?;
            for row in &self.rows {
                w.write_record(row.iter().map(|c| match c {
                    Cell::Num(v) => v.to_string(),
                    Cell::Text(t) => t.clone(),
                }))?;
            }
            w.flush()?;
            Ok(())
        };
        write(&mut w).expect("writing to memory");
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 cells")
    }

    /// Values rounded to four decimals.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("### {}\n\n| {} |\n|", self.title, self.columns.join(" | "));
        out += &"---|".repeat(self.columns.len());
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Num(v) if v.fract() == 0.0 && v.abs() < 1e15 => format!("{v}"),
                    Cell::Num(v) => format!("{v:.4}"),
                    Cell::Text(t) => t.clone(),
                })
                .collect();
            let _ = writeln!(out, "| {} |", cells.join(" | "));
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.md` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.md")), self.to_markdown())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    /// Scalar parameters used at inference.
    pub parameters: usize,
    pub result: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<MethodScore>,
}

impl Comparison {
    pub fn get(&self, method: &str) -> Option<&EvalResult> {
        self.rows.iter().find(|r| r.method == method).map(|r| &r.result)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new("Fusion comparison", &["method", "parameters", "mAP", "mAP50", "detections", "ground_truth"]);
        for r in &self.rows {
            t.push(vec![
                r.method.as_str().into(),
                r.parameters.into(),
                r.result.map.into(),
                r.result.map50.into(),
                r.result.num_detections.into(),
                r.result.num_ground_truth.into(),
            ]);
        }
        t
    }

    /// Per-class precision at each of the 101 recall points, IoU 0.5.
    pub fn pr_curves(&self) -> Table {
        let mut t = Table::new("Precision-recall at IoU 0.5", &["method", "class", "recall", "precision"]);
        for r in &self.rows {
            for (c, curve) in r.result.pr_curve50.iter().enumerate() {
                for (i, p) in curve.iter().enumerate() {
                    t.push(vec![r.method.as_str().into(), c.into(), (i as f64 / 100.0).into(), (*p).into()]);
                }
            }
        }
        t
    }
}

pub const RGB_ONLY: &str = "rgb-branch";
pub const TIR_ONLY: &str = "tir-branch";
pub const FUSED: &str = "mdqf";
pub const BOX_FUSION: &str = "box-fusion";
pub const IMAGE_FUSION: &str = "image-fusion";

/// Each branch of `model` alone, the fused model, and whichever baselines are given.
pub fn run_fusion_comparison(
    model: &MdqfModel,
    baselines: Option<&Baselines>,
    test: &[PairedSample],
) -> Result<Comparison> {
    let nc = model.rgb.config.num_classes;
    let mut rows = Vec::new();
    for (name, m) in [(RGB_ONLY, Modality::Rgb), (TIR_ONLY, Modality::Tir)] {
        let d = per_image(test, |s| model.detect_missing(m, s.image(m)))?;
        let parameters = model.branch(m).params.scalar_count();
        rows.push(MethodScore { method: name.into(), parameters, result: score(&d, test, nc)? });
    }
    let d = per_image(test, |s| model.detect(&s.rgb, &s.tir))?;
    rows.push(MethodScore { method: FUSED.into(), parameters: model.num_parameters(), result: score(&d, test, nc)? });
    if let Some(b) = baselines {
        let f = &model.fusion;
        let iou = match f.postprocess {
            PostProcess::Nms { iou_threshold } => iou_threshold,
            PostProcess::Topk { .. } => 0.5,
        };
        let d = per_image(test, |s| baseline_box_fusion(&b.rgb, &b.tir, &s.rgb, &s.tir, iou, f.score_floor))?;
        let parameters = b.rgb.params.scalar_count() + b.tir.params.scalar_count();
        rows.push(MethodScore { method: BOX_FUSION.into(), parameters, result: score(&d, test, nc)? });
        if let Some(img) = &b.image {
            let d = per_image(test, |s| baseline_image_fusion(img, &s.rgb, &s.tir, f.postprocess, f.score_floor))?;
            let parameters = img.params.scalar_count();
            rows.push(MethodScore { method: IMAGE_FUSION.into(), parameters, result: score(&d, test, nc)? });
        }
    }
    Ok(Comparison { rows })
}

/// Degradation applied to one modality of every test pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub modality: Modality,
    pub factor: f64,
}

impl Degradation {
    pub fn label(&self) -> String {
        format!("{}-degraded", self.modality.as_str())
    }

    pub fn apply(&self, test: &[PairedSample]) -> Result<Vec<PairedSample>> {
        test.iter()
            .map(|s| {
                let mut s = s.clone();
                match self.modality {
                    Modality::Rgb => s.rgb = degrade_contrast(&s.rgb, self.factor)?,
                    Modality::Tir => s.tir = degrade_contrast(&s.tir, self.factor)?,
                }
                Ok(s)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    /// `clean` or `<modality>-degraded`.
    pub scenario: String,
    pub factor: f64,
    /// `mdqf` (fused path on the degraded pair), `mdqf-missing` (surviving
    /// branch alone), or a baseline name.
    pub method: String,
    pub map50: f64,
    /// Relative to the same method on clean data; the missing path is
    /// compared with the clean fused model.
    pub relative_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Robustness {
    pub rows: Vec<RobustnessRow>,
}

pub const MISSING: &str = "mdqf-missing";

impl Robustness {
    pub fn get(&self, scenario: &str, method: &str) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.method == method)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new("Degradation robustness", &["scenario", "factor", "method", "mAP50", "relative_drop_pct"]);
        for r in &self.rows {
            t.push(vec![
                r.scenario.as_str().into(),
                r.factor.into(),
                r.method.as_str().into(),
                r.map50.into(),
                (100.0 * r.relative_drop).into(),
            ]);
        }
        t
    }
}

/// The fused path and the missing-modality path under each degradation,
/// with the baselines evaluated on the same degraded pairs.
pub fn run_robustness(
    model: &MdqfModel,
    baselines: Option<&Baselines>,
    test: &[PairedSample],
    degradations: &[Degradation],
) -> Result<Robustness> {
    let clean = run_fusion_comparison(model, baselines, test)?;
    let fused_clean = clean.get(FUSED).expect("fused row").map50;
    let nc = model.rgb.config.num_classes;
    let mut rows: Vec<RobustnessRow> = clean
        .rows
        .iter()
        .filter(|r| ![RGB_ONLY, TIR_ONLY].contains(&r.method.as_str()))
        .map(|r| RobustnessRow {
            scenario: "clean".into(),
            factor: 1.0,
            method: r.method.clone(),
            map50: r.result.map50,
            relative_drop: 0.0,
        })
        .collect();
    for deg in degradations {
        let degraded = deg.apply(test)?;
        let mut scores = run_fusion_comparison(model, baselines, &degraded)?;
        // the missing path ignores the degraded image entirely
        let survivor = deg.modality.other();
        let d = per_image(test, |s| model.detect_missing(survivor, s.image(survivor)))?;
        let parameters = model.branch(survivor).params.scalar_count();
        scores.rows.push(MethodScore { method: MISSING.into(), parameters, result: score(&d, test, nc)? });
        for r in scores.rows {
            if [RGB_ONLY, TIR_ONLY].contains(&r.method.as_str()) {
                continue;
            }
            let reference = clean.get(&r.method).map_or(fused_clean, |c| c.map50);
            rows.push(RobustnessRow {
                scenario: deg.label(),
                factor: deg.factor,
                relative_drop: relative_drop(reference, r.result.map50),
                method: r.method,
                map50: r.result.map50,
            });
        }
    }
    Ok(Robustness { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k1: usize,
    pub k2: usize,
    pub postprocess: PostProcess,
    pub map: f64,
    pub map50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    pub fn table(&self) -> Table {
        let mut t = Table::new("k ablation", &["k1", "k2", "postprocess", "mAP", "mAP50"]);
        for r in &self.rows {
            let pp = match r.postprocess {
                PostProcess::Nms { iou_threshold } => format!("nms@{iou_threshold}"),
                PostProcess::Topk { n } => format!("top-{n}"),
            };
            t.push(vec![r.k1.into(), r.k2.into(), pp.into(), r.map.into(), r.map50.into()]);
        }
        t
    }
}

/// Default plain top-n cut: a sixth of the proposal union.
pub fn default_topk(num_queries: usize) -> usize {
    (2 * num_queries).div_ceil(6)
}

/// Re-evaluates each model (trained with its own `k_train`) at every
/// inference `k` in `k2s`, plus one plain top-`topk_n` row at its own `k_test`.
pub fn run_k_ablation(models: &[&MdqfModel], test: &[PairedSample], k2s: &[usize], topk_n: usize) -> Result<Ablation> {
    let mut rows = Vec::new();
    for model in models {
        let nc = model.rgb.config.num_classes;
        let f = &model.fusion;
        let mut eval = |k2: usize, mode: PostProcess| -> Result<()> {
            let d = per_image(test, |s| {
                let out = model.forward_fused_with_k(&s.rgb, &s.tir, k2)?;
                let (r, t) = out.final_proposals();
                Ok(postprocess(&[(r, Modality::Rgb), (t, Modality::Tir)], mode, f.score_floor))
            })?;
            let e = score(&d, test, nc)?;
            rows.push(AblationRow { k1: f.k_train, k2, postprocess: mode, map: e.map, map50: e.map50 });
            Ok(())
        };
        for &k2 in k2s {
            eval(k2, f.postprocess)?;
        }
        eval(f.k_test, PostProcess::Topk { n: topk_n })?;
    }
    Ok(Ablation { rows })
}

/// Which branches are replaced by independently trained ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Swap {
    None,
    Rgb,
    Tir,
    Both,
}

impl Swap {
    pub fn as_str(self) -> &'static str {
        match self {
            Swap::None => "none",
            Swap::Rgb => "rgb",
            Swap::Tir => "tir",
            Swap::Both => "both",
        }
    }

    fn swaps(self, m: Modality) -> bool {
        matches!((self, m), (Swap::Both, _) | (Swap::Rgb, Modality::Rgb) | (Swap::Tir, Modality::Tir))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoupledRow {
    pub swap: Swap,
    pub map: f64,
    pub map50: f64,
    pub delta_map: f64,
    pub delta_map50: f64,
    /// The swap left every other component bit-for-bit unchanged.
    pub untouched_bitwise: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoupled {
    pub initial: EvalResult,
    pub rows: Vec<DecoupledRow>,
}

impl Decoupled {
    pub fn get(&self, swap: Swap) -> Option<&DecoupledRow> {
        self.rows.iter().find(|r| r.swap == swap)
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(
            "Decoupled branch update",
            &["swap", "mAP", "mAP50", "delta_mAP", "delta_mAP50", "untouched_bitwise"],
        );
        t.push(vec!["initial".into(), self.initial.map.into(), self.initial.map50.into(), 0.0.into(), 0.0.into(), "-".into()]);
        for r in &self.rows {
            t.push(vec![
                r.swap.as_str().into(),
                r.map.into(),
                r.map50.into(),
                r.delta_map.into(),
                r.delta_map50.into(),
                r.untouched_bitwise.to_string().into(),
            ]);
        }
        t
    }
}

/// For each variant: swap the given independently trained branches into a
/// copy of `initial`, check the swap touched nothing else, then fine-tune
/// jointly on `paired` (a one-round loop with no separate phase). `Swap::None`
/// skips fine-tuning and reproduces the initial model.
pub fn run_decoupled_update(
    initial: &MdqfModel,
    fresh_rgb: &BranchDetector,
    fresh_tir: &BranchDetector,
    paired: &[PairedSample],
    test: &[PairedSample],
    variants: &[Swap],
    config: &TrainConfig,
) -> Result<Decoupled> {
    let nc = initial.rgb.config.num_classes;
    let eval = |m: &MdqfModel| -> Result<EvalResult> { score(&per_image(test, |s| m.detect(&s.rgb, &s.tir))?, test, nc) };
    let initial_score = eval(initial)?;
    let mut rows = Vec::new();
    for &swap in variants {
        let mut model = initial.clone();
        for (m, fresh) in [(Modality::Rgb, fresh_rgb), (Modality::Tir, fresh_tir)] {
            if swap.swaps(m) {
                model.replace_branch(fresh.clone())?;
            }
        }
        let untouched_bitwise = model.adapters == initial.adapters
            && model.fusion == initial.fusion
            && [Modality::Rgb, Modality::Tir]
                .into_iter()
                .filter(|&m| !swap.swaps(m))
                .all(|m| model.branch(m) == initial.branch(m));
        if swap != Swap::None {
            separate_to_joint_loop(&mut model, &[], &[], paired, 1, config)?;
        }
        let e = eval(&model)?;
        rows.push(DecoupledRow {
            swap,
            map: e.map,
            map50: e.map50,
            delta_map: e.map - initial_score.map,
            delta_map50: e.map50 - initial_score.map50,
            untouched_bitwise,
        });
    }
    Ok(Decoupled { initial: initial_score, rows })
}

/// Outline width in pixels.
const OUTLINE: usize = 2;

/// Draws detections over `image` (converted to RGB): red outlines for boxes
/// proposed by the RGB branch, green for the TIR branch.
pub fn render_detections(image: &Image, dets: &[Detection]) -> Image {
    let mut out = image.with_channels(3);
    let (h, w) = (out.height(), out.width());
    for d in dets {
        let color = match d.origin {
            Modality::Rgb => [1.0, 0.0, 0.0],
            Modality::Tir => [0.0, 1.0, 0.0],
        };
        let (x1, y1, x2, y2) = d.bbox.to_corners();
        let px = |v: f64, n: usize| ((v * n as f64).round().max(0.0) as usize).min(n - 1);
        let (x1, x2, y1, y2) = (px(x1, w), px(x2, w), px(y1, h), px(y2, h));
        for y in y1..=y2 {
            for x in x1..=x2 {
                let edge = x < x1 + OUTLINE || x + OUTLINE > x2 || y < y1 + OUTLINE || y + OUTLINE > y2;
                if edge {
                    for (c, v) in color.iter().enumerate() {
                        out.data[[y, x, c]] = *v;
                    }
                }
            }
        }
    }
    out
}

/// Renders fused detections for each test pair over its RGB and TIR images.
pub fn render_test_set(model: &MdqfModel, test: &[PairedSample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for s in test {
        let dets = model.detect(&s.rgb, &s.tir)?;
        for m in [Modality::Rgb, Modality::Tir] {
            let img = render_detections(s.image(m), &dets);
            write_png(&img, &dir.join(format!("{:06}_{}.png", s.id, m.as_str())))?;
        }
    }
    Ok(())
}
