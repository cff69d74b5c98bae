//! Separate and joint training, and the loop that alternates them.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamKey, Tape};
use crate::datagen::{PairedSample, Sample};
use crate::detector::{BranchDetector, EncoderMemory, Modality, FROZEN_PREFIXES};
use crate::error::{Error, Result};
use crate::loss::{branch_loss_on_tape, LossComponents};
use crate::matching::{GroundTruth, LossWeights};
use crate::model::MdqfModel;
use crate::nn::{clip_grad_norm, AdamW, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub separate_epochs: usize,
    pub joint_epochs: usize,
    pub lr: f64,
    /// Learning rate of the joint phase; `None` reuses `lr`.
    pub joint_lr: Option<f64>,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Joint gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Parameter-name prefixes held fixed during joint training.
    pub freeze: Vec<String>,
    pub loss_weights: LossWeights,
    /// Separate training sees only the labels of objects visible in its modality.
    pub visible_only_labels: bool,
    pub rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            separate_epochs: 12,
            joint_epochs: 12,
            lr: 1e-4,
            joint_lr: None,
            weight_decay: 1e-4,
            batch_size: 2,
            seed: 0,
            grad_clip: Some(0.1),
            freeze: FROZEN_PREFIXES.iter().map(|s| s.to_string()).collect(),
            loss_weights: LossWeights::default(),
            visible_only_labels: true,
            rounds: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(lr) = self.joint_lr.filter(|lr| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!("joint_lr must be positive, got {lr}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.separate_epochs == 0 && self.joint_epochs == 0 {
            return Err(Error::Config("at least one phase needs a positive epoch count".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        let w = self.loss_weights;
        if w.alpha < 0.0 || w.beta < 0.0 || w.gamma < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.freeze.iter().any(|p| name.starts_with(p.as_str()))
    }

    fn freezes_encoder(&self) -> bool {
        FROZEN_PREFIXES.iter().all(|p| self.freeze.iter().any(|f| p.starts_with(f.as_str())))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub cls: f64,
    pub iou: f64,
    pub l1: f64,
    pub grad_norm: f64,
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.log.len()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.log.first().map(|r| r.loss)
    }

    /// Mean loss over the last `n` steps.
    pub fn tail_loss(&self, n: usize) -> Option<f64> {
        let n = n.min(self.log.len());
        (n > 0).then(|| self.log[self.log.len() - n..].iter().map(|r| r.loss).sum::<f64>() / n as f64)
    }

    pub fn to_jsonl(&self) -> String {
        self.log.iter().map(|r| serde_json::to_string(r).expect("log record") + "\n").collect()
    }
}

/// Mini-batches for `epoch`: a seeded permutation cut into consecutive chunks.
pub fn epoch_batches(len: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn accumulate(total: &mut BTreeMap<ParamKey, Array2<f64>>, grads: BTreeMap<ParamKey, Array2<f64>>) {
    for (k, g) in grads {
        match total.get_mut(&k) {
            Some(t) => *t += &g,
            None => {
                total.insert(k, g);
            }
        }
    }
}

fn average(grads: &mut BTreeMap<ParamKey, Array2<f64>>, n: usize) {
    let s = 1.0 / n as f64;
    for g in grads.values_mut() {
        g.mapv_inplace(|x| x * s);
    }
}

/// Trains one branch alone on single-modality samples. Every parameter,
/// backbone and encoder included, is updated.
pub fn train_separate(branch: &mut BranchDetector, data: &[Sample], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let stages = branch.stages();
    let phase = format!("separate-{}", branch.modality.as_str());
    let mut opt = AdamW::new(config.lr, config.weight_decay);
    let mut report = TrainReport::default();
    let gts: Vec<Vec<GroundTruth>> = data.iter().map(Sample::ground_truth).collect();
    for epoch in 0..config.separate_epochs {
        for batch in epoch_batches(data.len(), config.batch_size, config.seed ^ branch.modality.group() as u64, epoch) {
            let mut grads = BTreeMap::new();
            let mut parts = LossComponents::default();
            let mut loss = 0.0;
            for &i in &batch {
                let mut tape = Tape::new();
                let out = branch.forward_on_tape(&mut tape, &data[i].image)?;
                let (l, p) = branch_loss_on_tape(&mut tape, &out, stages, &gts[i], config.loss_weights)?;
                loss += tape.value(l)[[0, 0]];
                parts += p;
                accumulate(&mut grads, tape.backward(l).params());
            }
            average(&mut grads, batch.len());
            let grad_norm = match config.grad_clip {
                Some(c) => clip_grad_norm(&mut grads, c),
                None => clip_grad_norm(&mut grads, f64::INFINITY),
            };
            opt.begin_step();
            opt.update(&mut branch.params, &grads, |_| true);
            report.log.push(record(&phase, epoch, report.log.len(), loss, parts, batch.len(), grad_norm, &start));
        }
    }
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn record(
    phase: &str,
    epoch: usize,
    step: usize,
    loss: f64,
    parts: LossComponents,
    n: usize,
    grad_norm: f64,
    start: &Instant,
) -> LogRecord {
    let n = n as f64;
    LogRecord {
        phase: phase.to_string(),
        epoch,
        step,
        loss: loss / n,
        cls: parts.cls / n,
        iou: parts.iou / n,
        l1: parts.l1 / n,
        grad_norm,
        wall_ms: start.elapsed().as_millis(),
    }
}

fn snapshot(ps: &ParamSet, frozen: impl Fn(&str) -> bool) -> Vec<(String, Array2<f64>)> {
    ps.iter().filter(|(n, _)| frozen(n)).map(|(n, v)| (n.to_string(), v.clone())).collect()
}

fn check_unchanged(ps: &ParamSet, before: &[(String, Array2<f64>)], prefix: &str) -> Result<()> {
    for (name, value) in before {
        let id = ps.id(name).ok_or_else(|| Error::FrozenParameterChanged(format!("{prefix}{name}")))?;
        let now = ps.get(id);
        let same = now.dim() == value.dim() && now.iter().zip(value).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::FrozenParameterChanged(format!("{prefix}{name}")));
        }
    }
    Ok(())
}

/// Joint training of the fused model with `k = k_train`. Frozen parameters
/// receive no update; after training they are verified bit for bit.
pub fn train_joint(model: &mut MdqfModel, data: &[PairedSample], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let frozen = |n: &str| config.is_frozen(n);
    let before_rgb = snapshot(&model.rgb.params, frozen);
    let before_tir = snapshot(&model.tir.params, frozen);
    let before_adapters = snapshot(&model.adapters.params, frozen);

    // With the encoder fixed, its output is too: compute it once per image.
    let cached: Option<Vec<(EncoderMemory, EncoderMemory)>> = if config.freezes_encoder() {
        Some(
            data.iter()
                .map(|s| Ok((model.rgb.extract_memory(&s.rgb)?, model.tir.extract_memory(&s.tir)?)))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let stages = model.rgb.stages();
    let k = model.fusion.k_train;
    let mut opt = AdamW::new(config.joint_lr.unwrap_or(config.lr), config.weight_decay);
    let mut report = TrainReport::default();
    let gts: Vec<Vec<GroundTruth>> = data.iter().map(PairedSample::ground_truth).collect();
    for epoch in 0..config.joint_epochs {
        for batch in epoch_batches(data.len(), config.batch_size, config.seed ^ 0x6a6f696e74, epoch) {
            let mut grads = BTreeMap::new();
            let mut parts = LossComponents::default();
            let mut loss = 0.0;
            for &i in &batch {
                let mut tape = Tape::new();
                let out = match &cached {
                    Some(mem) => {
                        let r = model.rgb.memory_constants(&mut tape, &mem[i].0);
                        let t = model.tir.memory_constants(&mut tape, &mem[i].1);
                        model.decode_fused_on_tape(&mut tape, &r, &t, k)?
                    }
                    None => model.forward_fused_on_tape(&mut tape, &data[i].rgb, &data[i].tir, k)?,
                };
                let (lr, pr) = branch_loss_on_tape(&mut tape, &out.rgb, stages, &gts[i], config.loss_weights)?;
                let (lt, pt) = branch_loss_on_tape(&mut tape, &out.tir, stages, &gts[i], config.loss_weights)?;
                let l = tape.add(lr, lt);
                loss += tape.value(l)[[0, 0]];
                parts += pr;
                parts += pt;
                accumulate(&mut grads, tape.backward(l).params());
            }
            average(&mut grads, batch.len());
            // clip over trainable parameters only
            grads.retain(|key, _| !is_frozen_key(model, *key, config));
            let grad_norm = clip_grad_norm(&mut grads, config.grad_clip.unwrap_or(f64::INFINITY));
            opt.begin_step();
            let trainable = |n: &str| !config.is_frozen(n);
            opt.update(&mut model.rgb.params, &grads, trainable);
            opt.update(&mut model.tir.params, &grads, trainable);
            opt.update(&mut model.adapters.params, &grads, trainable);
            report.log.push(record("joint", epoch, report.log.len(), loss, parts, batch.len(), grad_norm, &start));
        }
    }

    check_unchanged(&model.rgb.params, &before_rgb, "rgb.")?;
    check_unchanged(&model.tir.params, &before_tir, "tir.")?;
    check_unchanged(&model.adapters.params, &before_adapters, "adapters.")?;
    Ok(report)
}

fn is_frozen_key(model: &MdqfModel, key: ParamKey, config: &TrainConfig) -> bool {
    let ps = [&model.rgb.params, &model.tir.params, &model.adapters.params]
        .into_iter()
        .find(|p| p.group() == key.group);
    match ps {
        Some(ps) if (key.index as usize) < ps.len() => config.is_frozen(ps.name(crate::nn::ParamId(key.index))),
        _ => false,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoopReport {
    pub rounds: Vec<RoundReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundReport {
    pub rgb: Option<TrainReport>,
    pub tir: Option<TrainReport>,
    pub joint: TrainReport,
}

impl LoopReport {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.rounds {
            for t in [&r.rgb, &r.tir].into_iter().flatten() {
                s += &t.to_jsonl();
            }
            s += &r.joint.to_jsonl();
        }
        s
    }
}

/// Per round: train each branch alone on its unpaired set (skipped when the
/// set is empty), write it into the composite, then train jointly.
pub fn separate_to_joint_loop(
    model: &mut MdqfModel,
    rgb_set: &[Sample],
    tir_set: &[Sample],
    paired: &[PairedSample],
    rounds: usize,
    config: &TrainConfig,
) -> Result<LoopReport> {
    if rounds == 0 {
        return Err(Error::Config("at least one round is required".into()));
    }
    let mut report = LoopReport::default();
    for _ in 0..rounds {
        let mut round = RoundReport::default();
        for (modality, set) in [(Modality::Rgb, rgb_set), (Modality::Tir, tir_set)] {
            if set.is_empty() {
                continue;
            }
            let mut branch = model.branch(modality).clone();
            let r = train_separate(&mut branch, set, config)?;
            model.replace_branch(branch)?;
            match modality {
                Modality::Rgb => round.rgb = Some(r),
                Modality::Tir => round.tir = Some(r),
            }
        }
        round.joint = train_joint(model, paired, config)?;
        report.rounds.push(round);
    }
    Ok(report)
}

/// Unpaired single-modality view of a paired set.
pub fn single_modality(data: &[PairedSample], modality: Modality, visible_only: bool) -> Vec<Sample> {
    data.iter().map(|s| s.single(modality, visible_only)).collect()
}
