use mdqf::checkpoint::{load_model, save_branch, save_model};
use mdqf::datagen::{generate_dataset, PairedSample, SceneSpec};
use mdqf::detector::{is_frozen_name, BranchDetector, DetectorConfig, Modality};
use mdqf::train::{separate_to_joint_loop, single_modality, train_joint, train_separate, TrainConfig};
use mdqf::{Error, FusionConfig, MdqfModel};

fn small(channels: usize, seed: u64) -> DetectorConfig {
    DetectorConfig { width: 32, heads: 4, ffn_width: 64, num_queries: 8, encoder_layers: 1, channels, seed, ..DetectorConfig::default() }
}

fn data(n: usize) -> Vec<PairedSample> {
    generate_dataset(&SceneSpec { seed: 21, ..SceneSpec::default() }, n, 0).unwrap()
}

fn config(separate: usize, joint: usize) -> TrainConfig {
    TrainConfig { separate_epochs: separate, joint_epochs: joint, lr: 1e-3, joint_lr: Some(1e-3), seed: 5, ..TrainConfig::default() }
}

fn model() -> MdqfModel {
    let rgb = BranchDetector::new(Modality::Rgb, small(3, 1)).unwrap();
    let tir = BranchDetector::new(Modality::Tir, small(1, 2)).unwrap();
    MdqfModel::new(rgb, tir, FusionConfig::for_queries(8, 32), 3).unwrap()
}

#[test]
fn separate_loss_decreases_over_fifty_steps() {
    let set = single_modality(&data(10), Modality::Tir, true);
    let mut b = BranchDetector::new(Modality::Tir, small(1, 2)).unwrap();
    let r = train_separate(&mut b, &set, &config(10, 1)).unwrap();
    assert_eq!(r.steps(), 50);
    let first = r.log[..5].iter().map(|l| l.loss).sum::<f64>() / 5.0;
    assert!(r.tail_loss(5).unwrap() < first, "{first} -> {:?}", r.tail_loss(5));
    assert!(r.log.iter().all(|l| l.loss.is_finite() && l.cls >= 0.0 && l.iou >= 0.0 && l.l1 >= 0.0));
}

#[test]
fn separate_training_is_bitwise_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let set = single_modality(&data(4), Modality::Rgb, true);
    let mut files = Vec::new();
    for i in 0..2 {
        let mut b = BranchDetector::new(Modality::Rgb, small(3, 1)).unwrap();
        train_separate(&mut b, &set, &config(2, 1)).unwrap();
        let p = dir.path().join(format!("{i}.ckpt"));
        save_branch(&b, &p).unwrap();
        files.push(std::fs::read(p).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn empty_dataset_is_an_error() {
    let mut b = BranchDetector::new(Modality::Rgb, small(3, 1)).unwrap();
    assert!(matches!(train_separate(&mut b, &[], &config(1, 1)), Err(Error::EmptyDataset)));
    assert!(matches!(train_joint(&mut model(), &[], &config(1, 1)), Err(Error::EmptyDataset)));
}

#[test]
fn joint_training_respects_the_freeze_contract() {
    let pairs = data(4);
    let mut m = model();
    let before = m.clone();
    let r = train_joint(&mut m, &pairs, &config(1, 2)).unwrap();
    assert_eq!(r.steps(), 4);
    for (now, was) in [(&m.rgb.params, &before.rgb.params), (&m.tir.params, &before.tir.params)] {
        let mut frozen = 0;
        let mut moved = 0;
        for ((name, a), (_, b)) in now.iter().zip(was.iter()) {
            let same = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            if is_frozen_name(name) {
                assert!(same, "{name} changed");
                frozen += 1;
            } else if !same {
                moved += 1;
            }
        }
        assert!(frozen > 0 && moved > 0);
    }
    // adapters leave their identity initialization
    assert_ne!(m.adapters, before.adapters);
}

#[test]
fn joint_without_frozen_encoder_updates_it() {
    // freezing nothing takes the uncached path and updates the encoder too
    let pairs = data(2);
    let mut m = model();
    let before = m.clone();
    let cfg = TrainConfig { freeze: vec![], ..config(1, 1) };
    train_joint(&mut m, &pairs, &cfg).unwrap();
    let id = m.rgb.params.id("encoder.block0.attn.q.weight").unwrap();
    assert_ne!(m.rgb.params.get(id), before.rgb.params.get(id));
}

#[test]
fn loop_with_empty_unpaired_sets_is_plain_joint_training() {
    let pairs = data(4);
    let cfg = config(1, 1);
    let mut a = model();
    let mut b = model();
    let loop_report = separate_to_joint_loop(&mut a, &[], &[], &pairs, 1, &cfg).unwrap();
    let joint = train_joint(&mut b, &pairs, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(loop_report.rounds[0].rgb.is_none());
    assert_eq!(loop_report.rounds[0].joint.steps(), joint.steps());
    assert!(separate_to_joint_loop(&mut a, &[], &[], &pairs, 0, &cfg).is_err());
}

#[test]
fn loop_round_updates_branches_and_keeps_decoupling() {
    let pairs = data(4);
    let rgb = single_modality(&pairs, Modality::Rgb, true);
    let mut m = model();
    let before = m.clone();
    let r = separate_to_joint_loop(&mut m, &rgb, &[], &pairs, 1, &config(1, 1)).unwrap();
    assert!(r.rounds[0].rgb.is_some() && r.rounds[0].tir.is_none());
    // the separately trained branch still runs alone and the fused model still runs
    let s = &pairs[0];
    assert_eq!(m.forward_missing(Modality::Rgb, &s.rgb).unwrap(), m.rgb.forward_single(&s.rgb).unwrap());
    m.forward_fused(&s.rgb, &s.tir).unwrap();
    // encoder of the untouched-by-separate TIR branch is still the original
    let id = m.tir.params.id("backbone.patch_embed.weight").unwrap();
    assert_eq!(m.tir.params.get(id), before.tir.params.get(id));
}

#[test]
fn trained_model_round_trips_through_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = model();
    train_joint(&mut m, &data(2), &config(1, 1)).unwrap();
    let p = dir.path().join("m.ckpt");
    save_model(&m, &p).unwrap();
    assert_eq!(load_model(&p).unwrap(), m);
}

#[test]
fn training_config_validation() {
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { joint_lr: Some(-1.0), ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    let text = r#"{"separate_epochs": 3, "bogus": 1}"#;
    assert!(serde_json::from_str::<TrainConfig>(text).is_err());
    let parsed: TrainConfig = serde_json::from_str(r#"{"separate_epochs": 3}"#).unwrap();
    assert_eq!(parsed.separate_epochs, 3);
    assert_eq!(parsed.lr, 1e-4);
}
