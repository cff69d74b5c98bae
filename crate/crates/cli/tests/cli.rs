use std::path::Path;
use std::process::{Command, Output};

use mdqf::protocols::ExperimentConfig;
use mdqf::{DetectorConfig, FusionConfig, Modality};

fn tiny_config() -> ExperimentConfig {
    let det = |m| DetectorConfig {
        width: 16,
        heads: 2,
        ffn_width: 32,
        num_queries: 4,
        encoder_layers: 1,
        stages: 2,
        ..DetectorConfig::for_modality(m)
    };
    let mut cfg = ExperimentConfig {
        train_pairs: 4,
        test_pairs: 2,
        rgb: det(Modality::Rgb),
        tir: DetectorConfig { seed: 1, ..det(Modality::Tir) },
        fusion: FusionConfig::for_queries(4, 16),
        ..ExperimentConfig::default()
    };
    cfg.train.separate_epochs = 1;
    cfg.train.joint_epochs = 1;
    cfg
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, toml::to_string(&tiny_config()).unwrap()).unwrap();
    p
}

fn mdqf(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdqf"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("MDQF_OUT")
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(o.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&o.stderr));
    stdout
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn every_command_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = write_config(root);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, runs) = (root.join("data"), root.join("runs"));
    let (train, test) = (s(&data.join("train")), s(&data.join("test")));

    let out = ok(mdqf(&["gen-data"], &cfg, &data));
    assert!(out.contains("wrote ") && data.join("train/pairs.json").exists());

    for m in ["rgb", "tir"] {
        ok(mdqf(&["train", "separate", "--modality", m, "--data", &train], &cfg, &runs));
        assert!(runs.join(format!("{m}.ckpt")).exists());
    }
    let (rgb, tir) = (s(&runs.join("rgb.ckpt")), s(&runs.join("tir.ckpt")));
    ok(mdqf(&["train", "joint", "--data", &train, "--rgb", &rgb, "--tir", &tir, "--k1", "6"], &cfg, &runs));
    let model = s(&runs.join("model.ckpt"));
    let joint = manifest(&runs.join("manifest_train-joint.json"));
    let hash = joint["inputs"][&rgb].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(joint["outputs"].as_array().unwrap().iter().any(|o| o == &model));

    ok(mdqf(&["train", "image-fusion", "--data", &train], &cfg, &runs));
    let image = s(&runs.join("image_fusion.ckpt"));

    let evals = root.join("eval");
    let compare = ok(mdqf(
        &["eval", "compare", "--checkpoint", &model, "--data", &test, "--rgb", &rgb, "--tir", &tir, "--image", &image],
        &cfg,
        &evals,
    ));
    for method in ["rgb-branch", "tir-branch", "mdqf", "box-fusion", "image-fusion"] {
        assert!(compare.contains(method), "{method}");
    }
    ok(mdqf(
        &["eval", "robustness", "--checkpoint", &model, "--data", &test, "--degrade", "tir", "--factor", "0.3"],
        &cfg,
        &evals,
    ));
    let r: serde_json::Value = manifest(&evals.join("robustness.json"));
    assert!(r["rows"].as_array().unwrap().iter().any(|row| row["scenario"] == "tir-degraded"));
    ok(mdqf(
        &["eval", "ablate-k", "--checkpoint", &model, "--data", &test, "--k2", "2,4,8", "--topk", "3"],
        &cfg,
        &evals,
    ));
    let a = std::fs::read_to_string(evals.join("ablation_k.csv")).unwrap();
    assert_eq!(a.lines().count(), 1 + 4);
    assert!(a.contains("top-3"));
    ok(mdqf(
        &["eval", "decoupled", "--checkpoint", &model, "--rgb", &rgb, "--tir", &tir, "--paired", &train, "--data", &test, "--swap", "none,rgb"],
        &cfg,
        &evals,
    ));
    assert!(std::fs::read_to_string(evals.join("decoupled.csv")).unwrap().contains("rgb"));
    ok(mdqf(&["train", "loop", "--checkpoint", &model, "--data", &train, "--rgb-data", &train], &cfg, &root.join("loop")));
    assert!(root.join("loop/loop_log.jsonl").exists());
}

#[test]
fn joint_training_refuses_without_both_branches() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = mdqf(&["train", "joint", "--data", "nowhere", "--rgb", "rgb.ckpt"], &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("both") && err.contains("--rgb") && err.contains("--tir"), "{err}");
}

#[test]
fn unknown_protocol_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let o = mdqf(&["eval", "leaderboard"], &cfg, tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_is_seeded_and_honours_the_output_env() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = |dir: &str, seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_mdqf"))
            .args(["gen-data", "--seed", seed, "--config"])
            .arg(&cfg)
            .env("MDQF_OUT", tmp.path().join(dir))
            .output()
            .unwrap();
        ok(o);
        std::fs::read(tmp.path().join(dir).join("train/annotations_rgb.json")).unwrap()
    };
    assert_eq!(run("a", "9"), run("b", "9"));
    assert_ne!(run("a", "9"), run("c", "10"));
    let m = manifest(&tmp.path().join("a/manifest_gen-data.json"));
    assert_eq!(m["seeds"]["data"], 9);
    assert_eq!(m["config"]["data"]["seed"], 9);
}

#[test]
fn bad_config_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("bad.toml");
    std::fs::write(&p, "train_pairs = 3\nnot_a_field = 1\n").unwrap();
    let o = mdqf(&["gen-data"], &p, tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.toml"));
}
