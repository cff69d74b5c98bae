mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mdqf::checkpoint::{load_branch, load_model, save_branch, save_model};
use mdqf::coco::{export_coco, import_coco, import_single};
use mdqf::datagen::PairedSample;
use mdqf::protocols::*;
use mdqf::train::{separate_to_joint_loop, train_joint, train_separate};
use mdqf::{BranchDetector, MdqfModel, Modality, PostProcess};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "mdqf", version, about = "RGB-thermal detection with per-stage query fusion")]
struct Cli {
    /// TOML experiment config; omitted fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed of the config (data, initialization, batch order).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for this command.
    #[arg(long, global = true, env = "MDQF_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset as `train/` and `test/` COCO directories.
    GenData,
    /// Train branches, the fused model, or the image-fusion baseline.
    #[command(subcommand)]
    Train(TrainCmd),
    /// Run one evaluation protocol on a test directory.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Full run from the config: data, training, comparison, robustness, k ablation and renders.
    Report {
        /// Number of test pairs to render.
        #[arg(long, default_value_t = 8)]
        render: usize,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train one branch on its own modality.
    Separate {
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        data: PathBuf,
    },
    /// Joint training of two separately trained branches.
    Joint {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rgb: Option<PathBuf>,
        #[arg(long)]
        tir: Option<PathBuf>,
        /// Top-k used while training.
        #[arg(long)]
        k1: Option<usize>,
    },
    /// Separate-to-joint rounds on an existing model.
    Loop {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Paired data for the joint phase.
        #[arg(long)]
        data: PathBuf,
        /// Unpaired RGB data (COCO directory) for the separate phase.
        #[arg(long)]
        rgb_data: Option<PathBuf>,
        #[arg(long)]
        tir_data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
    },
    /// Pixel-averaging baseline: one detector on mean RGB/TIR images.
    ImageFusion {
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Args)]
struct EvalOpts {
    /// Fused model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test data directory.
    #[arg(long)]
    data: PathBuf,
    /// Top-k used at inference.
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long, value_enum)]
    postproc: Option<PostProc>,
    #[arg(long, default_value_t = 0.5)]
    nms_iou: f64,
    /// Number kept by `--postproc topk`; defaults to a sixth of the proposal union.
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args)]
struct BaselineOpts {
    /// Separately trained RGB branch, enables the box-fusion baseline with `--tir`.
    #[arg(long, requires = "tir")]
    rgb: Option<PathBuf>,
    #[arg(long, requires = "rgb")]
    tir: Option<PathBuf>,
    /// Image-fusion detector checkpoint.
    #[arg(long, requires = "rgb")]
    image: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Branches alone, fused model and baselines on clean data.
    Compare {
        #[command(flatten)]
        eval: EvalOpts,
        #[command(flatten)]
        baselines: BaselineOpts,
    },
    /// Fused and missing-modality paths with one modality's contrast reduced.
    Robustness {
        #[command(flatten)]
        eval: EvalOpts,
        #[command(flatten)]
        baselines: BaselineOpts,
        #[arg(long, value_enum, default_value = "both")]
        degrade: Degrade,
        /// Contrast factor in [0, 1]; 0 flattens the image to its mean.
        #[arg(long, default_value_t = 0.0)]
        factor: f64,
    },
    /// Each model at several inference k, plus a plain top-n row.
    AblateK {
        /// Models trained with different k1.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "k2", value_delimiter = ',', required = true)]
        k2: Vec<usize>,
        #[arg(long)]
        topk: Option<usize>,
    },
    /// Swap in independently trained branches, then fine-tune jointly.
    Decoupled {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        tir: PathBuf,
        /// Paired data for the fine-tuning.
        #[arg(long)]
        paired: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "none,rgb,tir,both")]
        swap: Vec<SwapArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PostProc {
    Nms,
    Topk,
}

#[derive(Clone, Copy, ValueEnum)]
enum Degrade {
    Rgb,
    Tir,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SwapArg {
    None,
    Rgb,
    Tir,
    Both,
}

impl From<SwapArg> for Swap {
    fn from(s: SwapArg) -> Self {
        match s {
            SwapArg::None => Swap::None,
            SwapArg::Rgb => Swap::Rgb,
            SwapArg::Tir => Swap::Tir,
            SwapArg::Both => Swap::Both,
        }
    }
}

/// A problem with how the command was invoked rather than with its inputs.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!(Usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn load_paired(dir: &Path, m: &mut RunManifest) -> Result<Vec<PairedSample>> {
    m.input_dir(dir)?;
    Ok(import_coco(dir)?)
}

fn load_checkpoint(path: &Path, m: &mut RunManifest) -> Result<MdqfModel> {
    existing(path, "checkpoint")?;
    m.input(path)?;
    Ok(load_model(path)?)
}

fn load_branch_ckpt(path: &Path, modality: Modality, m: &mut RunManifest) -> Result<BranchDetector> {
    existing(path, "checkpoint")?;
    m.input(path)?;
    Ok(load_branch(path, modality)?)
}

fn apply_eval_opts(model: &mut MdqfModel, e: &EvalOpts) -> Result<()> {
    if let Some(k) = e.k2 {
        model.fusion.k_test = k;
    }
    let n = e.topk.unwrap_or_else(|| default_topk(model.rgb.config.num_queries));
    match e.postproc {
        Some(PostProc::Topk) => model.fusion.postprocess = PostProcess::Topk { n },
        Some(PostProc::Nms) => model.fusion.postprocess = PostProcess::Nms { iou_threshold: e.nms_iou },
        None => {}
    }
    if !(0.0..=1.0).contains(&e.nms_iou) {
        bail!(Usage(format!("--nms-iou must lie in [0, 1], got {}", e.nms_iou)));
    }
    Ok(())
}

fn load_baselines(b: &BaselineOpts, m: &mut RunManifest) -> Result<Option<Baselines>> {
    let (Some(rgb), Some(tir)) = (&b.rgb, &b.tir) else { return Ok(None) };
    let image = match &b.image {
        Some(p) => Some(load_branch_ckpt(p, Modality::Rgb, m)?),
        None => None,
    };
    Ok(Some(Baselines {
        rgb: load_branch_ckpt(rgb, Modality::Rgb, m)?,
        tir: load_branch_ckpt(tir, Modality::Tir, m)?,
        image,
    }))
}

fn write_table(table: &Table, out: &Path, stem: &str, m: &mut RunManifest) -> Result<()> {
    table.write(out, stem)?;
    m.output(&out.join(format!("{stem}.csv")));
    m.output(&out.join(format!("{stem}.md")));
    println!("{}", table.to_markdown());
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path, m: &mut RunManifest) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    m.output(path);
    Ok(())
}

fn write_text(text: &str, path: &Path, m: &mut RunManifest) -> Result<()> {
    std::fs::write(path, text)?;
    m.output(path);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = &cli.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut m = RunManifest::start(std::env::args().collect(), &cfg, cli.config.as_deref())?;

    let name = match &cli.command {
        Command::GenData => {
            let (train, test) = cfg.datasets()?;
            for (dir, set) in [(out.join("train"), &train), (out.join("test"), &test)] {
                export_coco(set, &dir)?;
                m.output(&dir);
            }
            write_text(&toml::to_string(&cfg)?, &out.join("config.toml"), &mut m)?;
            "gen-data"
        }
        Command::Train(t) => train(t, &cfg, out, &mut m)?,
        Command::Eval(e) => eval(e, &cfg, out, &mut m)?,
        Command::Report { render } => {
            report(&cfg, out, *render, &mut m)?;
            "report"
        }
    };
    let path = m.finish(out, name)?;
    for p in m.outputs.iter().chain([&path.display().to_string()]) {
        println!("wrote {p}");
    }
    Ok(())
}

fn train(t: &TrainCmd, cfg: &ExperimentConfig, out: &Path, m: &mut RunManifest) -> Result<&'static str> {
    let visible = cfg.train.visible_only_labels;
    match t {
        TrainCmd::Separate { modality, data } => {
            m.input_dir(data)?;
            let set = import_single(data, *modality, visible)?;
            let config = match modality {
                Modality::Rgb => cfg.rgb.clone(),
                Modality::Tir => cfg.tir.clone(),
            };
            let mut branch = BranchDetector::new(*modality, config)?;
            let report = train_separate(&mut branch, &set, &cfg.train)?;
            let ckpt = out.join(format!("{}.ckpt", modality.as_str()));
            save_branch(&branch, &ckpt)?;
            m.output(&ckpt);
            write_text(&report.to_jsonl(), &out.join(format!("{}_log.jsonl", modality.as_str())), m)?;
            Ok("train-separate")
        }
        TrainCmd::Joint { data, rgb, tir, k1 } => {
            let missing: Vec<&str> = [("--rgb", rgb), ("--tir", tir)]
                .iter()
                .filter(|(_, p)| p.as_ref().is_none_or(|p| !p.exists()))
                .map(|(flag, _)| *flag)
                .collect();
            if !missing.is_empty() {
                bail!(Usage(format!(
                    "joint training needs both separately trained branch checkpoints; missing or not found: {}",
                    missing.join(", ")
                )));
            }
            let rgb = load_branch_ckpt(rgb.as_ref().unwrap(), Modality::Rgb, m)?;
            let tir = load_branch_ckpt(tir.as_ref().unwrap(), Modality::Tir, m)?;
            let pairs = load_paired(data, m)?;
            let mut fusion = cfg.fusion.clone();
            if let Some(k) = k1 {
                fusion.k_train = *k;
            }
            let mut model = MdqfModel::new(rgb, tir, fusion, cfg.model_seed)?;
            let report = train_joint(&mut model, &pairs, &cfg.train)?;
            let ckpt = out.join("model.ckpt");
            save_model(&model, &ckpt)?;
            m.output(&ckpt);
            write_text(&report.to_jsonl(), &out.join("joint_log.jsonl"), m)?;
            Ok("train-joint")
        }
        TrainCmd::Loop { checkpoint, data, rgb_data, tir_data, rounds } => {
            let mut model = load_checkpoint(checkpoint, m)?;
            let pairs = load_paired(data, m)?;
            let mut single = |dir: &Option<PathBuf>, modality| -> Result<_> {
                match dir {
                    Some(d) => {
                        m.input_dir(d)?;
                        Ok(import_single(d, modality, visible)?)
                    }
                    None => Ok(Vec::new()),
                }
            };
            let rgb = single(rgb_data, Modality::Rgb)?;
            let tir = single(tir_data, Modality::Tir)?;
            let report = separate_to_joint_loop(&mut model, &rgb, &tir, &pairs, *rounds, &cfg.train)?;
            let ckpt = out.join("model.ckpt");
            save_model(&model, &ckpt)?;
            m.output(&ckpt);
            write_text(&report.to_jsonl(), &out.join("loop_log.jsonl"), m)?;
            Ok("train-loop")
        }
        TrainCmd::ImageFusion { data } => {
            let pairs = load_paired(data, m)?;
            let branch = train_image_fusion(cfg, &pairs)?;
            let ckpt = out.join("image_fusion.ckpt");
            save_branch(&branch, &ckpt)?;
            m.output(&ckpt);
            Ok("train-image-fusion")
        }
    }
}

fn degradations(d: Degrade, factor: f64) -> Vec<Degradation> {
    let mods = match d {
        Degrade::Rgb => vec![Modality::Rgb],
        Degrade::Tir => vec![Modality::Tir],
        Degrade::Both => vec![Modality::Rgb, Modality::Tir],
    };
    mods.into_iter().map(|modality| Degradation { modality, factor }).collect()
}

fn eval(e: &EvalCmd, cfg: &ExperimentConfig, out: &Path, m: &mut RunManifest) -> Result<&'static str> {
    match e {
        EvalCmd::Compare { eval, baselines } => {
            let mut model = load_checkpoint(&eval.checkpoint, m)?;
            apply_eval_opts(&mut model, eval)?;
            let base = load_baselines(baselines, m)?;
            let test = load_paired(&eval.data, m)?;
            let c = run_fusion_comparison(&model, base.as_ref(), &test)?;
            write_table(&c.table(), out, "comparison", m)?;
            c.pr_curves().write(out, "pr_curves")?;
            m.output(&out.join("pr_curves.csv"));
            write_json(&c, &out.join("comparison.json"), m)?;
            Ok("eval-compare")
        }
        EvalCmd::Robustness { eval, baselines, degrade, factor } => {
            if !(0.0..=1.0).contains(factor) {
                bail!(Usage(format!("--factor must lie in [0, 1], got {factor}")));
            }
            let mut model = load_checkpoint(&eval.checkpoint, m)?;
            apply_eval_opts(&mut model, eval)?;
            let base = load_baselines(baselines, m)?;
            let test = load_paired(&eval.data, m)?;
            let r = run_robustness(&model, base.as_ref(), &test, &degradations(*degrade, *factor))?;
            write_table(&r.table(), out, "robustness", m)?;
            write_json(&r, &out.join("robustness.json"), m)?;
            Ok("eval-robustness")
        }
        EvalCmd::AblateK { checkpoints, data, k2, topk } => {
            let models = checkpoints.iter().map(|p| load_checkpoint(p, m)).collect::<Result<Vec<_>>>()?;
            let test = load_paired(data, m)?;
            let n = topk.unwrap_or_else(|| default_topk(models[0].rgb.config.num_queries));
            let a = run_k_ablation(&models.iter().collect::<Vec<_>>(), &test, k2, n)?;
            write_table(&a.table(), out, "ablation_k", m)?;
            write_json(&a, &out.join("ablation_k.json"), m)?;
            Ok("eval-ablate-k")
        }
        EvalCmd::Decoupled { checkpoint, rgb, tir, paired, data, swap } => {
            let initial = load_checkpoint(checkpoint, m)?;
            let fresh_rgb = load_branch_ckpt(rgb, Modality::Rgb, m)?;
            let fresh_tir = load_branch_ckpt(tir, Modality::Tir, m)?;
            let pairs = load_paired(paired, m)?;
            let test = load_paired(data, m)?;
            let swaps: Vec<Swap> = swap.iter().map(|&s| s.into()).collect();
            let d = run_decoupled_update(&initial, &fresh_rgb, &fresh_tir, &pairs, &test, &swaps, &cfg.train)?;
            write_table(&d.table(), out, "decoupled", m)?;
            write_json(&d, &out.join("decoupled.json"), m)?;
            Ok("eval-decoupled")
        }
    }
}

fn report(cfg: &ExperimentConfig, out: &Path, render: usize, m: &mut RunManifest) -> Result<()> {
    let (train, test) = cfg.datasets()?;
    for (dir, set) in [(out.join("data/train"), &train), (out.join("data/test"), &test)] {
        export_coco(set, &dir)?;
        m.output(&dir);
    }
    eprintln!("training ({} pairs)", train.len());
    let pipeline = train_pipeline(cfg, &train)?;
    let mut baselines = pipeline.baselines.clone();
    baselines.image = Some(train_image_fusion(cfg, &train)?);
    for (name, b) in [("rgb", &baselines.rgb), ("tir", &baselines.tir)] {
        let p = out.join(format!("{name}.ckpt"));
        save_branch(b, &p)?;
        m.output(&p);
    }
    let p = out.join("image_fusion.ckpt");
    save_branch(baselines.image.as_ref().unwrap(), &p)?;
    m.output(&p);
    let p = out.join("model.ckpt");
    save_model(&pipeline.model, &p)?;
    m.output(&p);
    for (name, log) in [("rgb", &pipeline.rgb_log), ("tir", &pipeline.tir_log), ("joint", &pipeline.joint_log)] {
        write_text(&log.to_jsonl(), &out.join(format!("{name}_log.jsonl")), m)?;
    }

    eprintln!("evaluating");
    let model = &pipeline.model;
    let c = run_fusion_comparison(model, Some(&baselines), &test)?;
    write_table(&c.table(), out, "comparison", m)?;
    c.pr_curves().write(out, "pr_curves")?;
    m.output(&out.join("pr_curves.csv"));
    let r = run_robustness(model, Some(&baselines), &test, &degradations(Degrade::Both, 0.0))?;
    write_table(&r.table(), out, "robustness", m)?;
    let n = model.rgb.config.num_queries;
    let mut k2s: Vec<usize> = [n / 2, n, 3 * n / 2, 2 * n].into_iter().filter(|&k| k > 0).collect();
    k2s.dedup();
    let a = run_k_ablation(&[model], &test, &k2s, default_topk(n))?;
    write_table(&a.table(), out, "ablation_k", m)?;
    let results = serde_json::json!({ "comparison": c, "robustness": r, "ablation_k": a });
    write_json(&results, &out.join("results.json"), m)?;
    let dir = out.join("renders");
    render_test_set(model, &test[..render.min(test.len())], &dir)?;
    m.output(&dir);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
