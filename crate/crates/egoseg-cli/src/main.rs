//! Command-line interface: dataset generation, training, evaluation,
//! inference, ablation, mask recombination, and visualization.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use egoseg::ckpt;
use egoseg::config::RunConfig;
use egoseg::eval::{ablate, ablation_table, evaluate_samples, infer_sample};
use egoseg::mask::{BinaryMask, ImageRaster, LabelRaster};
use egoseg::model::{Model, Variant};
use egoseg::nn::{BlockKind, ParamStore};
use egoseg::synth::{self, CropMode, SamplePair, TouchConfig};
use egoseg::train::{logs_to_jsonl, train};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "egoseg", about = "Egocentric hand-object segmentation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run inference on one image.
    Infer(InferArgs),
    /// Train and compare ablation variants.
    Ablate(AblateArgs),
    /// Mask-algebra utilities.
    #[command(subcommand)]
    Cods(CodsCommand),
    /// Render a mask overlay PNG.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    n_train: usize,
    #[arg(long, default_value_t = 64)]
    n_val: usize,
    #[arg(long, default_value_t = 64)]
    n_test: usize,
    #[arg(long, default_value_t = 128)]
    image_size: usize,
    #[arg(long, default_value_t = 3)]
    distractors: usize,
    /// left_only | right_only | both | none | mixed
    #[arg(long, default_value = "mixed")]
    touch: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration TOML; defaults to the desk-scale configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (images/, labels/, manifest.jsonl). Without it,
    /// synthetic data is generated in memory per the configuration.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints, logs, and the resolved config.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Bit-reproducible single-threaded batches.
    #[arg(long)]
    deterministic: bool,
    /// basic | cods | hofe | cods_hofe
    #[arg(long)]
    variant: Option<String>,
    /// swin | conv
    #[arg(long)]
    block_type: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to config.toml next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// train | val | test
    #[arg(long, default_value = "test")]
    split: String,
    /// Write the report as JSON here ("-" for stdout only).
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input image PNG.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write the enhancer attention matrices as grayscale PNGs.
    #[arg(long)]
    dump_attention: bool,
    /// Overlay blend strength.
    #[arg(long, default_value_t = 0.55)]
    alpha: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum CodsCommand {
    /// Recombine two binarized object masks into the three final object
    /// masks (two-hand, left-only, right-only).
    Recombine(RecombineArgs),
}

#[derive(Args)]
struct RecombineArgs {
    /// Mask of everything the left hand touches.
    #[arg(long)]
    left: PathBuf,
    /// Mask of everything the right hand touches.
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    image: PathBuf,
    /// Label raster to visualize as ground truth.
    #[arg(long, conflicts_with = "checkpoint")]
    labels: Option<PathBuf>,
    /// Checkpoint to run inference with instead of labels.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.55)]
    alpha: f64,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::Infer(args) => run_infer(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Cods(CodsCommand::Recombine(args)) => run_recombine(args),
        Command::Visualize(args) => run_visualize(args),
    }
}

fn parse_touch(s: &str) -> anyhow::Result<TouchConfig> {
    Ok(match s {
        "left_only" => TouchConfig::LeftOnly,
        "right_only" => TouchConfig::RightOnly,
        "both" => TouchConfig::Both,
        "none" => TouchConfig::None,
        "mixed" => TouchConfig::Mixed,
        other => bail!("unknown touch config {other}"),
    })
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let template = synth::SceneSpec {
        rng_seed: args.seed,
        image_size: args.image_size,
        n_distractors: args.distractors,
        touch_config: parse_touch(&args.touch)?,
        ..synth::SceneSpec::default()
    };
    synth::generate_dataset(&args.out, &template, args.seed, args.n_train, args.n_val, args.n_test)?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        args.n_train,
        args.n_val,
        args.n_test,
        args.out.display()
    );
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => Ok(RunConfig::toy()),
    }
}

fn apply_overrides(
    cfg: &mut RunConfig,
    seed: Option<u64>,
    deterministic: bool,
    variant: &Option<String>,
    block_type: &Option<String>,
) -> anyhow::Result<()> {
    if let Some(seed) = seed {
        cfg.run.seed = seed;
    }
    if deterministic {
        cfg.run.deterministic = true;
    }
    if let Some(v) = variant {
        cfg.model.variant = match v.as_str() {
            "basic" => Variant::Basic,
            "cods" => Variant::Cods,
            "hofe" => Variant::Hofe,
            "cods_hofe" => Variant::CodsHofe,
            other => bail!("unknown variant {other}"),
        };
    }
    if let Some(b) = block_type {
        cfg.model.encoder.block_kind = match b.as_str() {
            "swin" => BlockKind::Swin,
            "conv" => BlockKind::Conv,
            other => bail!("unknown block type {other}"),
        };
    }
    Ok(())
}

fn load_splits(
    cfg: &RunConfig,
    data: &Option<PathBuf>,
) -> anyhow::Result<(Vec<SamplePair>, Vec<SamplePair>, Vec<SamplePair>)> {
    match data {
        Some(dir) => {
            let train = synth::load_split(dir, "train", None)?
                .into_iter()
                .collect();
            let val = synth::load_split(dir, "val", None)?;
            let test = synth::load_split(dir, "test", None)?;
            Ok((train, val, test))
        }
        None => Ok((
            cfg.data.synth.generate("train")?,
            cfg.data.synth.generate("val")?,
            cfg.data.synth.generate("test")?,
        )),
    }
}

fn run_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args.seed, args.deterministic, &args.variant, &args.block_type)?;
    cfg.validate()?;
    std::fs::create_dir_all(&args.out_dir)?;
    cfg.save(&args.out_dir.join("config.toml"))?;

    let (train_set, val_set, _test) = load_splits(&cfg, &args.data)?;
    println!(
        "training {} ({:?} blocks) on {} samples, validating on {}",
        cfg.model.variant.key(),
        cfg.model.encoder.block_kind,
        train_set.len(),
        val_set.len()
    );
    let ckpt_path = args.out_dir.join("best.egsg");
    let result = train(
        &cfg.model,
        &cfg.schedule,
        &cfg.loss,
        &cfg.train_config(),
        &train_set,
        &val_set,
        Some(&ckpt_path),
    )?;
    std::fs::write(args.out_dir.join("log.jsonl"), logs_to_jsonl(&result.logs))?;

    // Final parameters with optimizer state, for resuming or inspection.
    let final_ckpt = ckpt::Checkpoint {
        params: result.store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
        adam_m: Vec::new(),
        adam_v: Vec::new(),
        meta: ckpt::CkptMeta {
            iteration: cfg.schedule.max_iters,
            best_val_miou: result.best_val_miou,
            seed: cfg.run.seed,
            rng_word_pos: 0,
        },
    };
    ckpt::save(&args.out_dir.join("final.egsg"), &final_ckpt)?;
    println!(
        "done: untrained val mIoU {:.4}, best val mIoU {:.4}; checkpoint {}",
        result.untrained_val_miou,
        result.best_val_miou,
        ckpt_path.display()
    );
    Ok(())
}

fn build_model_from(
    cfg: &RunConfig,
    checkpoint: &Path,
) -> anyhow::Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = Model::build(&cfg.model, cfg.run.seed)?;
    let loaded = ckpt::load::<f32>(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    store.load_entries(loaded.params)?;
    Ok((model, store))
}

fn config_next_to(checkpoint: &Path, config: &Option<PathBuf>) -> anyhow::Result<RunConfig> {
    match config {
        Some(p) => Ok(RunConfig::load(p)?),
        None => {
            let sibling = checkpoint
                .parent()
                .map(|d| d.join("config.toml"))
                .filter(|p| p.exists())
                .ok_or_else(|| {
                    anyhow::anyhow!("no --config given and no config.toml next to the checkpoint")
                })?;
            Ok(RunConfig::load(&sibling)?)
        }
    }
}

fn run_eval(args: EvalArgs) -> anyhow::Result<()> {
    let cfg = config_next_to(&args.checkpoint, &args.config)?;
    let (model, store) = build_model_from(&cfg, &args.checkpoint)?;
    let split = match args.data {
        Some(ref dir) => synth::load_split(dir, &args.split, None)?,
        None => cfg.data.synth.generate(&args.split)?,
    };
    if split.is_empty() {
        bail!("split {} is empty", args.split);
    }
    let report = evaluate_samples(
        &model,
        &store,
        &split,
        cfg.data.crop,
        &cfg.data.normalization,
        &cfg.hash(),
    )?;
    print!("{}", report.table());
    let json = serde_json::to_string_pretty(&report)?;
    match args.json {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run_infer(args: InferArgs) -> anyhow::Result<()> {
    let cfg = config_next_to(&args.checkpoint, &args.config)?;
    let (model, store) = build_model_from(&cfg, &args.checkpoint)?;
    let image = ImageRaster::load_png(&args.image)?;
    let sample = SamplePair {
        image: image.clone(),
        labels: LabelRaster::zeros(image.height(), image.width()),
        meta: synth::SceneMeta {
            seed: 0,
            image_size: image.height(),
            hands: vec![],
            objects: vec![],
            distractors: vec![],
        },
    };
    let (masks, _) = infer_sample(&model, &store, &sample, cfg.data.crop, &cfg.data.normalization)?;
    std::fs::create_dir_all(&args.out_dir)?;
    let hand_l = BinaryMask::from_fn(cfg.data.crop, cfg.data.crop, |y, x| masks.m_hand[[y, x]] == 1);
    let hand_r = BinaryMask::from_fn(cfg.data.crop, cfg.data.crop, |y, x| masks.m_hand[[y, x]] == 2);
    hand_l.save_png(&args.out_dir.join("left_hand.png"))?;
    hand_r.save_png(&args.out_dir.join("right_hand.png"))?;
    masks.m_o_l.save_png(&args.out_dir.join("left_object.png"))?;
    masks.m_o_r.save_png(&args.out_dir.join("right_object.png"))?;
    masks.m_o_t.save_png(&args.out_dir.join("two_hand_object.png"))?;
    masks.m_cb.save_png(&args.out_dir.join("contact_boundary.png"))?;

    // Overlay on the center crop that inference actually saw.
    let cropped = image.center_crop(cfg.data.crop)?;
    egoseg::viz::visualize(&cropped, &masks, args.alpha, &args.out_dir.join("overlay.png"))?;

    if args.dump_attention {
        let normalized =
            synth::preprocess::<f32>(&image, cfg.data.crop, &cfg.data.normalization, CropMode::Center)?;
        for (name, attn) in model.attention_maps(&store, &normalized)? {
            egoseg::viz::attention_png(&attn, &args.out_dir.join(format!("attention_{name}.png")))?;
        }
    }
    println!("wrote masks and overlay to {}", args.out_dir.display());
    Ok(())
}

fn run_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_overrides(&mut cfg, args.seed, args.deterministic, &None, &None)?;
    cfg.validate()?;
    std::fs::create_dir_all(&args.out_dir)?;
    let (train_set, val_set, test_set) = load_splits(&cfg, &args.data)?;
    let rows = ablate(
        &cfg.model,
        &cfg.schedule,
        &cfg.loss,
        &cfg.train_config(),
        &Variant::ALL,
        &train_set,
        &val_set,
        &test_set,
    )?;
    let table = ablation_table(&rows);
    print!("{table}");
    std::fs::write(args.out_dir.join("ablation.txt"), &table)?;
    let json: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            serde_json::json!({
                "variant": r.variant.key(),
                "untrained_miou": r.untrained_miou,
                "best_val_miou": r.best_val_miou,
                "test": r.report,
            })
        })
        .collect();
    std::fs::write(
        args.out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&json)?,
    )?;
    Ok(())
}

fn run_recombine(args: RecombineArgs) -> anyhow::Result<()> {
    let left = BinaryMask::load_png(&args.left)?;
    let right = BinaryMask::load_png(&args.right)?;
    let (two, left_only, right_only) = egoseg::cods::recombine(&left, &right)?;
    std::fs::create_dir_all(&args.out_dir)?;
    two.save_png(&args.out_dir.join("two_hand_object.png"))?;
    left_only.save_png(&args.out_dir.join("left_object.png"))?;
    right_only.save_png(&args.out_dir.join("right_object.png"))?;
    println!("wrote recombined masks to {}", args.out_dir.display());
    Ok(())
}

fn run_visualize(args: VisualizeArgs) -> anyhow::Result<()> {
    let image = ImageRaster::load_png(&args.image)?;
    let masks = if let Some(labels_path) = &args.labels {
        let labels = LabelRaster::load_png(labels_path)?;
        if (labels.height(), labels.width()) != (image.height(), image.width()) {
            bail!("image and labels sizes differ");
        }
        let t = egoseg::cods::decouple_targets(&labels);
        let (m_o_t, m_o_l, m_o_r) = egoseg::cods::recombine(&t.g_lo_prime, &t.g_ro_prime)?;
        egoseg::cods::FinalMasks {
            m_hand: t.g_hand,
            m_o_l,
            m_o_r,
            m_o_t,
            m_cb: t.g_cb,
        }
    } else if let Some(checkpoint) = &args.checkpoint {
        let cfg = config_next_to(checkpoint, &args.config)?;
        let (model, store) = build_model_from(&cfg, checkpoint)?;
        let sample = SamplePair {
            image: image.center_crop(cfg.data.crop)?,
            labels: LabelRaster::zeros(cfg.data.crop, cfg.data.crop),
            meta: synth::SceneMeta {
                seed: 0,
                image_size: cfg.data.crop,
                hands: vec![],
                objects: vec![],
                distractors: vec![],
            },
        };
        let (masks, _) = infer_sample(&model, &store, &sample, cfg.data.crop, &cfg.data.normalization)?;
        return write_overlay(&sample.image, &masks, args.alpha, &args.out);
    } else {
        bail!("visualize needs either --labels or --checkpoint");
    };
    write_overlay(&image, &masks, args.alpha, &args.out)
}

fn write_overlay(
    image: &ImageRaster,
    masks: &egoseg::cods::FinalMasks,
    alpha: f64,
    out: &Path,
) -> anyhow::Result<()> {
    egoseg::viz::visualize(image, masks, alpha, out)?;
    println!("wrote {}", out.display());
    Ok(())
}
