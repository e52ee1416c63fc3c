//! Command-line front end. Exit codes: 0 success, 1 invalid input, 2 failure
//! while running.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{Manifest, RunConfig};
use crate::data::bundle_io::{read_bundle_file, write_bundle_file};
use crate::data::extract::extract_bundle;
use crate::data::image::RgbImage;
use crate::data::synth::generate_synthetic;
use crate::data::{extract_dataset, synthetic_meta, BundleSet, ImageMeta};
use crate::error::{Error, Result};
use crate::fusion::Variant;
use crate::gradcheck::{grad_check, Module};
use crate::grid::{feature_dump, prepare_split, run_grid};
use crate::interpret::{export_overlays, interpret};
use crate::metrics::{compute_metrics, Averaging};
use crate::train::{logs_to_jsonl, predict_all, train, TrainState};

pub const BUNDLE_FILE: &str = "bundles.cafb";
pub const CHECKPOINT_FILE: &str = "checkpoint.cafc";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Parser)]
#[command(name = "cafusion", version, about = "Concept/global cross-attentive fusion with top-k MIL pooling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset, its PNG images and concept bundles.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Extract concept bundles from a directory of PNG images.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Directory holding the images and meta.json.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Train one model and write a checkpoint and JSON-lines log.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its held-out patients.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        averaging: Option<AveragingFlag>,
    },
    /// Train and evaluate a grid of variants, ratios, k values and seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long = "k-values", value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also write per-image latent features for every cell.
        #[arg(long)]
        dump_features: bool,
    },
    /// Explain held-out predictions by their top-1 concept.
    Interpret {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Source images for overlays; skipped when absent.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Finite-difference gradient check on a small random instance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "all")]
        module: Module,
        #[arg(long)]
        variant: Option<Variant>,
        /// Use the raw-pixel patch and crop encoders.
        #[arg(long)]
        raw: bool,
    },
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub slots: Option<usize>,
    #[arg(long = "d-model")]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum AveragingFlag {
    Macro,
    Weighted,
}

impl From<AveragingFlag> for Averaging {
    fn from(a: AveragingFlag) -> Self {
        match a {
            AveragingFlag::Macro => Averaging::Macro,
            AveragingFlag::Weighted => Averaging::Weighted,
        }
    }
}

impl clap::builder::ValueParserFactory for Variant {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Variant>().map_err(|e| e.to_string()))
    }
}

impl clap::builder::ValueParserFactory for Module {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Module>().map_err(|e| e.to_string()))
    }
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            require_file(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist or is not a file", p.display())))
    }
}

fn require_dir(p: &Path) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist or is not a directory", p.display())))
    }
}

fn pick(flag: &Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given (flag or paths.{what} in the config)")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_text(path, &(text + "\n"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn apply_model_flags(cfg: &mut RunConfig, m: &ModelFlags) {
    if let Some(k) = m.k {
        cfg.model.k = k;
    }
    if let Some(v) = m.variant {
        cfg.model.variant = v;
    }
    if let Some(n) = m.slots {
        cfg.model.slots = n;
    }
    if let Some(d) = m.d_model {
        cfg.model.d_model = d;
    }
    if let Some(h) = m.heads {
        cfg.model.heads = h;
    }
}

fn synth(common: &Common) -> Result<()> {
    let mut cfg = base_config(common)?;
    cfg.synth.validate()?;
    let out = &common.out;
    let images = out.join("images");
    create_dir(&images)?;
    let mut ds = generate_synthetic(&cfg.synth)?;
    for s in &mut ds.samples {
        s.image.save_png(&images.join(crate::data::image_file_name(s.image_id)))?;
        // Extract from what was written, so `extract` on the PNGs agrees.
        s.image = RgbImage::from_rgb8(&s.image.to_rgb8());
    }
    write_json(&images.join(META_FILE), &synthetic_meta(&ds))?;
    let set = extract_dataset(&ds, &cfg.extractor);
    let bundle_path = out.join(BUNDLE_FILE);
    write_bundle_file(&set, &bundle_path)?;
    cfg.paths.data = Some(bundle_path);
    cfg.paths.images = Some(images);
    eprintln!("synth: {} images, {} patients", ds.samples.len(), cfg.synth.num_patients());
    Manifest::new("synth", cfg.synth.seed, &cfg).write(out)
}

fn read_meta(dir: &Path) -> Result<Vec<ImageMeta>> {
    let path = dir.join(META_FILE);
    require_file(&path)?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

fn extract(common: &Common, images: &Option<PathBuf>) -> Result<()> {
    let mut cfg = base_config(common)?;
    let dir = pick(images, &cfg.paths.images, "images")?;
    require_dir(&dir)?;
    let meta = read_meta(&dir)?;
    for m in &meta {
        require_file(&dir.join(&m.file))?;
    }
    let mut bundles = Vec::with_capacity(meta.len());
    let mut size = None;
    for m in &meta {
        let image = RgbImage::load_png(&dir.join(&m.file))?;
        match size {
            None => size = Some((image.height, image.width)),
            Some(s) if s != (image.height, image.width) => {
                return Err(Error::Config(format!("{} is {}x{}, expected {}x{}", m.file, image.width, image.height, s.1, s.0)))
            }
            _ => {}
        }
        bundles.push(extract_bundle(&image, &cfg.extractor, m.patient_id, m.image_id, m.label));
    }
    let (h, w) = size.ok_or(Error::Empty("image list"))?;
    let set = BundleSet {
        kind: cfg.extractor.features,
        grid_height: h,
        grid_width: w,
        bundles,
    };
    let path = common.out.join(BUNDLE_FILE);
    write_bundle_file(&set, &path)?;
    cfg.paths.images = Some(dir);
    cfg.paths.data = Some(path);
    eprintln!("extract: {} images", set.bundles.len());
    Manifest::new("extract", cfg.train.seed, &cfg).write(&common.out)
}

fn load_data(flag: &Option<PathBuf>, cfg: &RunConfig) -> Result<(PathBuf, BundleSet)> {
    let path = pick(flag, &cfg.paths.data, "data")?;
    require_file(&path)?;
    let set = read_bundle_file(&path)?;
    Ok((path, set))
}

fn train_cmd(common: &Common, model: &ModelFlags, data: &Option<PathBuf>, ratio: Option<f64>, epochs: Option<usize>, resume: &Option<PathBuf>) -> Result<()> {
    let mut cfg = base_config(common)?;
    apply_model_flags(&mut cfg, model);
    if let Some(r) = ratio {
        cfg.train.train_ratio = r;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(r) = resume {
        require_file(r)?;
    }
    let (path, set) = load_data(data, &cfg)?;
    cfg.paths.data = Some(path);
    let (state, train_cfg) = match resume {
        Some(r) => {
            let ck = load_checkpoint(r)?;
            let train_cfg = crate::train::TrainConfig {
                epochs: cfg.train.epochs,
                ..ck.train.clone()
            };
            (ck.state, train_cfg)
        }
        None => {
            let model_cfg = cfg.model.model_config(&set)?;
            (TrainState::new(model_cfg, cfg.train.seed)?, cfg.train.clone())
        }
    };
    train_cfg.validate()?;
    let data = prepare_split(&set, state.model.config.slots, train_cfg.train_ratio, &train_cfg, train_cfg.seed)?;
    create_dir(&common.out)?;
    let ck_path = common.out.join(CHECKPOINT_FILE);
    let (_, logs) = train(state, &train_cfg, &data.train, &data.val, |s, log| {
        eprintln!(
            "epoch {:>4} loss {:.4} val_acc {:.4} best {:.4}@{}",
            log.epoch, log.train_loss, log.val_accuracy, log.best_val_accuracy, log.best_epoch
        );
        save_checkpoint(
            &Checkpoint {
                train: train_cfg.clone(),
                state: s.clone(),
            },
            &ck_path,
        )
    })?;
    let log_path = common.out.join("train_log.jsonl");
    let mut text = if resume.is_some() {
        fs::read_to_string(&log_path).unwrap_or_default()
    } else {
        String::new()
    };
    text.push_str(&logs_to_jsonl(&logs));
    write_text(&log_path, &text)?;
    cfg.train = train_cfg.clone();
    cfg.paths.checkpoint = Some(ck_path);
    Manifest::new("train", train_cfg.seed, &cfg).write(&common.out)
}

fn eval_cmd(common: &Common, data: &Option<PathBuf>, checkpoint: &Option<PathBuf>, averaging: Option<AveragingFlag>) -> Result<()> {
    let mut cfg = base_config(common)?;
    let ck_path = pick(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    require_file(&ck_path)?;
    let (path, set) = load_data(data, &cfg)?;
    let ck = load_checkpoint(&ck_path)?;
    let averaging = averaging.map(Averaging::from).unwrap_or(cfg.grid.averaging);
    let split = prepare_split(&set, ck.state.best.config.slots, ck.train.train_ratio, &ck.train, ck.train.seed)?;
    let pred = predict_all(&ck.state.best, &split.val, ck.train.eval_batch_size)?;
    let truth: Vec<usize> = split.val.labels.iter().map(|&l| l as usize).collect();
    let report = compute_metrics(&truth, &pred, ck.state.best.config.classes, averaging)?;
    create_dir(&common.out)?;
    write_json(&common.out.join("metrics.json"), &report)?;
    eprintln!(
        "eval: accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4} on {} images",
        report.accuracy, report.precision, report.recall, report.f1, report.samples
    );
    cfg.paths.data = Some(path);
    cfg.paths.checkpoint = Some(ck_path);
    cfg.train = ck.train.clone();
    Manifest::new("eval", ck.train.seed, &cfg).write(&common.out)
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    common: &Common,
    data: &Option<PathBuf>,
    variants: &Option<Vec<Variant>>,
    ratios: &Option<Vec<f64>>,
    k_values: &Option<Vec<usize>>,
    seeds: &Option<Vec<u64>>,
    epochs: Option<usize>,
    dump: bool,
) -> Result<()> {
    let mut cfg = base_config(common)?;
    if let Some(v) = variants {
        cfg.grid.variants = v.clone();
    }
    if let Some(r) = ratios {
        cfg.grid.ratios = r.clone();
    }
    if let Some(k) = k_values {
        cfg.grid.k_values = k.clone();
    }
    if let Some(s) = seeds {
        cfg.grid.seeds = s.clone();
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.grid.validate()?;
    cfg.train.validate()?;
    let (path, set) = load_data(data, &cfg)?;
    let base_model = cfg.model.model_config(&set)?;
    for &k in &cfg.grid.k_values {
        if k == 0 || k > base_model.slots {
            return Err(Error::TopKRange {
                k,
                slots: base_model.slots,
            });
        }
    }
    create_dir(&common.out)?;
    let features_dir = common.out.join("features");
    if dump {
        create_dir(&features_dir)?;
    }
    let mut dump_err = None;
    let result = run_grid(&set, &base_model, &cfg.train, &cfg.grid, |cell| {
        let k = &cell.key;
        match &cell.outcome {
            Ok(o) => {
                eprintln!("{} ratio {} k {} seed {}: accuracy {:.4}", k.variant, k.ratio, k.k, k.seed, o.metrics.accuracy);
                if dump && dump_err.is_none() {
                    let train_cfg = crate::train::TrainConfig {
                        seed: k.seed,
                        train_ratio: k.ratio,
                        ..cfg.train.clone()
                    };
                    let r = prepare_split(&set, base_model.slots, k.ratio, &train_cfg, k.seed)
                        .and_then(|d| feature_dump(&o.model, &d, 64))
                        .and_then(|text| {
                            let name = format!("{}_r{}_k{}_s{}.jsonl", k.variant, k.ratio, k.k, k.seed);
                            write_text(&features_dir.join(name), &text)
                        });
                    if let Err(e) = r {
                        dump_err = Some(e);
                    }
                }
            }
            Err(e) => eprintln!("{} ratio {} k {} seed {}: failed: {e}", k.variant, k.ratio, k.k, k.seed),
        }
    })?;
    if let Some(e) = dump_err {
        return Err(e);
    }
    write_text(&common.out.join("results.csv"), &result.to_csv())?;
    write_json(&common.out.join("confusion.json"), &result.confusion_json())?;
    write_json(&common.out.join("class_accuracy.json"), &result.class_accuracy_json())?;
    cfg.paths.data = Some(path);
    let seed = cfg.grid.seeds[0];
    Manifest::new("ablate", seed, &cfg).write(&common.out)
}

fn interpret_cmd(common: &Common, data: &Option<PathBuf>, checkpoint: &Option<PathBuf>, images: &Option<PathBuf>) -> Result<()> {
    let mut cfg = base_config(common)?;
    let ck_path = pick(checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    require_file(&ck_path)?;
    let image_dir = images.clone().or_else(|| cfg.paths.images.clone());
    if let Some(d) = &image_dir {
        require_dir(d)?;
    }
    let (path, set) = load_data(data, &cfg)?;
    let ck = load_checkpoint(&ck_path)?;
    let split = prepare_split(&set, ck.state.best.config.slots, ck.train.train_ratio, &ck.train, ck.train.seed)?;
    let records = interpret(&ck.state.best, &set, &split.val, 64)?;
    create_dir(&common.out)?;
    let lines: String = records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
        .collect();
    write_text(&common.out.join("interpretations.jsonl"), &lines)?;
    if let Some(d) = &image_dir {
        export_overlays(&records, d, &common.out.join("overlays"))?;
    }
    let explained = records.iter().filter(|r| r.top1.is_some()).count();
    eprintln!("interpret: {} records, {explained} with a top-1 concept", records.len());
    cfg.paths.data = Some(path);
    cfg.paths.checkpoint = Some(ck_path);
    cfg.paths.images = image_dir;
    Manifest::new("interpret", ck.train.seed, &cfg).write(&common.out)
}

fn gradcheck_cmd(common: &Common, module: Module, variant: Option<Variant>, raw: bool) -> Result<()> {
    let mut cfg = base_config(common)?;
    if let Some(v) = variant {
        cfg.gradcheck.variant = v;
    }
    cfg.gradcheck.raw_inputs |= raw;
    let report = grad_check(module, &cfg.gradcheck)?;
    print!("{report}");
    create_dir(&common.out)?;
    write_json(&common.out.join("gradcheck.json"), &report)?;
    Manifest::new("gradcheck", cfg.gradcheck.seed, &cfg).write(&common.out)?;
    report.into_result().map(|_| ())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { common } => synth(common),
        Command::Extract { common, images } => extract(common, images),
        Command::Train {
            common,
            model,
            data,
            ratio,
            epochs,
            resume,
        } => train_cmd(common, model, data, *ratio, *epochs, resume),
        Command::Eval {
            common,
            data,
            checkpoint,
            averaging,
        } => eval_cmd(common, data, checkpoint, *averaging),
        Command::Ablate {
            common,
            data,
            variants,
            ratios,
            k_values,
            seeds,
            epochs,
            dump_features,
        } => ablate(common, data, variants, ratios, k_values, seeds, *epochs, *dump_features),
        Command::Interpret {
            common,
            data,
            checkpoint,
            images,
        } => interpret_cmd(common, data, checkpoint, images),
        Command::Gradcheck {
            common,
            module,
            variant,
            raw,
        } => gradcheck_cmd(common, *module, *variant, *raw),
    }
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
