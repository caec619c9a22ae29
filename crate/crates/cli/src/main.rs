use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use glandseg::imaging::{load_image, save_gray_png, AugmentationRecipe, CanonicalSize, CHANNEL_HEMATOXYLIN, CHANNEL_LBP, CHANNEL_RED};
use glandseg::model::{describe, format_layer_table, gradcheck, loss_csv, GradCheckConfig, LinkNet, OptimizerKind};
use glandseg::pipeline::{
    annotated_default, augment_items, configure_threads, evaluate_dir, list_images, load_dataset,
    metrics_csv, predict_dir, preprocess, run_pipeline, save_dataset, split_validation, synth_generate,
    train_model, LabeledImage, PipelineConfig, SynthSpec,
};
use glandseg::stain::deconvolve;
use glandseg::{Error, Result};

#[derive(Parser)]
#[command(name = "glandseg", version, about = "Gland segmentation for H&E histology images")]
struct Cli {
    /// Pipeline configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Start from the small-image settings (no canonical resize) instead of
    /// the defaults. Ignored when --config is given.
    #[arg(long, global = true)]
    toy: bool,

    /// Print the default configuration with comments and exit.
    #[arg(long)]
    dump_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
    },
    /// Write the network input channels of each image as 8-bit PNGs.
    Preprocess {
        /// An image file or a directory of images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also export the H, E and DAB concentration channels.
        #[arg(long)]
        stains: bool,
    },
    /// Expand a labelled dataset with the 52-variant augmentation recipe.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write `model.ckpt` and `loss.csv`.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Segment every image in a directory with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against annotations and write a metrics CSV.
    Eval {
        /// Directory holding `<stem>_mask.png` predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of images with `<stem>_anno` masks.
        #[arg(long)]
        gt: PathBuf,
        /// CSV destination; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train (or load a checkpoint), predict the test set and evaluate.
    Run {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Compare backward gradients of a small model with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = GradCheckConfig::default().samples)]
        samples: usize,
        #[arg(long, default_value_t = GradCheckConfig::default().seed)]
        seed: u64,
        /// Fail when the worst relative error reaches this value.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Print the layer table of the configured (or a saved) model.
    DescribeModel {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    /// Train on the augmented set.
    #[arg(long)]
    augment: bool,
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(format!("expected `adam` or `sgd`, got `{s}`")),
    }
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut PipelineConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
            cfg.model.seed = v;
        }
        if let Some(v) = self.optimizer {
            t.optimizer = v;
        }
        if self.augment {
            cfg.data.augment = true;
        }
    }
}

fn set(slot: &mut Option<PathBuf>, v: &Option<PathBuf>) {
    if v.is_some() {
        slot.clone_from(v);
    }
}

fn base_config(cli: &Cli) -> Result<PipelineConfig> {
    match &cli.config {
        Some(p) => PipelineConfig::load(p),
        None if cli.toy => Ok(PipelineConfig::toy()),
        None => Ok(PipelineConfig::default()),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("--{flag} (or the matching [paths] entry) is required")))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

fn execute(cli: &Cli, command: &Command) -> Result<()> {
    let mut cfg = base_config(cli)?;
    match command {
        Command::Synth {
            out,
            count,
            seed,
            width,
            height,
        } => {
            let spec = SynthSpec {
                width: *width,
                height: *height,
                seed: *seed,
                ..SynthSpec::default()
            };
            let items: Vec<LabeledImage> = synth_generate(&spec, *count)?
                .into_iter()
                .enumerate()
                .map(|(i, (image, mask))| LabeledImage {
                    name: format!("synth_{i:04}"),
                    image,
                    mask,
                })
                .collect();
            save_dataset(&items, out)?;
            println!("wrote {} images to {}", items.len(), out.display());
        }
        Command::Preprocess { input, out, stains } => {
            let files = if input.is_dir() {
                list_images(input)?
            } else {
                vec![input.clone()]
            };
            std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
            for f in &files {
                let img = load_image(f)?;
                let name = stem(f);
                let stack = preprocess(&img, &cfg.preprocess)?;
                for ch in [CHANNEL_RED, CHANNEL_HEMATOXYLIN, CHANNEL_LBP] {
                    let g = stack.gray(ch).expect("preprocess emits every channel");
                    save_gray_png(&g, out.join(format!("{name}_{ch}.png")))?;
                }
                if *stains {
                    let conc = deconvolve(&img, &cfg.preprocess.stain())?;
                    save_gray_png(&conc.hematoxylin_image(), out.join(format!("{name}_stain_h.png")))?;
                    save_gray_png(&conc.eosin_image(), out.join(format!("{name}_stain_e.png")))?;
                    save_gray_png(&conc.dab_image(), out.join(format!("{name}_stain_dab.png")))?;
                }
            }
            println!("preprocessed {} images into {}", files.len(), out.display());
        }
        Command::Augment { input, out } => {
            let items = load_dataset(input)?;
            let expanded = augment_items(&items, &AugmentationRecipe::default())?;
            save_dataset(&expanded, out)?;
            println!("{} images -> {} variants in {}", items.len(), expanded.len(), out.display());
        }
        Command::Train {
            train,
            val,
            out,
            overrides,
        } => {
            overrides.apply(&mut cfg);
            set(&mut cfg.paths.train_dir, train);
            set(&mut cfg.paths.val_dir, val);
            set(&mut cfg.paths.output_dir, out);
            cfg.validate()?;
            let out = required(&cfg.paths.output_dir, "out")?.clone();
            let items = load_dataset(required(&cfg.paths.train_dir, "train")?)?;
            let (train_items, val_items) = match &cfg.paths.val_dir {
                Some(v) => (items, load_dataset(v)?),
                None => split_validation(items, cfg.data.validation_fraction),
            };
            let outcome = train_model(&cfg, &train_items, &val_items)?;
            let mut best = outcome.best;
            best.params_mut().quantize();
            std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            best.save(&out.join("model.ckpt"))?;
            write(&out.join("loss.csv"), &loss_csv(&outcome.history))?;
            println!(
                "trained {} epochs, kept epoch {}; wrote {}",
                outcome.history.len(),
                outcome.best_epoch,
                out.join("model.ckpt").display()
            );
        }
        Command::Predict {
            checkpoint,
            input,
            out,
        } => {
            set(&mut cfg.paths.checkpoint, checkpoint);
            let model = LinkNet::load(required(&cfg.paths.checkpoint, "checkpoint")?)?;
            let segs = predict_dir(&model, input, out, &cfg)?;
            for s in &segs {
                println!("{}: threshold {:.6}, {} objects", s.name, s.threshold, s.instances.instance_count());
            }
        }
        Command::Eval { pred, gt, out } => {
            let csv = metrics_csv(&evaluate_dir(pred, gt)?);
            match out {
                Some(p) => write(p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Run {
            train,
            val,
            test,
            out,
            checkpoint,
            overrides,
        } => {
            overrides.apply(&mut cfg);
            set(&mut cfg.paths.train_dir, train);
            set(&mut cfg.paths.val_dir, val);
            set(&mut cfg.paths.test_dir, test);
            set(&mut cfg.paths.output_dir, out);
            set(&mut cfg.paths.checkpoint, checkpoint);
            let s = run_pipeline(&cfg)?;
            println!(
                "{} test images: object Dice {:.4}, object Hausdorff {:.4}, F1 {:.4}",
                s.reports.len(),
                s.mean.object_dice,
                s.mean.object_hausdorff,
                s.mean.f1
            );
            println!("outputs in {}", s.output_dir.display());
        }
        Command::Gradcheck {
            samples,
            seed,
            tolerance,
        } => {
            let report = gradcheck(&GradCheckConfig {
                samples: *samples,
                seed: *seed,
                ..GradCheckConfig::default()
            })?;
            let max = report.max_rel_error();
            if let Some(w) = report.worst() {
                println!(
                    "{} coordinates, max relative error {max:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
                    report.len(),
                    w.name,
                    w.index,
                    w.analytic,
                    w.numeric
                );
            }
            if !(max < *tolerance) {
                return Err(Error::NonFinite(format!(
                    "gradient check failed: relative error {max:.3e} >= {tolerance:.1e}"
                )));
            }
        }
        Command::DescribeModel {
            checkpoint,
            width,
            height,
        } => {
            let model_cfg = match checkpoint {
                Some(p) => LinkNet::load(p)?.config().clone(),
                None => cfg.model.clone(),
            };
            let (dw, dh) = match cfg.preprocess.canonical_size {
                CanonicalSize::Fixed { width, height } => (width, height),
                CanonicalSize::Auto => (64, 64),
            };
            let (w, h) = (width.unwrap_or(dw), height.unwrap_or(dh));
            print!("{}", format_layer_table(&describe(&model_cfg, h, w)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if cli.dump_config {
        print!("{}", annotated_default());
        return ExitCode::SUCCESS;
    }
    let Some(command) = &cli.command else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(1);
    };
    let result = configure_threads().and_then(|n| {
        log::debug!("using {n} worker threads");
        execute(&cli, command)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().code() as u8)
        }
    }
}
