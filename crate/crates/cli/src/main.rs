use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use patternformer::audit::{audit_passes, audit_family, render_csv, render_text};
use patternformer::checkpoint::Checkpoint;
use patternformer::config::read_kv;
use patternformer::data::{load_cifar, normalize, resize, synthetic, CifarKind, Dataset, Split};
use patternformer::fragments::{check_fragment, default_tolerance, FRAGMENTS};
use patternformer::gradcheck::GradCheckOptions;
use patternformer::model::{ModelConfig, Patternformer};
use patternformer::nn::ParamStore;
use patternformer::training::{evaluate, train, TrainConfig};
use patternformer::viz::{decode_pnm, export_pattern_maps, ExportOptions};
use patternformer::{Error, NdArray, Result};

#[derive(Parser)]
#[command(name = "patternformer", version, about = "Pattern Transformer tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and MAC audit of the preset family.
    Audit {
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        #[arg(long, default_value_t = 224)]
        resolution: usize,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
    },
    /// Train a preset on a dataset.
    Train {
        #[arg(long, default_value = "tiny")]
        preset: String,
        /// synthetic[:N], cifar10:<dir> or cifar100:<dir>
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        accumulation_steps: Option<usize>,
        #[arg(long)]
        base_lr: Option<f64>,
        /// `key = value` file with model and training settings; explicit flags win.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Finite-difference gradient check of a named fragment (or `all`).
    Gradcheck {
        #[arg(long, default_value = "all")]
        fragment: String,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 512)]
        max_coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export pattern maps of a checkpoint for one image.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Binary PPM/PGM image; otherwise `--data` and `--index` pick one.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        upsample: usize,
        #[arg(long)]
        overlay: bool,
        #[arg(long, default_value_t = patternformer::viz::DEFAULT_BLEND)]
        blend: f64,
    },
}

const SYNTHETIC_SEED: u64 = 7;

/// Train and test sets named by a `--data` spec.
fn load_data(spec: &str, classes: usize, resolution: usize) -> Result<(Dataset, Dataset)> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "synthetic" => {
            let n = if arg.is_empty() {
                256
            } else {
                arg.parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad sample count in {spec:?}")))?
            };
            let test_n = (n / 4).max(classes);
            Ok((
                synthetic(n, classes, resolution, SYNTHETIC_SEED)?,
                synthetic(test_n, classes, resolution, SYNTHETIC_SEED + 1)?,
            ))
        }
        "cifar10" | "cifar100" => {
            if arg.is_empty() {
                return Err(Error::InvalidConfig(format!("{kind} needs a directory: {kind}:<dir>")));
            }
            let kind = if kind == "cifar10" {
                CifarKind::Cifar10
            } else {
                CifarKind::Cifar100
            };
            let dir = Path::new(arg);
            Ok((load_cifar(dir, kind, Split::Train)?, load_cifar(dir, kind, Split::Test)?))
        }
        other => Err(Error::InvalidConfig(format!(
            "unknown data source {other:?}; expected synthetic[:N], cifar10:<dir> or cifar100:<dir>"
        ))),
    }
}

fn data_classes(spec: &str, fallback: usize) -> usize {
    match spec.split(':').next() {
        Some("cifar10") => 10,
        Some("cifar100") => 100,
        _ => fallback,
    }
}

fn apply_setting(model: &mut ModelConfig, tc: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    if tc.apply(key, value)? || model.apply(key, value)? {
        return Ok(());
    }
    Err(Error::InvalidConfig(format!("unknown setting {key:?}")))
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    preset: &str,
    data: &str,
    seed: u64,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    accumulation_steps: Option<usize>,
    base_lr: Option<f64>,
    config: Option<&Path>,
    set: &[String],
    out: &Path,
) -> Result<()> {
    let mut model_cfg = ModelConfig::preset(preset)?;
    let mut tc = TrainConfig::default();
    if let Some(path) = config {
        for (k, v) in read_kv(path)? {
            apply_setting(&mut model_cfg, &mut tc, &k, &v)?;
        }
    }
    for kv in set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        apply_setting(&mut model_cfg, &mut tc, k.trim(), v.trim())?;
    }
    tc.seed = seed;
    tc.epochs = epochs.unwrap_or(tc.epochs);
    tc.batch_size = batch_size.unwrap_or(tc.batch_size);
    tc.accumulation_steps = accumulation_steps.unwrap_or(tc.accumulation_steps);
    tc.base_lr = base_lr.unwrap_or(tc.base_lr);
    model_cfg.drop_path = tc.drop_path;
    model_cfg.num_classes = data_classes(data, model_cfg.num_classes);
    let (train_set, test_set) = load_data(data, model_cfg.num_classes, model_cfg.resolution)?;
    let (model, mut store) = Patternformer::assemble::<f32>(&model_cfg, seed)?;
    eprintln!(
        "training {} ({} params) on {} samples, effective lr {:e}",
        model_cfg.name,
        store.learnable_count(),
        train_set.len(),
        tc.effective_lr()
    );
    let report = train(&model, &mut store, &train_set, Some(&test_set), &tc, Some(out))?;
    for row in &report.history {
        println!("{} {:<10} loss {:.4} acc {:.4} lr {:.3e}", row.epoch, row.split, row.loss, row.acc, row.lr);
    }
    println!(
        "done: {} epochs, best eval acc {:.4}, outputs in {}",
        report.epochs_run,
        report.best_acc,
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Patternformer, ParamStore<f32>)> {
    let ck = Checkpoint::load(path)?;
    let cfg = ck.model_config()?;
    let (model, mut store) = Patternformer::assemble::<f32>(&cfg, 0)?;
    ck.restore(&cfg, &mut store)?;
    Ok((model, store))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Audit {
            format,
            resolution,
            classes,
        } => {
            let rows = audit_family(resolution, classes)?;
            match format {
                Format::Text => print!("{}", render_text(&rows)),
                Format::Csv => print!("{}", render_csv(&rows)),
            }
            Ok(audit_passes(&rows))
        }
        Command::Train {
            preset,
            data,
            seed,
            epochs,
            batch_size,
            accumulation_steps,
            base_lr,
            config,
            set,
            out,
        } => {
            run_train(
                &preset,
                &data,
                seed,
                epochs,
                batch_size,
                accumulation_steps,
                base_lr,
                config.as_deref(),
                &set,
                &out,
            )?;
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            batch_size,
        } => {
            let (model, mut store) = load_model(&checkpoint)?;
            let split: Split = split.parse()?;
            let (train_set, test_set) = load_data(&data, model.config.num_classes, model.config.resolution)?;
            let set = if split == Split::Train { &train_set } else { &test_set };
            let (loss, acc) = evaluate(&model, &mut store, set, batch_size)?;
            println!("loss {loss:.6} acc {acc:.6} samples {}", set.len());
            Ok(true)
        }
        Command::Gradcheck {
            fragment,
            tol,
            eps,
            max_coords,
            seed,
        } => {
            let names: Vec<&str> = if fragment == "all" {
                FRAGMENTS.to_vec()
            } else {
                vec![fragment.as_str()]
            };
            let mut ok = true;
            for name in names {
                let opts = GradCheckOptions {
                    eps,
                    rel_tol: tol.unwrap_or_else(|| default_tolerance(name)),
                    max_coords,
                    seed,
                };
                let report = check_fragment(name, &opts)?;
                println!("== {name}\n{report}");
                for f in report.failures.iter().take(16) {
                    println!(
                        "  FAIL {}[{}] analytic {:.9e} numeric {:.9e} rel {:.3e}",
                        f.input, f.index, f.analytic, f.numeric, f.rel_err
                    );
                }
                ok &= report.passed();
            }
            Ok(ok)
        }
        Command::Viz {
            checkpoint,
            image,
            data,
            index,
            out,
            upsample,
            overlay,
            blend,
        } => {
            let (model, mut store) = load_model(&checkpoint)?;
            let r = model.config.resolution;
            let mut pixels = match image {
                Some(path) => {
                    let img = decode_pnm(&std::fs::read(path)?)?;
                    let (h, w) = (img.shape()[1], img.shape()[2]);
                    resize(img.data(), h, w, r)
                }
                None => {
                    let (set, _) = load_data(&data, model.config.num_classes, r)?;
                    if index >= set.len() {
                        return Err(Error::InvalidConfig(format!("index {index} outside {} samples", set.len())));
                    }
                    resize(set.image(index), set.height, set.width, r)
                }
            };
            normalize(&mut pixels);
            let img = NdArray::new(&[3, r, r], pixels)?;
            let opts = ExportOptions {
                upsample,
                overlay,
                blend,
            };
            let dump = export_pattern_maps(&model, &mut store, &img, &out, &opts)?;
            println!("wrote {} maps and {}", dump.files.len(), dump.manifest.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::InvalidConfig(_)) {
                eprintln!("run with --help for usage");
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
