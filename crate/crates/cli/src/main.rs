use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use visionaid::config::{parse_config, ExperimentConfig};
use visionaid::data::{synthetic_two_mode, write_vafd, Dataset};
use visionaid::model_bank::{surrogates, ModelBank, MODEL_DIR_ENV};
use visionaid::training::run::{self, RunOptions};

/// Vision-aided GAN training with progressively selected frozen extractors.
#[derive(Parser)]
#[command(name = "visionaid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator according to a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint directory of an earlier run.
        #[arg(long, conflicts_with = "warm_start")]
        resume: Option<PathBuf>,
        /// Initialize G and D from a baseline checkpoint.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        /// Override `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Probe every bank model and write a ranking report.
    Rank {
        #[arg(long)]
        config: PathBuf,
        /// Generator checkpoint; a freshly initialized generator otherwise.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Report path; `<run.out_dir>/ranking.jsonl` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate the generator stored in a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Reference images; the checkpoint config's dataset by default.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write generator samples from a checkpoint as PNG files.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a model's flattened features for a set of images as VAFD.
    DumpFeatures {
        #[arg(long)]
        model: String,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bank manifest; the built-in desk bank otherwise.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        desk_seed: u64,
    },
    /// Save the built-in desk bank as a manifest plus weight files.
    MakeBank {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the synthetic two-mode dataset (`.vafd` file or PNG directory).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn train(config: &Path, resume: Option<PathBuf>, warm_start: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(ckpt) = &resume {
        // the checkpoint's own config wins so a resumed run cannot drift
        cfg = load_config(&ckpt.join(visionaid::config::ECHO_FILE), seed)?;
    }
    let bank = run::load_bank(&cfg)?;
    let data = run::load_dataset(&cfg)?;
    let outcome = run::run(&cfg, &bank, &data, &RunOptions { resume, warm_start })?;
    log::info!("run finished in {}", outcome.run_dir.display());
    print_json(&outcome.report)?;
    if outcome.diverged {
        bail!("training diverged; best snapshot was step {} (FID {:.4})", outcome.best.step, outcome.best.fid);
    }
    Ok(())
}

fn rank(config: &Path, ckpt: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let bank = run::load_bank(&cfg)?;
    let data = run::load_dataset(&cfg)?;
    let results = run::rank_for_config(&cfg, &bank, &data, ckpt.as_deref())?;
    let out = out.unwrap_or_else(|| cfg.run.out_dir.join("ranking.jsonl"));
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = String::new();
    for r in &results {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
    print!("{text}");
    Ok(())
}

fn bank_from(manifest: Option<&Path>, desk_seed: u64) -> Result<ModelBank> {
    Ok(match manifest {
        Some(m) => ModelBank::load(m, std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from).as_deref())?,
        None => surrogates::desk_bank(desk_seed)?,
    })
}

fn dump_features(model: &str, images: &Path, out: &Path, manifest: Option<&Path>, desk_seed: u64) -> Result<()> {
    let bank = bank_from(manifest, desk_seed)?;
    let entry = bank.get(model)?;
    let data = Dataset::load(images)?;
    let feats = entry.features(&data.images.clone().into_dyn())?.flattened();
    write_vafd(out, &feats.into_dyn())?;
    log::info!("wrote {} features to {}", data.len(), out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, warm_start, seed } => train(&config, resume, warm_start, seed),
        Command::Rank { config, ckpt, out, seed } => rank(&config, ckpt, out, seed),
        Command::Eval { ckpt, data } => print_json(&run::evaluate_checkpoint(&ckpt, data.as_deref())?),
        Command::Sample { ckpt, out, n, seed } => {
            let (_, g, _) = run::load_generator(&ckpt)?;
            let z = visionaid::training::latent(seed, "sample-z", n, g.config.latent_dim);
            let images = run::generate(&g, &z).into_dimensionality()?;
            Dataset::new(images.mapv(|v| v.clamp(-1.0, 1.0)))?.save_png_dir(&out)?;
            Ok(())
        }
        Command::DumpFeatures { model, images, out, manifest, desk_seed } => {
            dump_features(&model, &images, &out, manifest.as_deref(), desk_seed)
        }
        Command::MakeBank { manifest, model_dir, seed } => {
            surrogates::desk_bank(seed)?.save(&manifest, &model_dir)?;
            Ok(())
        }
        Command::SynthData { out, n, resolution, seed } => {
            let data = synthetic_two_mode(n, resolution, seed);
            if out.extension().is_some_and(|e| e == "vafd") {
                write_vafd(&out, &data.images.into_dyn())?;
            } else {
                data.save_png_dir(&out)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap prints usage and exits with status 2 on bad arguments
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cause = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {cause}");
            ExitCode::FAILURE
        }
    }
}
