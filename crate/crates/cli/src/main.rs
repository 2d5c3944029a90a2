//! `tablediff`: data preparation, training, sampling and evaluation for
//! structure-conditioned table image synthesis.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use artifacts::{write_json, Layout, MissingArtifact};
use commands::{Ctx, Selection};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "tablediff", version, about = "Structure-mask-conditioned table image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding every artifact of the run.
    #[arg(long, default_value = "run")]
    run_dir: PathBuf,
    /// Recompute the artifact even if it already exists.
    #[arg(long)]
    force: bool,
    /// DiT architecture preset.
    #[arg(long, value_parser = ["paper-256", "paper-512", "desk-64"])]
    preset: Option<String>,
    /// Train or use the model without mask conditioning.
    #[arg(long)]
    unconditional: bool,
}

#[derive(Args, Clone)]
struct Seeded {
    /// Overrides vae.train.seed, train.seed and sample.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct Select {
    /// Condition every sample on this mask PNG.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Explicit start-noise seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate toy tables (or import VOC annotations) into the run directory.
    GenData(Common),
    /// Rasterize structure masks for the generated data.
    RenderMasks(Common),
    /// Train the autoencoder on data images and masks.
    TrainVae {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
    },
    /// Encode all data pairs into a latent cache.
    CacheLatents {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
    },
    /// Train the diffusion transformer, resuming from the latest checkpoint.
    TrainDit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
    },
    /// Generate images.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
        #[command(flatten)]
        select: Select,
        /// Also write mask-over-image composites.
        #[arg(long)]
        overlay: bool,
    },
    /// Score generated images: Fréchet distance and structure adherence.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
        #[command(flatten)]
        select: Select,
    },
    /// Write generated images and annotations as a detection dataset.
    Export {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seed: Seeded,
        #[command(flatten)]
        select: Select,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::RenderMasks(_) => "render-masks",
            Command::TrainVae { .. } => "train-vae",
            Command::CacheLatents { .. } => "cache-latents",
            Command::TrainDit { .. } => "train-dit",
            Command::Sample { .. } => "sample",
            Command::Evaluate { .. } => "evaluate",
            Command::Export { .. } => "export",
        }
    }

    fn parts(&self) -> (&Common, Option<&Seeded>) {
        match self {
            Command::GenData(c) | Command::RenderMasks(c) => (c, None),
            Command::TrainVae { common, seed }
            | Command::CacheLatents { common, seed }
            | Command::TrainDit { common, seed }
            | Command::Sample { common, seed, .. }
            | Command::Evaluate { common, seed, .. }
            | Command::Export { common, seed, .. } => (common, Some(seed)),
        }
    }

    fn needs_seed(&self) -> bool {
        matches!(self, Command::TrainVae { .. } | Command::TrainDit { .. } | Command::Sample { .. })
    }
}

fn resolve(cmd: &Command) -> Result<Ctx> {
    let (common, seeded) = cmd.parts();
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(p) = &common.preset {
        cfg.dit.preset = p.clone();
        cfg.dit.config = None;
        cfg.train.preset = p.clone();
    }
    if common.unconditional {
        cfg.train.conditional = false;
    }
    match seeded.and_then(|s| s.seed) {
        Some(seed) => {
            cfg.vae.train.seed = seed;
            cfg.train.seed = seed;
            cfg.sample.seed = seed;
        }
        None if cmd.needs_seed() => bail!("--seed is required for {}", cmd.name()),
        None => {}
    }
    cfg.validate()?;
    std::fs::create_dir_all(&common.run_dir)?;
    write_json(&common.run_dir.join("config.json"), &cfg)?;
    let layout = Layout::new(&common.run_dir, &cfg)?;
    Ok(Ctx {
        cfg,
        layout,
        force: common.force,
    })
}

fn selection(s: &Select) -> Selection {
    Selection {
        mask: s.mask.clone(),
        seeds: s.seeds.clone(),
    }
}

fn run(cmd: &Command) -> Result<commands::Outcome> {
    let ctx = resolve(cmd)?;
    match cmd {
        Command::GenData(_) => commands::gen_data(&ctx),
        Command::RenderMasks(_) => commands::render_masks(&ctx),
        Command::TrainVae { .. } => commands::train_vae(&ctx),
        Command::CacheLatents { .. } => commands::cache(&ctx),
        Command::TrainDit { .. } => commands::train_dit(&ctx),
        Command::Sample { select, overlay, .. } => commands::sample(&ctx, &selection(select), *overlay),
        Command::Evaluate { select, .. } => commands::evaluate(&ctx, &selection(select)),
        Command::Export { select, .. } => commands::export(&ctx, &selection(select)),
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TD_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("TD_THREADS must be a positive integer, got {v:?}"))?;
        if n == 0 {
            bail!("TD_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = cli.command.name();
    match configure_threads().and_then(|_| run(&cli.command)) {
        Ok(out) => {
            let mut line = json!({
                "subcommand": name,
                "status": out.status,
                "artifact": out.artifact,
            });
            if !out.details.is_null() {
                line["details"] = out.details;
            }
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = match e.downcast_ref::<MissingArtifact>() {
                Some(m) => json!({
                    "error": "missing-artifact",
                    "subcommand": name,
                    "path": m.path,
                    "producer": m.producer,
                    "message": m.to_string(),
                }),
                None => json!({
                    "error": "failed",
                    "subcommand": name,
                    "message": format!("{e:#}"),
                }),
            };
            eprintln!("{line}");
            ExitCode::from(if e.is::<MissingArtifact>() { 2 } else { 1 })
        }
    }
}
