use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::{Invalid, RunConfig};

/// Residual micro-attention networks: gradient checks, synthetic data,
/// staged training, protocol evaluation and attention-map export.
#[derive(Debug, Parser)]
#[command(name = "microattn", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// `key = value` configuration file; flags override its entries.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Extra `KEY=VALUE` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct NetworkArgs {
    /// Input height and width.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    stem_pool: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Debug, Args)]
struct PresetArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare analytic parameter gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        network: NetworkArgs,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Write a synthetic localized-signal dataset and its manifest.
    Synth {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        subjects: Option<usize>,
        /// Samples per subject and class.
        #[arg(long)]
        per_subject: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        database: Option<String>,
    },
    /// Train one stage and write its checkpoint and log.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        val_manifest: Option<PathBuf>,
        /// pretrain, hde, cde or loso.
        #[arg(long)]
        preset: Option<String>,
        /// Starting checkpoint; a plain checkpoint is upgraded when the
        /// trained network has attention.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        attention: Option<bool>,
        #[command(flatten)]
        network: NetworkArgs,
        #[command(flatten)]
        preset_args: PresetArgs,
    },
    /// Run an evaluation protocol and write the pooled report.
    Eval {
        #[arg(long, value_parser = ["hde", "cde", "loso"])]
        protocol: Option<String>,
        /// One or more manifests; several are pooled.
        #[arg(long, num_args = 1..)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        db_a: Option<String>,
        #[arg(long)]
        db_b: Option<String>,
        /// Pre-train the plain network on this manifest first.
        #[arg(long)]
        pretrain_manifest: Option<PathBuf>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        /// Plain checkpoint to upgrade instead of pre-training.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        network: NetworkArgs,
        #[command(flatten)]
        preset_args: PresetArgs,
    },
    /// Export every block's attention map and an overlay for one image.
    Visualize {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
    },
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn apply_network(cfg: &mut RunConfig, n: NetworkArgs) -> Result<(), Invalid> {
    cfg.set_opt("size", n.size)?;
    cfg.set_opt("stem_pool", n.stem_pool)?;
    cfg.set_opt("depth", n.depth)?;
    cfg.set_opt("width", n.width)
}

fn apply_preset(cfg: &mut RunConfig, p: PresetArgs) -> Result<(), Invalid> {
    cfg.set_opt("epochs", p.epochs)?;
    cfg.set_opt("lr", p.lr)?;
    cfg.set_opt("batch", p.batch)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| config::invalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.set_opt("seed", cli.common.seed)?;
    cfg.set_opt("out", path_str(cli.common.out))?;

    match cli.command {
        Command::Gradcheck { network, classes, inject_fault } => {
            apply_network(&mut cfg, network)?;
            cfg.set_opt("classes", classes)?;
            commands::gradcheck(&cfg, inject_fault.as_deref())
        }
        Command::Synth { classes, subjects, per_subject, size, database } => {
            cfg.set_opt("synth.classes", classes)?;
            cfg.set_opt("synth.subjects", subjects)?;
            cfg.set_opt("synth.per_subject", per_subject)?;
            cfg.set_opt("size", size)?;
            cfg.set_opt("synth.database", database)?;
            commands::synth(&cfg)
        }
        Command::Train { manifest, val_manifest, preset, init, attention, network, preset_args } => {
            cfg.set_opt("manifest", path_str(manifest))?;
            cfg.set_opt("val_manifest", path_str(val_manifest))?;
            cfg.set_opt("preset", preset)?;
            cfg.set_opt("init", path_str(init))?;
            cfg.set_opt("attention", attention)?;
            apply_network(&mut cfg, network)?;
            apply_preset(&mut cfg, preset_args)?;
            commands::train(&cfg)
        }
        Command::Eval { protocol, manifest, db_a, db_b, pretrain_manifest, pretrain_epochs, init, network, preset_args } => {
            cfg.set_opt("protocol", protocol)?;
            if !manifest.is_empty() {
                let list: Vec<String> = manifest.iter().map(|p| p.display().to_string()).collect();
                cfg.set("manifest", list.join(","))?;
            }
            cfg.set_opt("db_a", db_a)?;
            cfg.set_opt("db_b", db_b)?;
            cfg.set_opt("pretrain_manifest", path_str(pretrain_manifest))?;
            cfg.set_opt("pretrain_epochs", pretrain_epochs)?;
            cfg.set_opt("init", path_str(init))?;
            apply_network(&mut cfg, network)?;
            apply_preset(&mut cfg, preset_args)?;
            commands::eval(&cfg)
        }
        Command::Visualize { checkpoint, image } => {
            cfg.set_opt("checkpoint", path_str(checkpoint))?;
            cfg.set_opt("image", path_str(image))?;
            commands::visualize(&cfg)
        }
    }
}

/// 1 for configuration and input problems, 2 for failures while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<microattn::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
