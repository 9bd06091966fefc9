//! `storm`: data generation, training, evaluation and diagnostics.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

mod commands;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use config::{load_config, Overrides, RunConfig, StageSelect};

const OUTPUTS_FILE: &str = "outputs.json";

#[derive(Parser)]
#[command(name = "storm", version, about = "Bounded latent-rollout video QA on a synthetic task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset.
    GenData,
    /// Run Stage I, Stage II or both.
    Train,
    /// Held-out accuracy of a checkpoint.
    Eval,
    /// Write per-sample decoding traces.
    Rollout,
    /// Same-video retrieval probe over latent, text and random representations.
    Probe,
    /// Retrieval with single slots, dropped slots and reversed order.
    Ablate,
    /// 2-D PCA of frame, keyframe and latent embeddings.
    ExportEmbed,
    /// Decode-pass accounting: latent rollout against simulated tool calls.
    Bench,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Rollout => "rollout",
            Command::Probe => "probe",
            Command::Ablate => "ablate",
            Command::ExportEmbed => "export-embed",
            Command::Bench => "bench",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Args)]
struct Flags {
    /// JSON run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: $STORM_OUT_DIR/<command>, else runs/<command>).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of samples to generate.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Latent budget K.
    #[arg(long, global = true)]
    latent_k: Option<usize>,
    /// Stage I latent alignment weight.
    #[arg(long, global = true, allow_negative_numbers = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true, value_enum)]
    stage: Option<StageArg>,
    /// Optimizer steps per stage (default: one epoch).
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    ckpt: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// train, heldout or all.
    #[arg(long, global = true)]
    split: Option<String>,
    /// Thought-video sub-steps per frame interval.
    #[arg(long, global = true)]
    density: Option<usize>,
    #[arg(long, global = true, value_enum)]
    force_latent_entry: Option<OnOff>,
    /// Extra prefills per item in the simulated tool-call arm.
    #[arg(long, global = true)]
    extra_passes: Option<usize>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            out_dir: self.out_dir.clone(),
            seed: self.seed,
            n: self.n,
            latent_k: self.latent_k,
            lambda: self.lambda,
            lr: self.lr,
            stage: self.stage.map(|s| match s {
                StageArg::One => StageSelect::One,
                StageArg::Two => StageSelect::Two,
                StageArg::Both => StageSelect::Both,
            }),
            steps: self.steps,
            ckpt: self.ckpt.clone(),
            data: self.data.clone(),
            split: self.split.clone(),
            density: self.density,
            force_latent_entry: self.force_latent_entry.map(|v| matches!(v, OnOff::On)),
            extra_passes: self.extra_passes,
        }
    }
}

fn output_dir(cfg: &RunConfig, command: Command) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| {
        let root = std::env::var_os("STORM_OUT_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command.name())
    })
}

/// Lists every produced file relative to `out`, with its size.
fn write_outputs(out: &Path, command: Command, files: &[PathBuf]) -> Result<()> {
    let mut entries = Vec::new();
    for f in files {
        let bytes = fs::metadata(f).with_context(|| format!("stat {}", f.display()))?.len();
        let rel = f.strip_prefix(out).unwrap_or(f);
        entries.push(json!({ "path": rel.display().to_string(), "bytes": bytes }));
    }
    let doc = json!({ "command": command.name(), "files": entries });
    let path = out.join(OUTPUTS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    let out = output_dir(cfg, command);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut files = match command {
        Command::GenData => commands::gen_data(cfg, &out),
        Command::Train => commands::train(cfg, &out),
        Command::Eval => commands::eval(cfg, &out),
        Command::Rollout => commands::rollout_cmd(cfg, &out),
        Command::Probe => commands::probe(cfg, &out),
        Command::Ablate => commands::ablate(cfg, &out),
        Command::ExportEmbed => commands::export_embed(cfg, &out),
        Command::Bench => commands::bench(cfg, &out),
    }?;
    files.push(cfg.write_copy(&out)?);
    write_outputs(&out, command, &files)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load_config(cli.flags.config.as_deref(), &cli.flags.overrides()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<commands::UsageError>() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
