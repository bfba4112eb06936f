use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use asda::config::{ExperimentConfig, KEYS};
use asda::evaluation::Setup;
use asda::harness::{self, AblationAxis, EvalMode};

#[derive(Parser)]
#[command(name = "asda", version, about = "Adversarial soft-detection aggregation for image retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Starting preset: paper, desk or tiny.
    #[arg(long, default_value = "paper")]
    preset: String,
    /// Config file of `key = value` lines, applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: KeyFlags,
    /// Print the valid config keys and exit.
    #[arg(long)]
    list_keys: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            for (i, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected `key = value`", path.display(), i + 1))?;
                cfg.set(k.trim(), v).with_context(|| format!("{}:{}", path.display(), i + 1))?;
            }
        }
        for (k, v) in &self.overrides.values {
            cfg.set(k, v).with_context(|| format!("--{k} {v}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One `--<key> <value>` flag per config key, applied last.
#[derive(Clone, Debug, Default)]
struct KeyFlags {
    values: Vec<(String, String)>,
}

impl clap::FromArgMatches for KeyFlags {
    fn from_arg_matches(m: &clap::ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut f = KeyFlags::default();
        f.update_from_arg_matches(m)?;
        Ok(f)
    }

    fn update_from_arg_matches(&mut self, m: &clap::ArgMatches) -> std::result::Result<(), clap::Error> {
        for k in KEYS {
            if let Some(v) = m.get_one::<String>(k) {
                self.values.push((k.to_string(), v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for KeyFlags {
    fn augment_args(cmd: clap::Command) -> clap::Command {
        KEYS.iter().fold(cmd, |cmd, k| {
            cmd.arg(
                clap::Arg::new(*k)
                    .long(*k)
                    .value_name("VALUE")
                    .help_heading("Config keys")
                    .help(format!("Override config key `{k}`")),
            )
        })
    }

    fn augment_args_for_update(cmd: clap::Command) -> clap::Command {
        Self::augment_args(cmd)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the synthetic dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from this checkpoint's epoch counter.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report held-out mAP of a checkpoint (random init without one), or of
    /// precomputed descriptors with --queries/--database/--groundtruth.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// E, M, H or custom.
        #[arg(long, default_value = "custom")]
        setup: String,
        /// Comma-separated subset of SS, MS, SS+LW, MS+LW.
        #[arg(long, default_value = "SS,MS+LW")]
        modes: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, requires_all = ["database", "groundtruth"])]
        queries: Option<PathBuf>,
        #[arg(long)]
        database: Option<PathBuf>,
        #[arg(long)]
        groundtruth: Option<PathBuf>,
    },
    /// Sweep one ablation axis: levels, dim, proposal, pooling or postprocess.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Describe one image or ASDAFM1 feature map into a descriptor file
    /// (.csv for text, anything else binary ASDADSC1).
    Describe {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        multiscale: bool,
        /// Apply the checkpoint's learned whitening.
        #[arg(long)]
        whiten: bool,
    },
    /// Write the synthetic dataset as PPM images with manifest and groundtruth.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
}

fn config_of(cmd: &Command) -> &ConfigArgs {
    match cmd {
        Command::Train { config, .. }
        | Command::Eval { config, .. }
        | Command::Ablate { config, .. }
        | Command::Describe { config, .. }
        | Command::GenData { config, .. } => config,
    }
}

fn run(cli: Cli) -> Result<()> {
    if config_of(&cli.command).list_keys {
        let defaults = ExperimentConfig::preset(&config_of(&cli.command).preset)?;
        for k in KEYS {
            println!("{k} = {}", defaults.get(k)?);
        }
        return Ok(());
    }
    let cfg = config_of(&cli.command).resolve()?;
    match &cli.command {
        Command::Train { out, resume, .. } => {
            let outcome = harness::run_train(&cfg, out, resume.as_deref())?;
            for m in &outcome.metrics {
                println!("{}", m.csv_row());
            }
            println!("checkpoint: {}", out.join(harness::CHECKPOINT_FILE).display());
        }
        Command::Eval {
            checkpoint,
            setup,
            modes,
            out,
            queries,
            database,
            groundtruth,
            ..
        } => {
            let setup: Setup = setup.parse()?;
            if let (Some(q), Some(db), Some(gt)) = (queries, database, groundtruth) {
                let q = harness::load_descriptor_dir(q)?;
                let db = harness::load_descriptor_dir(db)?;
                let text = std::fs::read_to_string(gt).with_context(|| format!("reading {}", gt.display()))?;
                let (map, n) = harness::evaluate_descriptors(&q, &db, &text, setup)?;
                println!("setup,map,queries\n{setup},{map:?},{n}");
                return Ok(());
            }
            let modes = modes.split(',').map(str::parse).collect::<asda::Result<Vec<EvalMode>>>()?;
            if modes.is_empty() {
                bail!("no evaluation modes given");
            }
            let report = harness::run_eval(&cfg, checkpoint.as_deref(), setup, &modes, out.as_deref())?;
            print!("{}", report.to_csv());
        }
        Command::Ablate { axis, out, .. } => {
            let axis: AblationAxis = axis.parse()?;
            let table = harness::run_ablation(&cfg, axis, Some(out))?;
            print!("{}", table.to_csv());
        }
        Command::Describe {
            checkpoint,
            input,
            output,
            multiscale,
            whiten,
            ..
        } => {
            let (model, whitening) = harness::load_model(&cfg, checkpoint.as_deref())?;
            if *whiten && whitening.is_none() {
                bail!("--whiten needs a checkpoint that carries a learned whitening");
            }
            let w = if *whiten { whitening.as_ref() } else { None };
            let d = harness::describe_file(&cfg, &model, w, input, *multiscale)?;
            d.save(output)?;
            println!("{}-d descriptor written to {}", d.dim(), output.display());
        }
        Command::GenData { out, .. } => {
            let data = harness::generate_data(&cfg, out)?;
            println!("{} images written to {}", data.dataset.views.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
