use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use morphlab::commands::{
    cmd_evaluate_detectability, cmd_evaluate_vulnerability, cmd_morph, cmd_report, cmd_synth_data, cmd_train,
    TrainTarget,
};
use morphlab::experiment::ExperimentConfig;
use morphlab::morph::MorphVariant;

#[derive(Parser)]
#[command(name = "morphlab", version, about = "Toy identity-morphing lab: generate morphs and measure attack success")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; overrides `out_dir` from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set denoiser.train.steps=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic identity dataset.
    SynthData,
    /// Train embedders, the denoiser and/or the detector.
    Train {
        #[arg(value_enum, default_value = "all")]
        target: Target,
    },
    /// Generate morphs.
    Morph(MorphArgs),
    /// Score morphs against embedders or a detector.
    Evaluate {
        #[arg(value_enum, default_value = "all")]
        mode: Mode,
    },
    /// Print the stored report tables.
    Report,
    /// Write the effective config as TOML to stdout.
    ShowConfig,
}

#[derive(Args)]
struct MorphArgs {
    /// Variant to generate; repeat for several. Defaults to the config's list.
    #[arg(long)]
    variant: Vec<MorphVariant>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    omega: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pairs_per_group: Option<usize>,
    /// Explicit subject pair `idA:idB`, e.g. `id0003:id0017`. Repeatable.
    #[arg(long = "pair")]
    pairs: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Embedder,
    Denoiser,
    Mad,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Vulnerability,
    Detectability,
    All,
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        config.set_override(o)?;
    }
    if let Some(dir) = &common.out_dir {
        config.out_dir = dir.clone();
    }
    Ok(config)
}

fn apply_morph_args(config: &mut ExperimentConfig, args: &MorphArgs) -> anyhow::Result<Option<Vec<(String, String)>>> {
    let d = &mut config.morph.defaults;
    if let Some(v) = args.lambda {
        d.lambda = v;
    }
    if let Some(v) = args.omega {
        d.omega = v;
    }
    if let Some(v) = args.steps {
        d.num_inference_steps = v;
    }
    if let Some(v) = args.seed {
        d.seed = v;
    }
    if let Some(v) = args.pairs_per_group {
        config.morph.pairs_per_group = v;
    }
    if !args.variant.is_empty() {
        config.morph.variants = args.variant.clone();
    }
    config.validate()?;
    if args.pairs.is_empty() {
        return Ok(None);
    }
    let pairs = args
        .pairs
        .iter()
        .map(|p| match p.split_once(':') {
            Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_owned(), b.to_owned())),
            _ => bail!("pair {p:?} is not idA:idB"),
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Some(pairs))
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut config = load_config(&cli.common)?;
    match cli.command {
        Command::ShowConfig => print!("{}", config.to_toml()?),
        Command::SynthData => {
            let s = cmd_synth_data(&config)?;
            println!("{} identities, {} images -> {}", s.n_identities, s.n_images, config.out_dir.display());
        }
        Command::Train { target } => {
            let targets: &[TrainTarget] = match target {
                Target::Embedder => &[TrainTarget::Embedder],
                Target::Denoiser => &[TrainTarget::Denoiser],
                Target::Mad => &[TrainTarget::Mad],
                Target::All => &[TrainTarget::Embedder, TrainTarget::Denoiser, TrainTarget::Mad],
            };
            for &t in targets {
                let metrics = cmd_train(&config, t)?;
                log::info!("trained {t:?}");
                log::debug!("{metrics}");
            }
            println!("checkpoints in {}", config.out_dir.join("checkpoints").display());
        }
        Command::Morph(args) => {
            let pairs = apply_morph_args(&mut config, &args)?;
            let records = cmd_morph(&config, pairs.as_deref())?;
            println!("{} morphs -> {}", records.len(), config.out_dir.join("morphs").display());
        }
        Command::Evaluate { mode } => {
            if matches!(mode, Mode::Vulnerability | Mode::All) {
                println!("{}", cmd_evaluate_vulnerability(&config)?.to_table());
            }
            if matches!(mode, Mode::Detectability | Mode::All) {
                cmd_evaluate_detectability(&config)?;
                print!("{}", cmd_report(&config)?.split("Detectability\n").nth(1).unwrap_or_default());
            }
        }
        Command::Report => print!("{}", cmd_report(&config)?),
    }
    Ok(())
}
