use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use segboot::config::{RunConfig, OUT_ENV};
use segboot::{pipeline, Error};

const EXIT_USAGE: u8 = 1;
const EXIT_MISSING: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

/// Unsupervised semantic segmentation by clustering pixel embeddings.
#[derive(Parser, Debug)]
#[command(name = "segboot", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Output root (overrides the config file and the environment).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Dotted override, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Print the merged configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic shapes dataset.
    SynthData(SynthArgs),
    /// Contrastive pretraining of the backbone and projector.
    Pretrain,
    /// Cluster global embeddings and assign pseudo labels to pyramid views.
    PseudoLabel,
    /// Per-epoch pixel clustering and training.
    Train {
        /// Continue after the latest checkpoint instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Cluster test pixels with the trained model and write label maps.
    Segment(CrfArgs),
    /// Match clusters to classes and write the metrics report.
    Eval,
    /// Summarize the run.
    Report,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Training images.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct CrfArgs {
    /// Refine with the dense CRF.
    #[arg(long, overrides_with = "no_crf")]
    crf: bool,
    #[arg(long)]
    no_crf: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingArtifact { .. } | Error::Corrupt { .. } => EXIT_MISSING,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn load_config(cli: &Cli) -> segboot::Result<RunConfig> {
    let env_out = std::env::var(OUT_ENV).ok();
    let mut cfg = RunConfig::load(cli.config.as_deref(), env_out.as_deref(), &cli.sets)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Command::SynthData(a) = &cli.command {
        let d = &mut cfg.data;
        d.n_train = a.n.unwrap_or(d.n_train);
        d.n_test = a.n_test.unwrap_or(d.n_test);
        d.size = a.size.unwrap_or(d.size);
        d.classes = a.classes.unwrap_or(d.classes);
        cfg.seed = a.seed.unwrap_or(cfg.seed);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> segboot::Result<()> {
    let cfg = load_config(cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let outcome = match &cli.command {
        Command::SynthData(_) => pipeline::synth_data(&cfg)?,
        Command::Pretrain => pipeline::pretrain(&cfg)?,
        Command::PseudoLabel => pipeline::pseudo_label(&cfg)?,
        Command::Train { resume } => pipeline::train(&cfg, *resume)?,
        Command::Segment(a) => {
            let crf = if a.no_crf {
                Some(false)
            } else if a.crf {
                Some(true)
            } else {
                None
            };
            pipeline::segment(&cfg, crf)?
        }
        Command::Eval => pipeline::eval(&cfg)?,
        Command::Report => pipeline::report(&cfg)?,
    };
    println!("{}", outcome.summary.trim_end());
    println!("wrote {}", outcome.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
