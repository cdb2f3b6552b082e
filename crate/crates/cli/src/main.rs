//! `cad`: synthesize classroom datasets, train and evaluate activity
//! detectors, predict timelines and verify gradients.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use cad_core::data::SplitTag;
use cad_core::eval::Aggregation;
use cad_core::model::Architecture;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "cad", version, about = "Classroom activity detection from speaker and sentence embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for generation, initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with [generator], [model] and [train] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset directory.
        #[arg(long, required_unless_present = "dump_config")]
        out: Option<PathBuf>,
        #[arg(long)]
        recordings: Option<usize>,
        #[arg(long)]
        mean_segments: Option<usize>,
        #[arg(long)]
        d_a: Option<usize>,
        #[arg(long)]
        d_t: Option<usize>,
    },
    /// Train a model on the train split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory.
        #[arg(long, required_unless_present = "dump_config")]
        data: Option<PathBuf>,
        /// Run directory for checkpoint, history, metrics and run manifest.
        #[arg(long, required_unless_present = "dump_config")]
        out: Option<PathBuf>,
        #[arg(long, value_parser = parse_arch)]
        arch: Option<Architecture>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Split recordings into windows of at most this many segments.
        #[arg(long)]
        max_seq_len: Option<usize>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Headline numbers pooled over all segments instead of averaged per recording.
        #[arg(long)]
        pooled: bool,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label one recording and emit its activity timeline.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Recording JSON file.
        #[arg(long)]
        recording: PathBuf,
        /// Timeline JSON output (standard output when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients for every architecture.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 6)]
        segments: usize,
        /// Also write the per-parameter report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl From<SplitArg> for SplitTag {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitTag::Train,
            SplitArg::Test => SplitTag::Test,
            SplitArg::All => SplitTag::All,
        }
    }
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse().map_err(|e: cad_core::Error| e.to_string())
}

fn setup(common: &Common) -> Result<(), CliError> {
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(())
}

fn load_config(args: &ConfigArgs, common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn dump(cfg: &RunConfig) {
    print!("{}", cfg.to_toml());
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            common,
            cfg,
            out,
            recordings,
            mean_segments,
            d_a,
            d_t,
        } => {
            setup(&common)?;
            let mut run_cfg = load_config(&cfg, &common)?;
            let g = &mut run_cfg.generator;
            g.n_recordings = recordings.unwrap_or(g.n_recordings);
            g.mean_segments = mean_segments.unwrap_or(g.mean_segments);
            g.d_a = d_a.unwrap_or(g.d_a);
            g.d_t = d_t.unwrap_or(g.d_t);
            if cfg.dump_config {
                dump(&run_cfg);
                return Ok(());
            }
            run_cfg.generator.validate()?;
            commands::synth(&run_cfg, &out.expect("required by clap"))
        }
        Command::Train {
            common,
            cfg,
            data,
            out,
            arch,
            beta,
            epochs,
            lr,
            batch_size,
            max_seq_len,
        } => {
            setup(&common)?;
            let mut run_cfg = load_config(&cfg, &common)?;
            let (m, t) = (&mut run_cfg.model, &mut run_cfg.train);
            m.architecture = arch.unwrap_or(m.architecture);
            m.beta = beta.unwrap_or(m.beta);
            t.epochs = epochs.unwrap_or(t.epochs);
            t.learning_rate = lr.unwrap_or(t.learning_rate);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.max_sequence_length = max_seq_len.or(t.max_sequence_length);
            if cfg.dump_config {
                dump(&run_cfg);
                return Ok(());
            }
            commands::train(run_cfg, &data.expect("required by clap"), &out.expect("required by clap"))
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            pooled,
            out,
        } => {
            setup(&common)?;
            let aggregation = if pooled { Aggregation::Pooled } else { Aggregation::Macro };
            commands::eval(&checkpoint, &data, split.into(), aggregation, out.as_deref())
        }
        Command::Predict {
            common,
            checkpoint,
            recording,
            out,
        } => {
            setup(&common)?;
            commands::predict(&checkpoint, &recording, out.as_deref())
        }
        Command::Gradcheck {
            common,
            cfg,
            tol,
            step,
            segments,
            out,
        } => {
            setup(&common)?;
            let mut run_cfg = load_config(&cfg, &common)?;
            if cfg.config.is_none() {
                run_cfg.model = commands::gradcheck_config();
                if let Some(seed) = common.seed {
                    run_cfg.model.seed = seed;
                }
            }
            if cfg.dump_config {
                dump(&run_cfg);
                return Ok(());
            }
            run_cfg.model.validate()?;
            commands::gradcheck(&run_cfg.model, segments, run_cfg.model.seed, step, tol, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
