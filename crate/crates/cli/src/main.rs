mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use crate::config::RunConfig;

/// Head detection on 16-bit depth images.
#[derive(Debug, Parser)]
#[command(name = "depthhead", version, arg_required_else_help = true)]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides both the training and the corpus seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the grid stride.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    k: Option<u64>,
    /// Overrides the evaluation overlap threshold.
    #[arg(long, global = true, value_name = "X")]
    tau: Option<f64>,
    /// Output file or directory of the command.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Also write frames with detection rectangles drawn in.
    #[arg(long, global = true)]
    viz: bool,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render an annotated synthetic corpus.
    GenSynth {
        /// Number of frames.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: Option<u64>,
    },
    /// Train the classifier on an annotated corpus.
    Train {
        /// Corpus directory holding annotations.json, or the annotation file itself.
        data: Option<PathBuf>,
    },
    /// Detect heads in one PGM frame or every PGM in a directory.
    Detect {
        #[arg(long)]
        model: Option<PathBuf>,
        input: PathBuf,
    },
    /// Score a detections file against annotations.
    Eval {
        detections: PathBuf,
        /// Corpus directory holding annotations.json, or the annotation file itself.
        annotations: PathBuf,
    },
    /// Detection rate, IoU and fps for a list of grid strides.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated strides, e.g. 3,9,21,45.
        #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u64).range(1..))]
        ks: Vec<u64>,
        /// Corpus directory holding annotations.json, or the annotation file itself.
        data: Option<PathBuf>,
    },
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(k) = cli.k {
        cfg.detector.extraction.k = k as usize;
    }
    if let Some(tau) = cli.tau {
        cfg.eval.tau = tau;
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("DEPTHHEAD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .with_context(|| format!("DEPTHHEAD_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = effective_config(&cli)?;
    if cli.dump_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let out = cli.out.as_deref();
    match cli.command {
        None => anyhow::bail!("no command given; see --help"),
        Some(Command::GenSynth { count }) => commands::gen_synth(&cfg, out, count.map(|c| c as usize)),
        Some(Command::Train { data }) => commands::train(&cfg, data.as_deref(), out),
        Some(Command::Detect { model, input }) => {
            commands::detect(&cfg, model.as_deref(), &input, out, cli.viz)
        }
        Some(Command::Eval {
            detections,
            annotations,
        }) => commands::eval(&cfg, &detections, &annotations, out),
        Some(Command::Bench { model, ks, data }) => {
            let ks: Vec<usize> = ks.into_iter().map(|k| k as usize).collect();
            commands::bench(&cfg, model.as_deref(), data.as_deref(), &ks, out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from(["depthhead", "--seed", "7", "--k", "21", "--tau", "0.25", "--dump-config"]);
        let cfg = effective_config(&cli).unwrap();
        assert_eq!((cfg.train.seed, cfg.synth.seed), (7, 7));
        assert_eq!(cfg.detector.extraction.k, 21);
        assert_eq!(cfg.eval.tau, 0.25);
    }

    #[test]
    fn zero_count_is_a_usage_error() {
        let err = Cli::try_parse_from(["depthhead", "gen-synth", "--count", "0"]).unwrap_err();
        assert_eq!(err.kind(), clap::error::ErrorKind::ValueValidation);
    }

    #[test]
    fn bench_strides_split_on_commas() {
        let cli = Cli::parse_from(["depthhead", "bench", "--ks", "3,9,21,45", "data"]);
        match cli.command {
            Some(Command::Bench { ks, .. }) => assert_eq!(ks, vec![3, 9, 21, 45]),
            other => panic!("{other:?}"),
        }
    }
}
