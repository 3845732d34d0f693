//! `bmtraj`: file-based pipeline from lesion volumes to response reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bmtraj::evalstat::{Method, Task};
use bmtraj::resample::ResampleMethod;

use crate::commands::{At, Outcome};
use crate::config::RunConfig;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (config schema 1)");

#[derive(Parser, Debug)]
#[command(name = "bmtraj", version = VERSION, about = "Lesion trajectory curation, response assessment and prediction")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// JSON run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct Inputs {
    #[arg(long)]
    trajectories: Option<PathBuf>,
    #[arg(long)]
    clinical: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate trajectory and clinical tables and write them back normalized.
    Ingest(Inputs),
    /// Apply cohort criteria and swing detection.
    Qc {
        #[command(flatten)]
        inputs: Inputs,
        /// Keep flagged lesions in the output table.
        #[arg(long)]
        include_flagged: bool,
    },
    /// Build trajectories from a directory of `<day>.raw` + `<day>.json` label volumes.
    Track {
        #[arg(long)]
        series: Option<PathBuf>,
        #[arg(long)]
        patient: Option<String>,
    },
    /// Map trajectories onto the t0..t6 grid.
    Resample {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_parser = parse_resample)]
        method: Option<ResampleMethod>,
    },
    /// Per-lesion response categories at t1..t6.
    Classify {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_parser = parse_resample)]
        method: Option<ResampleMethod>,
    },
    /// Category transition counts between consecutive grid points.
    Flows(Inputs),
    /// Fit the trajectory mixture and write assignments and profiles.
    Cluster {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Assemble the design matrix and t6 targets.
    Features {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Fit one model on the whole feature set.
    Train {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Cross-validated AUCs, intervals and pairwise tests.
    Evaluate {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        task: Option<Task>,
        /// Repeatable; `all` selects every method.
        #[arg(long = "method")]
        methods: Vec<String>,
        /// Split lesions without keeping patients together.
        #[arg(long)]
        ungrouped: bool,
    },
    /// Generate a synthetic cohort.
    Synth {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Aggregate flows, cluster profiles and evaluations into one bundle.
    Report {
        #[arg(long)]
        trajectories: Option<PathBuf>,
        /// Repeatable `evaluation.json` path.
        #[arg(long = "evaluation")]
        evaluations: Vec<PathBuf>,
    },
}

fn parse_resample(s: &str) -> Result<ResampleMethod, String> {
    match s {
        "nearest" => Ok(ResampleMethod::Nearest),
        "linear" => Ok(ResampleMethod::Linear),
        "bspline" => Ok(ResampleMethod::Bspline),
        _ => Err(format!("unknown resampling method `{s}` (nearest, linear, bspline)")),
    }
}

fn apply_inputs(cfg: &mut RunConfig, inputs: Inputs) {
    if inputs.trajectories.is_some() {
        cfg.paths.trajectories = inputs.trajectories;
    }
    if inputs.clinical.is_some() {
        cfg.paths.clinical = inputs.clinical;
    }
}

fn stage_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Ingest(_) => "ingest",
        Command::Qc { .. } => "qc",
        Command::Track { .. } => "track",
        Command::Resample { .. } => "resample",
        Command::Classify { .. } => "classify",
        Command::Flows(_) => "flows",
        Command::Cluster { .. } => "cluster",
        Command::Features { .. } => "features",
        Command::Train { .. } => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::Synth { .. } => "synth",
        Command::Report { .. } => "report",
    }
}

fn run(cli: Cli) -> Outcome<()> {
    let stage = stage_name(&cli.command);
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path).at(stage, path.display())?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.global.out {
        cfg.paths.out = Some(out);
    }
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    let run: fn(&RunConfig) -> Outcome<()> = match cli.command {
        Command::Ingest(inputs) => {
            apply_inputs(&mut cfg, inputs);
            commands::ingest
        }
        Command::Qc { inputs, include_flagged } => {
            apply_inputs(&mut cfg, inputs);
            cfg.include_flagged |= include_flagged;
            commands::qc
        }
        Command::Track { series, patient } => {
            cfg.paths.series = series.or(cfg.paths.series);
            if let Some(p) = patient {
                cfg.patient_id = p;
            }
            commands::track
        }
        Command::Resample { inputs, method } => {
            apply_inputs(&mut cfg, inputs);
            cfg.resample = method.unwrap_or(cfg.resample);
            commands::resample_cmd
        }
        Command::Classify { inputs, method } => {
            apply_inputs(&mut cfg, inputs);
            cfg.resample = method.unwrap_or(cfg.resample);
            commands::classify
        }
        Command::Flows(inputs) => {
            apply_inputs(&mut cfg, inputs);
            commands::flows
        }
        Command::Cluster { inputs, k } => {
            apply_inputs(&mut cfg, inputs);
            cfg.gmm.k = k.unwrap_or(cfg.gmm.k);
            commands::cluster
        }
        Command::Features { inputs, horizon } => {
            apply_inputs(&mut cfg, inputs);
            cfg.horizon = horizon.unwrap_or(cfg.horizon);
            commands::features
        }
        Command::Train { features, task, method, horizon } => {
            cfg.paths.features = features.or(cfg.paths.features);
            cfg.task = task.unwrap_or(cfg.task);
            if let Some(m) = method {
                cfg.methods = vec![m];
            }
            cfg.horizon = horizon.unwrap_or(cfg.horizon);
            commands::train
        }
        Command::Evaluate { features, task, methods, ungrouped } => {
            cfg.paths.features = features.or(cfg.paths.features);
            cfg.task = task.unwrap_or(cfg.task);
            if methods.iter().any(|m| m == "all") {
                cfg.methods = Method::ALL.to_vec();
            } else if !methods.is_empty() {
                cfg.methods = methods.iter().map(|m| m.parse()).collect::<Result<_, _>>().at(stage, "--method")?;
                cfg.methods.sort();
                cfg.methods.dedup();
            }
            if ungrouped {
                cfg.protocol.grouped = false;
            }
            commands::evaluate
        }
        Command::Synth { n } => {
            cfg.synth.n_lesions = n.unwrap_or(cfg.synth.n_lesions);
            commands::synth
        }
        Command::Report { trajectories, evaluations } => {
            cfg.paths.trajectories = trajectories.or(cfg.paths.trajectories);
            if !evaluations.is_empty() {
                cfg.paths.evaluations = evaluations;
            }
            commands::report
        }
    };
    cfg.protocol.threads = cli.global.threads.unwrap_or(0);
    cfg.materialize().at(stage, "configuration")?;
    run(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_names_config_schema() {
        assert!(VERSION.ends_with(&format!("(config schema {})", config::SCHEMA_VERSION)));
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
