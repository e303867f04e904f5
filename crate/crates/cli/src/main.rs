//! `jslds`: train, evaluate and reverse-engineer JSLDS co-trained RNNs.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};
use commands::{AnalysisKind, AnalyzeArgs, CliError, EvalArgs, Ui};
use config::Overrides;
use jslds_core::analyze::{FixedPointOptions, SLOW_TOL};
use manifest::RunManifest;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "jslds", version, about = "Co-train RNNs with Jacobian switching linear dynamical systems and analyze them")]
struct Cli {
    /// Worker threads for multi-seed runs (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct FpFlags {
    /// Speed threshold a fixed/slow point must reach.
    #[arg(long, default_value_t = SLOW_TOL)]
    tol: f64,
    /// Adam iterations per candidate.
    #[arg(long, default_value_t = 1000)]
    fp_iters: usize,
}

impl FpFlags {
    fn options(&self) -> FixedPointOptions {
        FixedPointOptions { tol: self.tol, max_iters: self.fp_iters, ..FixedPointOptions::default() }
    }

    fn argv(&self) -> Vec<String> {
        vec!["--tol".into(), format!("{:?}", self.tol), "--fp-iters".into(), self.fp_iters.to_string()]
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relative errors of the JSLDS and the standard fixed-point method on a held-out batch.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Separately trained RNN for the standard method (default: the checkpoint's own RNN).
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Task config overriding the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        holdout_seed: Option<u64>,
        #[command(flatten)]
        fp: FpFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Numerical fixed/slow points seeded from held-out states.
    FixedPoints {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Static input as comma-separated values (default: each trial's own u*).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        u_star: Option<Vec<f64>>,
        #[arg(long)]
        holdout_seed: Option<u64>,
        #[command(flatten)]
        fp: FpFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analyses at the held-out expansion points or of the held-out trajectories.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: AnalysisKind,
        #[arg(long)]
        holdout_seed: Option<u64>,
        /// Eigenvectors reported per point (eigen, selection).
        #[arg(long, default_value_t = 3)]
        top: usize,
        /// Principal components (pca).
        #[arg(long, default_value_t = 3)]
        components: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Independent runs over consecutive seeds with mean/std aggregates.
    Multiseed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        /// First seed (default: the config's seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate a run from its manifest and compare artifact hashes.
    Replay {
        /// A manifest.json or the directory holding it.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn abs(p: &Path) -> Result<String, CliError> {
    std::fs::canonicalize(p)
        .map(|a| a.to_string_lossy().into_owned())
        .map_err(|source| CliError::Io { context: format!("cannot resolve {}", p.display()), source })
}

fn push_opt<T: ToString>(argv: &mut Vec<String>, flag: &str, v: &Option<T>) {
    if let Some(v) = v {
        argv.push(flag.into());
        argv.push(v.to_string());
    }
}

fn dispatch(command: Command, ui: Ui) -> Result<RunManifest, CliError> {
    match command {
        Command::Train { config, seed, iterations, out } => commands::train(&config, &Overrides { seed, iterations }, &out, ui),
        Command::Eval { checkpoint, baseline, config, holdout_seed, fp, out } => {
            let mut argv = vec!["eval".into(), "--checkpoint".into(), abs(&checkpoint)?];
            if let Some(b) = &baseline {
                argv.extend(["--baseline".into(), abs(b)?]);
            }
            if let Some(c) = &config {
                argv.extend(["--config".into(), abs(c)?]);
            }
            push_opt(&mut argv, "--holdout-seed", &holdout_seed);
            argv.extend(fp.argv());
            let args = EvalArgs { checkpoint: &checkpoint, baseline: baseline.as_deref(), config: config.as_deref(), holdout_seed, fp: fp.options() };
            commands::eval(&args, argv, &out, ui)
        }
        Command::FixedPoints { checkpoint, u_star, holdout_seed, fp, out } => {
            let mut argv = vec!["fixed-points".into(), "--checkpoint".into(), abs(&checkpoint)?];
            if let Some(u) = &u_star {
                argv.push(format!("--u-star={}", u.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")));
            }
            push_opt(&mut argv, "--holdout-seed", &holdout_seed);
            argv.extend(fp.argv());
            commands::fixed_points(&checkpoint, u_star.as_deref(), holdout_seed, fp.options(), argv, &out, ui)
        }
        Command::Analyze { checkpoint, kind, holdout_seed, top, components, out } => {
            let kind_name = clap::ValueEnum::to_possible_value(&kind).expect("no skipped variants").get_name().to_string();
            let mut argv = vec!["analyze".into(), "--checkpoint".into(), abs(&checkpoint)?, "--kind".into(), kind_name];
            push_opt(&mut argv, "--holdout-seed", &holdout_seed);
            argv.extend(["--top".into(), top.to_string(), "--components".into(), components.to_string()]);
            let args = AnalyzeArgs { checkpoint: &checkpoint, kind, holdout_seed, top, components };
            commands::analyze(&args, argv, &out, ui)
        }
        Command::Multiseed { config, n, seed, iterations, out } => commands::multiseed(&config, &Overrides { seed, iterations }, n, &out, ui),
        Command::Replay { manifest, out } => {
            let run = |argv: Vec<String>, out: &Path| -> Result<RunManifest, CliError> {
                let mut full = vec!["jslds".to_string()];
                full.extend(argv);
                full.extend(["--out".to_string(), out.to_string_lossy().into_owned()]);
                let cli = Cli::try_parse_from(full).map_err(|e| CliError::Usage(format!("manifest arguments do not parse: {e}")))?;
                if matches!(cli.command, Command::Replay { .. }) {
                    return Err(CliError::Usage("a manifest cannot replay another replay".into()));
                }
                dispatch(cli.command, ui)
            };
            let r = commands::replay(&manifest, &out, &run)?;
            if r.mismatched.is_empty() {
                ui.say(format!("replay matched all {} artifacts in {}", r.compared, r.dir.display()));
                RunManifest::load(&r.dir.join(manifest::MANIFEST_FILE)).map_err(CliError::Usage)
            } else {
                Err(CliError::Usage(format!("replay differs from the manifest in: {}", r.mismatched.join(", "))))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let ui = Ui { quiet: cli.quiet };
    match dispatch(cli.command, ui) {
        Ok(m) => {
            if !ui.quiet {
                for a in &m.artifacts {
                    eprintln!("  wrote {} ({} bytes)", a.path, a.bytes);
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
