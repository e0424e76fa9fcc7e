use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde::Serialize;

use promm::checks::{self, NamedCheck};
use promm::gradcheck::GradCheckConfig;
use promm::runner::{self, suites, RunConfig};
use promm::{data, Error, Result};

#[derive(Parser)]
#[command(name = "promm", version, about = "Prototype-guided semi-supervised domain adaptation on synthetic shifts")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run seed; also seeds the scenario.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scenario and write it as CSV.
    Generate {
        /// Destination file; defaults to `<out>/split.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train one model.
    Train,
    /// Evaluate a checkpoint on the configured target split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Loss-term and prototype-branch ablation.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Restrict to these member names.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Sweep the lower pseudo-label threshold.
    SweepTau2 {
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.3,0.4,0.5,0.6")]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Sweep the labeled target shots per class.
    SweepShots {
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
        shots: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        /// Number of random problems.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.overrides)?;
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(value: &T, path: &std::path::Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    std::fs::write(path, text + "\n")?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Generate { output } => {
            let split = runner::load_split(&cfg)?;
            let path = output.unwrap_or_else(|| cfg.out.join("split.csv"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            data::write_csv(&split, &path)?;
            println!("{}", path.display());
        }
        Command::Train => {
            let outcome = runner::train(&cfg)?;
            let last = outcome.final_record();
            info!("final overall_acc {:.4} mca {:.4}", last.overall_acc, last.mca);
            println!("{}", outcome.out_dir.display());
        }
        Command::Eval { checkpoint } => {
            let split = runner::load_split(&cfg)?;
            let report = runner::evaluate(&checkpoint, &split)?;
            write_json(&report, &cfg.out.join("eval.json"))?;
        }
        Command::Ablate { seeds, only } => {
            let result = if only.is_empty() {
                suites::ablation_suite(&cfg, &seeds)?
            } else {
                let masks: Vec<_> = suites::term_masks()
                    .into_iter()
                    .chain(suites::prototype_masks())
                    .filter(|(name, _)| only.contains(name))
                    .collect();
                if masks.len() != only.len() {
                    return Err(Error::Config(format!("unknown ablation member in {only:?}")));
                }
                suites::ablation_subset(&cfg, masks, &seeds)?
            };
            suites::write_suite(&result, &cfg.out)?;
            println!("{}", cfg.out.display());
        }
        Command::SweepTau2 { values, seeds } => {
            let sweep = suites::tau2_sweep(&cfg, &values, &seeds)?;
            suites::write_suite(&sweep.result, &cfg.out)?;
            write_json(&sweep, &cfg.out.join("tau2_sweep.json"))?;
        }
        Command::SweepShots { shots, seeds } => {
            let sweep = suites::shots_sweep(&cfg, &shots, &seeds)?;
            suites::write_suite(&sweep.result, &cfg.out)?;
            write_json(&sweep, &cfg.out.join("shots_sweep.json"))?;
        }
        Command::Gradcheck { seeds } => {
            let gc = GradCheckConfig::default();
            let mut failed: Vec<(u64, NamedCheck)> = Vec::new();
            let mut total = 0;
            for seed in 0..seeds {
                let all = checks::loss_checks(seed, &gc)?.into_iter().chain(checks::objective_checks(seed, &gc)?);
                for c in all {
                    total += 1;
                    if !c.report.passed {
                        failed.push((seed, c));
                    }
                }
            }
            for (seed, c) in &failed {
                error!("seed {seed} {}: max relative error {:.3e}", c.name, c.report.max_rel_error);
            }
            println!("{} of {total} gradient checks passed", total - failed.len());
            if !failed.is_empty() {
                return Err(Error::NonFinite("gradient check"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
