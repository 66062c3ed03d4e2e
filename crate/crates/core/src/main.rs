use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedcondi::config::{AblationFlags, ExperimentConfig};
use fedcondi::experiment::{self, ablation_combinations};
use fedcondi::{Error, Result};

#[derive(Parser)]
#[command(name = "fedcondi", version, about = "Federated multimodal training with conditional-diffusion imputation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Falls back to FEDCONDI_OUT, then the config value.
    #[arg(long, env = "FEDCONDI_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run {
        #[command(flatten)]
        common: Common,
        /// Sweep every combination of these flags (no_imputation, no_cond).
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
    },
    /// Run every (p_s, p_w) cell and write a combined summary CSV.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        ps: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        pw: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
    },
    /// Feature-reconstruction analysis from a saved checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; defaults to the latest one under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn parse_ablate(flags: &[String]) -> Result<Option<Vec<AblationFlags>>> {
    if flags.is_empty() {
        return Ok(None);
    }
    let (mut ni, mut nc) = (false, false);
    for f in flags {
        match f.trim() {
            "no_imputation" => ni = true,
            "no_cond" => nc = true,
            other => return Err(Error::Config(format!("unknown ablation flag '{other}'"))),
        }
    }
    Ok(Some(ablation_combinations(ni, nc)))
}

fn print_summary(s: &experiment::ExperimentSummary, dir: &Path) {
    println!(
        "{:<24} accuracy {:.4}  macro_f1 {:.4}  frac_l2 {}  frac_cos {}  ({})",
        s.variant,
        s.test.accuracy,
        s.test.macro_f1,
        s.frac_l2.map_or("-".into(), |v| format!("{v:.4}")),
        s.frac_cos.map_or("-".into(), |v| format!("{v:.4}")),
        dir.display()
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { common, ablate } => {
            let (cfg, out) = load(&common)?;
            match parse_ablate(&ablate)? {
                None => {
                    let s = experiment::run_experiment(&cfg, &out)?;
                    print_summary(&s, &out);
                }
                Some(combos) => {
                    for s in experiment::run_ablation_sweep(&cfg, &combos, &out)? {
                        print_summary(&s, &out.join(&s.variant));
                    }
                }
            }
        }
        Command::Grid { common, ps, pw, ablate } => {
            let (cfg, out) = load(&common)?;
            let combos = parse_ablate(&ablate)?.unwrap_or_else(|| vec![cfg.ablation]);
            let all = experiment::run_grid(&cfg, &ps, &pw, &combos, &out)?;
            println!("{} rows written to {}", all.len(), out.join(experiment::GRID_SUMMARY_FILE).display());
        }
        Command::Analyze { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            let ckpt = match checkpoint {
                Some(p) => p,
                None => experiment::latest_checkpoint(&out)?,
            };
            let (l2, cos, n) = experiment::analyze_checkpoint(&cfg, &ckpt, &out.join("analysis"))?;
            println!("{n} samples: frac_l2 {l2:.4}  frac_cos {cos:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
