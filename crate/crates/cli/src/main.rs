//! Command-line experiment driver.
//!
//! Every verb resolves one experiment configuration — from `--config`, or
//! from a built-in `--profile` — applies the `--seed`/`--out` overrides,
//! and runs a study from the library's experiment layer. All results land
//! as deterministic artifacts under the output directory; stdout carries a
//! short human-readable summary only.
//!
//! Exit codes: `0` success, `2` configuration or argument error,
//! `3` training divergence, `1` anything unexpected.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ldbp_pmd::experiment::{
    self, ExperimentConfig, load_cells, run_baseline_suite, run_baselines,
    run_filter_length_sweep, run_initialization_study, run_pmd_swap_study, run_power_sweep,
};
use ldbp_pmd::model::RotationInit;
use ldbp_pmd::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    /// Two 100 km spans, 200 forward steps/span, 5 realizations, 300
    /// iterations — the full study suite finishes in well under an hour.
    Desk,
    /// Ten 100 km spans, 1000 forward steps/span, 40 realizations, 1500
    /// iterations — ships unvalidated; expect long runtimes.
    Paper,
}

#[derive(Debug, Parser)]
#[command(
    name = "ldbp-pmd",
    version,
    about = "Fiber-optic transmission laboratory: split-step forward channel with \
             distributed polarization effects, and trainable time-domain \
             backpropagation receivers",
    after_help = "Exit codes: 0 success, 2 configuration error, 3 training divergence, \
                  1 unexpected failure."
)]
struct Cli {
    /// TOML experiment configuration (overrides --profile)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Built-in configuration profile used when no --config is given
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,

    /// Master seed; every random stream of the run derives from it
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads (default: one per logical core)
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Train the dispersion-only stage on the polarization-free link
    Pretrain,
    /// Train every configured (parameterization x init x realization) cell
    Train,
    /// Evaluate the non-learned reference receivers
    Baselines {
        /// Link realization to evaluate (default: all configured)
        #[arg(long)]
        realization: Option<usize>,
    },
    /// Evaluate the trained models across launch powers without retraining
    SweepPower,
    /// Retrain the structured parameterization at several delay-filter lengths
    SweepFilterLength {
        /// Delay filter lengths (taps) to train
        #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5, 7, 9])]
        filter_lengths: Vec<usize>,
    },
    /// Train the grid and compare rotation initializations
    InitStudy,
    /// Retrain converged models on a different link realization
    PmdSwap,
    /// Summarize the artifacts already in the output directory
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?,
        None => {
            let seed = cli.seed.unwrap_or(1);
            match cli.profile {
                Profile::Desk => ExperimentConfig::desk(seed, PathBuf::from("runs/desk")),
                Profile::Paper => ExperimentConfig::paper(seed, PathBuf::from("runs/paper")),
            }
        }
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::config("--workers must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    }
    let cfg = resolve_config(&cli)?;

    match cli.verb {
        Verb::Pretrain => {
            experiment::ensure_pretrained(&cfg)?;
            println!("pretrained model: {}", cfg.pretrain_checkpoint_path().display());
            println!("learning curve:   {}", cfg.pretrain_curve_path().display());
        }
        Verb::Train => {
            let results = run_initialization_study(&cfg)?;
            print!("{}", results.to_csv_string());
            println!("summary: {}", cfg.results_path().display());
            if results.n_diverged() > 0 {
                println!("note: {} cell(s) diverged and were excluded", results.n_diverged());
            }
        }
        Verb::Baselines { realization } => {
            match realization {
                Some(r) => {
                    let report = run_baselines(&cfg, r)?;
                    for row in &report.rows {
                        println!(
                            "r{} {:>20} {:>6} dBm  {:.2} dB",
                            row.realization, row.baseline, row.power_dbm, row.eff_snr_db
                        );
                    }
                }
                None => {
                    run_baseline_suite(&cfg)?;
                    println!("baselines: {}", cfg.baselines_path().display());
                }
            }
        }
        Verb::SweepPower => {
            let cells = load_cells(&cfg)?;
            run_power_sweep(&cfg, &cells)?;
            println!("power sweep: {}", cfg.power_sweep_path().display());
        }
        Verb::SweepFilterLength { filter_lengths } => {
            let sweep = run_filter_length_sweep(&cfg, &filter_lengths)?;
            for row in &sweep.rows {
                println!(
                    "F={} peak mean SNR {:.2} dB (std {:.2} dB, {} diverged)",
                    row.dgd_filter_len, row.peak_mean_snr_db, row.std_at_peak_db, row.n_diverged
                );
            }
            println!("summary: {}", cfg.filter_summary_path().display());
        }
        Verb::InitStudy => {
            let results = run_initialization_study(&cfg)?;
            for &p in &cfg.parameterizations {
                let peak = |init: RotationInit| {
                    results
                        .rows
                        .iter()
                        .find(|r| r.parameterization == p && r.rotation_init == init)
                        .map(|r| r.peak_mean_snr_db)
                };
                if let (Some(random), Some(identity)) =
                    (peak(RotationInit::RandomSu2), peak(RotationInit::Identity))
                {
                    println!(
                        "{:<22} random-init {:.2} dB vs identity-init {:.2} dB ({:+.2} dB)",
                        p.name(),
                        random,
                        identity,
                        random - identity
                    );
                }
            }
            println!("summary: {}", cfg.results_path().display());
        }
        Verb::PmdSwap => {
            let report = run_pmd_swap_study(&cfg)?;
            for row in &report.rows {
                println!(
                    "{:<22} {:<10} swapped {:.2} dB vs fresh {:.2} dB ({} iters to converge)",
                    row.parameterization.name(),
                    row.rotation_init.name(),
                    row.swapped_final_snr_db,
                    row.fresh_final_snr_db,
                    row.convergence_iterations
                );
            }
            println!("summary: {}", cfg.pmd_swap_path().display());
        }
        Verb::Report => {
            print!("{}", experiment::report(&cfg)?);
        }
    }
    Ok(())
}
