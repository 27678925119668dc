use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use srns_cli::{cmd_analyze, cmd_noise_sweep, cmd_profile, cmd_train, exit_code, prepare, ExperimentConfig};
use srns_core::trainer::DiagnosticConfig;

#[derive(Parser)]
#[command(name = "srns", version, about = "Negative-sampling experiments for implicit collaborative filtering")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Starting preset: ml-100k or ml-1m.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override a value, e.g. `--set sampler.alpha=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Print the effective configuration before running.
    #[arg(long, global = true)]
    show_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, index and split the raw interaction file into a snapshot.
    Prepare,
    /// Train one or more seeds and write metrics, summary and checkpoint.
    Train {
        /// Number of seeds, overriding train.repeat.
        #[arg(long)]
        repeat: Option<usize>,
    },
    /// Compare difficulty-only and variance-based selection across noise.sigmas.
    NoiseSweep {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Time epochs across memory sizes and lazy-update periods.
    Profile {
        /// S1 + S2 totals (split evenly).
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        lazy: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
    },
    /// Diagnostics (CCDF, LER by difficulty, std/mean by class) of a model.
    Analyze {
        /// Model checkpoint; defaults to <output.dir>/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Analyse a freshly initialised model instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        untrained: bool,
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
        difficulties: Vec<usize>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ExperimentConfig::resolve(
        cli.common.preset.as_deref(),
        cli.common.config.as_deref(),
        std::env::vars(),
        &cli.common.sets,
    )?;
    if cli.common.show_config {
        print!("{}", cfg.to_toml());
    }
    match cli.command {
        Command::Prepare => {
            let r = prepare(&cfg)?;
            println!("users\t{}", r.num_users);
            println!("items\t{}", r.num_items);
            println!("positives\t{}", r.positives);
            println!("train\t{}", r.train);
            println!("validation\t{}", r.validation);
            println!("test\t{}", r.test);
            println!("snapshot\t{}", r.snapshot.display());
        }
        Command::Train { repeat } => {
            if let Some(n) = repeat {
                cfg.train.repeat = n;
                cfg.validate()?;
            }
            for s in cmd_train(&cfg)? {
                println!(
                    "seed {}\tepochs {}\ttail ndcg@3 {}\ttail recall@3 {}",
                    s.seed,
                    s.epochs_run,
                    fmt_opt(s.tail.test_ndcg3),
                    fmt_opt(s.tail.test_recall3)
                );
            }
            println!("output\t{}", cfg.output.dir.display());
        }
        Command::NoiseSweep { seeds } => {
            println!("sigma\tstrategy\tndcg@3\trecall@3");
            for r in cmd_noise_sweep(&cfg, seeds)? {
                println!(
                    "{}\t{:?}\t{:.4}±{:.4}\t{:.4}±{:.4}",
                    r.sigma, r.strategy, r.ndcg3_mean, r.ndcg3_std, r.recall3_mean, r.recall3_std
                );
            }
        }
        Command::Profile { sizes, lazy, epochs } => {
            println!("strategy\ts1\ts2\te\tepoch_s\tsampling_s");
            for r in cmd_profile(&cfg, &sizes, &lazy, epochs)? {
                println!(
                    "{:?}\t{}\t{}\t{}\t{:.4}\t{:.4}",
                    r.strategy, r.memory_size, r.expansion_size, r.lazy_update, r.mean_epoch_seconds, r.mean_sampling_seconds
                );
            }
        }
        Command::Analyze {
            checkpoint,
            untrained,
            difficulties,
        } => {
            let ckpt = (!untrained).then(|| checkpoint.unwrap_or_else(|| cfg.output.dir.join("checkpoint.json")));
            let diag = DiagnosticConfig {
                difficulties,
                seed: cfg.train.seed,
                ..DiagnosticConfig::default()
            };
            let report = cmd_analyze(&cfg, ckpt.as_deref(), &diag)?;
            for (d, ler) in &report.ler_by_difficulty {
                println!("ler\tD={d}\t{ler:.4}");
            }
            for c in &report.std_mean_by_class {
                println!("std/mean\t{}\t{:.4}", c.class, c.median_std_mean);
            }
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
