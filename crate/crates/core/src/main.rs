use std::fs::File;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};

use a3mda::bench::ablation::{self, Preset};
use a3mda::bench::gradsuite;
use a3mda::bench::run::{self, resolve_task};
use a3mda::bench::task::{generate_task, write_task, TaskSpec};
use a3mda::pipeline::{evaluate, read_state_checkpoint, ExperimentConfig, PredictionMode};

#[derive(Parser)]
#[command(name = "a3mda", version, about = "Hardness-aware multi-source domain adaptation on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task (features, labels, manifest).
    Gen {
        #[arg(long)]
        out: PathBuf,
        /// Generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// TOML task spec; the default four-class task when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train one configuration and write metrics, summary and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Score a checkpoint on the configured task's target domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// weighted | average | source-<m>
        #[arg(long, default_value = "weighted")]
        mode: PredictionMode,
    },
    /// Run a variant grid over the configured seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// ladder | ahm-swap | prediction-modes
        #[arg(long, default_value = "ladder")]
        preset: Preset,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Finite-difference check of every loss on a small network.
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Dump the hardness memory stored in a checkpoint as CSV.
    SnapshotHardness {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { out, seed, spec } => {
            let mut spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("cannot read {}", p.display()))?;
                    toml::from_str(&text).with_context(|| format!("invalid task spec {}", p.display()))?
                }
                None => TaskSpec::default_task(7),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let task = generate_task(&spec)?;
            let manifest = write_task(&task, &out)?;
            println!("wrote {}", manifest.display());
        }
        Command::Train { config, seed, out } => {
            let config = load_config(config.as_deref(), seed)?;
            let (data, labels) = resolve_task(&config)?;
            let (outcome, summary) = run::run_training(&config, &data, &labels, &out)?;
            if let Some(last) = outcome.metrics.last() {
                println!(
                    "epoch {} l_total {:.4} target_acc {:.4} pl_rate {:.3}",
                    last.epoch,
                    last.l_total,
                    last.target_acc.unwrap_or(f64::NAN),
                    last.pl_rate
                );
            }
            for a in &summary.accuracy {
                println!("{:<10} final {:.4} best {:.4}", a.mode, a.final_accuracy, a.best_accuracy);
            }
            println!("wrote {} ({:.1}s)", out.display(), summary.wall_clock_seconds);
        }
        Command::Eval { checkpoint, config, mode } => {
            let config = load_config(config.as_deref(), None)?;
            let (data, labels) = resolve_task(&config)?;
            let (model, _) = read_state_checkpoint(&checkpoint)?;
            let e = evaluate(&model, &data.target_x, &labels, mode)?;
            println!("mode {mode} accuracy {:.4}", e.accuracy);
            println!("confusion (rows = true class):");
            for row in &e.confusion {
                let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
                println!("{}", cells.join(""));
            }
        }
        Command::Ablate {
            config,
            preset,
            seed,
            out,
        } => {
            let config = load_config(config.as_deref(), None)?;
            let (data, labels) = resolve_task(&config)?;
            let seeds = match seed {
                Some(s) => vec![s],
                None => config.ablation_seeds.clone(),
            };
            let variants = ablation::preset_variants(preset, &config, data.sources.len());
            let rows = ablation::run_ablation(&variants, &seeds, &data, &labels);
            std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
            let table = out.join("table.csv");
            ablation::write_table(BufWriter::new(File::create(&table)?), &rows)?;
            for r in &rows {
                if let Err(e) = &r.accuracy {
                    eprintln!("{} seed {} failed: {e}", r.variant, r.seed);
                }
            }
            println!("{:<24} {:>8} {:>8}", "variant", "mean", "std");
            for s in ablation::summarize(&rows) {
                println!("{:<24} {:>8.4} {:>8.4}", s.variant, s.mean, s.std);
            }
            println!("wrote {}", table.display());
        }
        Command::Gradcheck { seed } => {
            let results = gradsuite::run_suite(seed)?;
            let mut worst: f64 = 0.0;
            for (name, err) in &results {
                println!("{name:<8} max relative error {err:.3e}");
                worst = worst.max(*err);
            }
            println!("max relative error {worst:.3e}");
            if worst > gradsuite::TOLERANCE {
                bail!("gradient check failed: {worst:.3e} > {:.0e}", gradsuite::TOLERANCE);
            }
        }
        Command::SnapshotHardness { checkpoint, out } => {
            let (_, memory) = read_state_checkpoint(&checkpoint)?;
            match out {
                Some(p) => {
                    let f = File::create(&p).with_context(|| format!("cannot create {}", p.display()))?;
                    memory.write_csv(BufWriter::new(f))?;
                }
                None => memory.write_csv(io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            eprintln!("{}", Cli::command().render_usage());
            ExitCode::FAILURE
        }
    }
}
