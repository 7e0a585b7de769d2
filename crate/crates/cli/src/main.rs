use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use refusion::harness::{
    evaluate_saved, flops_report, run_pipeline, run_sweep, write_stores, write_tasks, ExperimentConfig, Overrides,
    PipelineResults, Stage, SweepAxis, Variant,
};
use refusion::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_PARTIAL: u8 = 2;

#[derive(Parser)]
#[command(name = "refusion", version, about = "Retrieval representation fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task for each seed and write it as JSON.
    GenTask(Common),
    /// Embed each seed's training split into a vector store file.
    BuildStore(Common),
    /// Search (for ARI variants), fine-tune and evaluate every variant and seed.
    Train(Common),
    /// Run only the architecture search and report the discretized architecture.
    Search(Common),
    /// Re-evaluate saved checkpoints and measure latency.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Timed forward passes per latency measurement.
        #[arg(long, default_value_t = 20)]
        latency_samples: usize,
    },
    /// Run the pipeline once per value of a sweep axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of k, metric, fusion-sites, query-mode. Defaults to the config's sweep axis.
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Comma-separated axis values. Defaults to the config's sweep values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Write analytic FLOPs curves for concatenation and fusion.
    FlopsReport {
        #[command(flatten)]
        common: Common,
        /// Comma-separated k values. Defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        k_values: Option<Vec<usize>>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Replace the seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    /// Replace the variant list with a single variant.
    #[arg(long)]
    mode: Option<Variant>,
    #[arg(long)]
    out: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut config = ExperimentConfig::load(&self.config)?;
        config.apply(&Overrides {
            seed: self.seed,
            k: self.k,
            mode: self.mode,
            out: self.out.clone(),
        })?;
        Ok(config)
    }
}

enum Outcome {
    Done,
    Partial(usize),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(n)) => {
            eprintln!("{n} seed run(s) failed");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn run(command: Command) -> anyhow::Result<Outcome> {
    match command {
        Command::GenTask(c) => {
            let config = c.load()?;
            let out = output_dir(&config)?;
            for (seed, stats) in config.seeds.iter().zip(write_tasks(&config, &out)?) {
                println!(
                    "seed {seed}: bayes {:.3} chance {:.3} purity {:.3}",
                    stats.bayes_accuracy, stats.chance, stats.purity
                );
            }
            Ok(Outcome::Done)
        }
        Command::BuildStore(c) => {
            let config = c.load()?;
            let out = output_dir(&config)?;
            for path in write_stores(&config, &out)? {
                println!("{}", path.display());
            }
            Ok(Outcome::Done)
        }
        Command::Train(c) => pipeline(&c.load()?, Stage::Full),
        Command::Search(c) => pipeline(&c.load()?, Stage::Search),
        Command::Eval {
            common,
            latency_samples,
        } => {
            let config = common.load()?;
            let out = output_dir(&config)?;
            let records = evaluate_saved(&config, &out, latency_samples)?;
            let mut failed = 0;
            for r in &records {
                match (&r.metrics, &r.error) {
                    (Some(m), _) => println!("{} seed {}: accuracy {:.4}", r.variant, r.seed, m.accuracy),
                    (None, e) => {
                        failed += 1;
                        println!(
                            "{} seed {}: failed: {}",
                            r.variant,
                            r.seed,
                            e.as_deref().unwrap_or("unknown")
                        );
                    }
                }
                if let Some(l) = &r.latency {
                    println!(
                        "  latency {:?}: retrieve {:.3} ms, forward {:.3} ms, total {:.3} ms",
                        l.query_mode, l.retrieve_ms, l.forward_ms, l.total_ms
                    );
                }
            }
            Ok(partial(failed))
        }
        Command::Sweep { common, axis, values } => {
            let config = common.load()?;
            let out = output_dir(&config)?;
            let axis = axis.unwrap_or(config.sweep.axis);
            let values = values.unwrap_or_else(|| config.sweep.values.clone());
            let table = run_sweep(&config, axis, &values, Some(&out))?;
            print!("{}", table.to_csv());
            Ok(partial(table.failed_seeds()))
        }
        Command::FlopsReport { common, k_values } => {
            let config = common.load()?;
            let out = output_dir(&config)?;
            let ks = k_values.unwrap_or_else(|| config.flops.k_values.clone());
            println!("k,rc_flops,rf_flops,rc_seq_len,rf_seq_len");
            for r in flops_report(&config, &ks, Some(&out))? {
                println!(
                    "{},{},{},{},{}",
                    r.k, r.rc_flops, r.rf_flops, r.rc_seq_len, r.rf_seq_len
                );
            }
            Ok(Outcome::Done)
        }
    }
}

fn pipeline(config: &ExperimentConfig, stage: Stage) -> anyhow::Result<Outcome> {
    let out = output_dir(config)?;
    let results = run_pipeline(config, Some(&out), stage)?;
    summarize(&results);
    Ok(partial(results.failed_seeds()))
}

fn summarize(results: &PipelineResults) {
    for v in &results.variants {
        for s in v.seeds.iter().filter(|s| !s.ok) {
            eprintln!(
                "{} seed {} failed: {}",
                v.variant,
                s.seed,
                s.error.as_deref().unwrap_or("unknown")
            );
        }
        match (v.mean, v.std) {
            (Some(m), Some(s)) => println!("{}: {:.4} ± {:.4} (n={})", v.variant, m, s, v.n_ok),
            (Some(m), None) => println!("{}: {:.4} (n={})", v.variant, m, v.n_ok),
            _ => {
                for s in v.seeds.iter().filter(|s| s.ok) {
                    let arch = s.architecture.as_deref().unwrap_or("-");
                    println!("{} seed {}: {}", v.variant, s.seed, arch.replace('\n', "; "));
                }
            }
        }
    }
}

fn partial(failed: usize) -> Outcome {
    if failed == 0 {
        Outcome::Done
    } else {
        Outcome::Partial(failed)
    }
}

fn output_dir(config: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = Path::new(&config.output_dir).to_path_buf();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}
