use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lifelong::corpus::{avg_jaccard, build_stream, load_jsonl, synthetic_records, write_jsonl, StreamOptions, SynthConfig};
use lifelong::runner::{report, run_experiment, ExperimentConfig};
use lifelong::{Error, Result};

#[derive(Parser)]
#[command(name = "lifelong", version, about = "Lifelong group classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one method over every configured seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the last completed task of an earlier run.
        #[arg(long)]
        resume: bool,
    },
    /// Write a synthetic task stream as JSONL.
    GenData(GenData),
    /// Aggregate finished runs into an AvgF1 table and per-task curves.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean Jaccard overlap of each task's top words with every other task.
    DiagJaccard {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        topk: usize,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value_t = 5)]
    tasks: usize,
    #[arg(long, default_value_t = 3)]
    groups_per_task: usize,
    #[arg(long, default_value_t = 200)]
    vocab_per_task: usize,
    #[arg(long, default_value_t = 0.05)]
    overlap: f64,
    #[arg(long)]
    shared_pool: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    concentration: f64,
    #[arg(long, default_value_t = 6)]
    min_len: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    zipf_exponent: f64,
    #[arg(long, default_value_t = 500)]
    train_per_task: usize,
    #[arg(long, default_value_t = 100)]
    dev_per_task: usize,
    #[arg(long, default_value_t = 100)]
    test_per_task: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl GenData {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            tasks: self.tasks,
            groups_per_task: self.groups_per_task,
            vocab_per_task: self.vocab_per_task,
            overlap: self.overlap,
            shared_pool: self.shared_pool,
            concentration: self.concentration,
            min_len: self.min_len,
            max_len: self.max_len,
            zipf_exponent: self.zipf_exponent,
            train_per_task: self.train_per_task,
            dev_per_task: self.dev_per_task,
            test_per_task: self.test_per_task,
            seed: self.seed,
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, resume } => {
            let cfg = ExperimentConfig::load(&config)?;
            let manifest = run_experiment(&cfg, resume)?;
            println!(
                "{}: {} seed(s), metrics in {}",
                manifest.method,
                manifest.seeds.len(),
                cfg.resolved_output_dir().join(&manifest.metrics_csv).display()
            );
        }
        Command::GenData(args) => {
            let records = synthetic_records(&args.config())?;
            write_jsonl(&args.out, &records)?;
            println!("wrote {} records to {}", records.len(), args.out.display());
        }
        Command::Report { runs, out } => {
            let written = report(&runs, &out)?;
            println!("{}", written.avg_csv.display());
            for p in written.plots {
                println!("{}", p.display());
            }
        }
        Command::DiagJaccard { data, topk } => {
            let (records, _) = load_jsonl(&data, false)?;
            let stream = build_stream(&records, &StreamOptions::default())?;
            println!("task,name,avg_jaccard");
            for (i, (task, j)) in stream.tasks.iter().zip(avg_jaccard(&stream, topk)?).enumerate() {
                println!("{},{},{j:.6}", i + 1, task.name);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::Report(keys) => {
                    eprintln!("error: incompatible runs");
                    for k in keys {
                        eprintln!("  {k}");
                    }
                }
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
