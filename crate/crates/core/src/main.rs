use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tempcl::config::ExperimentConfig;
use tempcl::data::save_tcld;
use tempcl::encoder::load_checkpoint;
use tempcl::experiment::{
    analyze, evaluate, load_data, run_experiment, summary_lines, synth_datasets, write_analysis, Snapshot,
    METRICS_CSV_HEADER,
};
use tempcl::{Error, Result};

#[derive(Parser)]
#[command(name = "tempcl", version, about = "Contrastive learning with temperature schedules on long-tail data")]
struct Cli {
    /// Configuration file (`section.key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides run.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides run.output_dir.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and analyse as configured.
    Train,
    /// Evaluate a checkpoint; prints metrics.csv rows.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Epoch of the checkpoint; inferred from `epoch_N.tclp` when omitted.
        #[arg(long)]
        epoch: Option<u64>,
    },
    /// Write analysis CSVs for a checkpoint into the output directory.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        epoch: Option<u64>,
    },
    /// Print the temperature schedule as `epoch,tau` CSV.
    SchedulePreview {
        /// Number of epochs; defaults to run.epochs.
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Write the synthetic train and test sets as TCLD files.
    GenData,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.run.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_epoch(path: &Path, explicit: Option<u64>) -> u64 {
    explicit
        .or_else(|| {
            path.file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.strip_prefix("epoch_"))
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(0)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train => {
            let summary = run_experiment(&cfg)?;
            for line in summary_lines(&summary) {
                println!("{line}");
            }
        }
        Command::Eval { checkpoint, epoch } => {
            let data = load_data(&cfg)?;
            let params = load_checkpoint(checkpoint)?;
            let epoch = checkpoint_epoch(checkpoint, *epoch);
            let report = evaluate(&cfg, &data, &params)?;
            let snap = Snapshot {
                epoch,
                tau: cfg.schedule_config()?.tau_at(epoch),
                report,
                train_loss: None,
                coverage_cv: None,
            };
            print!("{METRICS_CSV_HEADER}\n{}", snap.csv_rows());
        }
        Command::Analyze { checkpoint, epoch } => {
            let data = load_data(&cfg)?;
            let params = load_checkpoint(checkpoint)?;
            let epoch = checkpoint_epoch(checkpoint, *epoch);
            let dump = analyze(&cfg, &data, &params, epoch)?;
            let dir = cfg.run.output_dir.join("analysis");
            write_analysis(&dir, epoch, &dump)?;
            println!("coverage_cv {}", dump.coverage_cv);
            println!("wrote {} files to {}", dump.files.len(), dir.display());
        }
        Command::SchedulePreview { epochs } => {
            print!("{}", cfg.schedule_config()?.preview_csv(epochs.unwrap_or(cfg.run.epochs)));
        }
        Command::GenData => {
            let (train, test) = synth_datasets(&cfg)?;
            let dir = &cfg.run.output_dir;
            std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            for (name, ds) in [("train.tcld", &train), ("test.tcld", &test)] {
                let path = dir.join(name);
                save_tcld(ds, &path)?;
                println!("{}: K={} D={} n={}", path.display(), ds.num_classes(), ds.dim(), ds.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
