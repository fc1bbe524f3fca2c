//! Experiment CLI for activation sketching.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use actsketch::data::load_idx_file;
use actsketch::error::Error;
use actsketch::experiment::{
    run_experiment, run_monitoring_demo, run_sketch_bench, DatasetKind, ExperimentConfig, ExperimentMode,
    MonitorDemoOptions, ProblematicVariant,
};
use actsketch::monitor::memory_report;

#[derive(Parser)]
#[command(name = "actsketch", version, about = "EMA activation sketching: training, monitoring, and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training experiment described by a JSON config.
    Train(TrainArgs),
    /// Reconstruction-error-vs-tail-energy benchmark for the static
    /// three-sketch framework.
    SketchBench(SketchBenchArgs),
    /// Healthy-vs-problematic gradient monitoring demonstration.
    MonitorDemo(MonitorDemoArgs),
    /// Closed-form sketch/monitoring memory report.
    MemoryReport(MemoryReportArgs),
    /// Decode an IDX file and print its header and leading values.
    IdxDump(IdxDumpArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON experiment config; omit to use desk-scale defaults with --mode/--dataset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mode when no config file is given.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ExperimentMode>,
    /// Dataset when no config file is given.
    #[arg(long, value_parser = parse_dataset)]
    dataset: Option<DatasetKind>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// 512-wide 4-layer network, 50 epochs, full MNIST split.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Args)]
struct SketchBenchArgs {
    /// Projection seeds per (spectrum, rank) cell.
    #[arg(long, default_value_t = 100)]
    seeds: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Health {
    Healthy,
    Problematic,
}

#[derive(Args)]
struct MonitorDemoArgs {
    /// Which network configuration to train.
    #[arg(value_enum)]
    which: Health,
    /// Recipe for the problematic configuration.
    #[arg(long, value_parser = parse_variant, default_value = "negative-bias")]
    variant: ProblematicVariant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// 16 layers of width 1024 instead of the desk-scale 8 x 256.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
}

#[derive(Args)]
struct MemoryReportArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    rank: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    window: usize,
}

#[derive(Args)]
struct IdxDumpArgs {
    path: PathBuf,
    /// Number of leading payload values to print.
    #[arg(long, default_value_t = 16)]
    head: usize,
}

fn parse_mode(s: &str) -> Result<ExperimentMode, String> {
    match s {
        "exact" => Ok(ExperimentMode::Exact),
        "sketched-fixed" => Ok(ExperimentMode::SketchedFixed),
        "sketched-adaptive" => Ok(ExperimentMode::SketchedAdaptive),
        "monitor-only" => Ok(ExperimentMode::MonitorOnly),
        other => Err(format!("unknown mode {other:?} (exact|sketched-fixed|sketched-adaptive|monitor-only)")),
    }
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    match s {
        "mnist" => Ok(DatasetKind::Mnist),
        "synthetic-classify" => Ok(DatasetKind::SyntheticClassify),
        "synthetic-regress" => Ok(DatasetKind::SyntheticRegress),
        other => Err(format!("unknown dataset {other:?} (mnist|synthetic-classify|synthetic-regress)")),
    }
}

fn parse_variant(s: &str) -> Result<ProblematicVariant, String> {
    match s {
        "negative-bias" => Ok(ProblematicVariant::NegativeBias),
        "xavier-tanh" => Ok(ProblematicVariant::XavierTanh),
        other => Err(format!("unknown variant {other:?} (negative-bias|xavier-tanh)")),
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        Error::Data(_) | Error::Io(_) => 2,
        Error::ShapeMismatch { .. }
        | Error::IndexOutOfRange { .. }
        | Error::NonFinite(_)
        | Error::Numerical(_)
        | Error::ZeroSketch(_) => 3,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(args) => {
            let mut config = match (&args.config, args.mode, args.dataset) {
                (Some(path), _, _) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
                    ExperimentConfig::from_json(&text)?
                }
                (None, Some(mode), Some(dataset)) => ExperimentConfig::desk(mode, dataset, 0),
                _ => {
                    return Err(Error::Config(
                        "train needs --config FILE or both --mode and --dataset".into(),
                    ))
                }
            };
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            if args.paper_scale {
                config.apply_paper_scale();
            }
            config.validate()?;
            let summary = run_experiment(&config, &args.out)?;
            println!("mode            : {:?}", summary.mode);
            println!("dataset         : {}", summary.dataset);
            println!("epochs          : {}", summary.epochs);
            if let Some(last) = summary.epoch_train_loss.last() {
                println!("final train loss: {last:.6}");
            }
            if let Some(last) = summary.epoch_train_acc.last() {
                println!("final train acc : {last:.4}");
            }
            if let Some(acc) = summary.test_acc {
                println!("test accuracy   : {acc:.4}");
            }
            if let Some(mse) = summary.test_mse {
                println!("test mse        : {mse:.6}");
            }
            if let Some(r) = summary.final_rank {
                println!("final rank      : {r}");
            }
            println!("artifacts in    : {}", args.out.display());
            Ok(())
        }
        Command::SketchBench(args) => {
            let rows = run_sketch_bench(&args.out, args.seeds, &[2, 5, 10])?;
            println!("spectrum,r,mean_err,bound,ratio");
            for t in &rows {
                println!("{},{},{:.6e},{:.6e},{:.3}", t.spectrum, t.r, t.mean_err, t.bound, t.ratio);
            }
            println!("csv: {}", args.out.join("bound_experiment.csv").display());
            Ok(())
        }
        Command::MonitorDemo(args) => {
            let opts = MonitorDemoOptions {
                healthy: matches!(args.which, Health::Healthy),
                variant: args.variant,
                seed: args.seed,
                paper_scale: args.paper_scale,
                epochs: args.epochs,
                timings: false,
            };
            let summary = run_monitoring_demo(&opts, &args.out)?;
            println!("configuration  : {}", if summary.healthy { "healthy" } else { "problematic" });
            for e in 0..summary.epochs {
                let sr = summary.epoch_mean_stable_rank[e]
                    .map(|v| format!("{v:.3}"))
                    .unwrap_or_else(|| "undefined".into());
                println!(
                    "epoch {:2}: acc {:.4}  loss {:.5}  mean stable rank {}",
                    e + 1,
                    summary.epoch_train_acc[e],
                    summary.epoch_train_loss[e],
                    sr
                );
            }
            println!("artifacts in   : {}", args.out.display());
            Ok(())
        }
        Command::MemoryReport(args) => {
            let report = memory_report(args.layers, args.width, args.rank, args.batch, args.window);
            println!(
                "{}",
                serde_json::to_string_pretty(&report).map_err(|e| Error::Data(format!("encode: {e}")))?
            );
            Ok(())
        }
        Command::IdxDump(args) => {
            let idx = load_idx_file(&args.path)?;
            println!("dims   : {:?}", idx.dims);
            println!("values : {}", idx.data.len());
            let head: Vec<String> = idx.data.iter().take(args.head).map(|b| b.to_string()).collect();
            println!("head   : [{}]", head.join(", "));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
