use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cofuse::harness::{
    ablation_suite, evaluate, evaluation_scenarios, history_loss_sweep, latency_sweep, retention_sweep, run_pipeline,
    train, write_metrics_csv, MetricRecord, Model, PipelineConfig, TrainReport, DEFAULT_DROP_RATES, DEFAULT_LATENCIES,
    DEFAULT_RETENTIONS,
};
use cofuse::numerics::ParamStore;
use cofuse::sim::{write_trace_csv, Scenario, TraceRecord, World};
use cofuse::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cofuse",
    version,
    about = "Latency-robust cooperative BEV fusion on a toy simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Score a model on one scenario file or on the held-out evaluation set.
    Run {
        #[command(flatten)]
        common: Common,
        /// Trained parameters; without them the model keeps its seeded initialization.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Scenario file (JSON) to run instead of the evaluation set.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Train the configured pipeline, then score it.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train and score all seven module combinations.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated training seeds; defaults to the single configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Score along one channel or selector axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Trained parameters for the latency and drop axes; trained from scratch when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Latency,
    Retention,
    Drop,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.training.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&common.out)?;
    Ok(cfg)
}

fn write_metrics(out: &Path, records: &[MetricRecord]) -> Result<()> {
    write_metrics_csv(records, BufWriter::new(File::create(out.join("metrics.csv"))?))
}

fn write_trace(out: &Path, trace: &[TraceRecord]) -> Result<()> {
    write_trace_csv(trace, BufWriter::new(File::create(out.join("trace.csv"))?))
}

fn write_training(out: &Path, report: &TrainReport) -> Result<()> {
    report.write_loss_csv(BufWriter::new(File::create(out.join("loss_curve.csv"))?))?;
    report.model.store.save(out.join("params.catp"))
}

/// Channel events of a scenario. They depend only on the scenario, not on the model.
fn scenario_trace(cfg: &PipelineConfig, scenario: &Scenario) -> Result<Vec<TraceRecord>> {
    let mut world = World::new(scenario.clone(), cfg.grid)?;
    for _ in 0..scenario.ticks {
        world.advance()?;
    }
    Ok(world.trace().to_vec())
}

fn model_with_params(cfg: &PipelineConfig, params: Option<&Path>) -> Result<Model> {
    let mut model = Model::new(cfg, cfg.training.seed)?;
    if let Some(p) = params {
        model.store.load_values_from(&ParamStore::load(p)?)?;
    }
    Ok(model)
}

fn run(common: &Common, params: Option<&Path>, scenario: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let model = model_with_params(&cfg, params)?;
    let seed = cfg.training.seed;
    let (record, trace) = match scenario {
        Some(p) => {
            let sc = Scenario::load(p)?;
            (run_pipeline(&model, &cfg, &sc, seed)?, scenario_trace(&cfg, &sc)?)
        }
        None => {
            let mut trace = Vec::new();
            for sc in evaluation_scenarios(&cfg, &cfg.channel) {
                trace.extend(scenario_trace(&cfg, &sc)?);
            }
            (evaluate(&model, &cfg, &cfg.channel, seed)?, trace)
        }
    };
    log::info!(
        "{}: iou {:.4} mse {:.4e}",
        record.config,
        record.iou,
        record.mse_to_clean
    );
    write_metrics(&common.out, &[record])?;
    write_trace(&common.out, &trace)
}

fn train_cmd(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let report = train(&cfg)?;
    log::info!("loss {:.5} -> {:.5}", report.initial_loss(), report.final_loss());
    let record = evaluate(&report.model, &cfg, &cfg.channel, cfg.training.seed)?;
    write_training(&common.out, &report)?;
    write_metrics(&common.out, &[record])
}

fn ablate(common: &Common, seeds: &[u64]) -> Result<()> {
    let cfg = load_config(common)?;
    let seeds = if seeds.is_empty() {
        vec![cfg.training.seed]
    } else {
        seeds.to_vec()
    };
    let rows = ablation_suite(&cfg, &seeds)?;
    let records: Vec<_> = rows.iter().map(|r| r.record.clone()).collect();
    let mut wr = csv::Writer::from_writer(BufWriter::new(File::create(common.out.join("loss_curve.csv"))?));
    wr.write_record(["config", "seed", "step", "loss"])?;
    for r in &rows {
        for (i, l) in r.report.losses.iter().enumerate() {
            wr.write_record([r.toggles.label(), r.seed.to_string(), i.to_string(), format!("{l:.9e}")])?;
        }
    }
    wr.flush()?;
    write_metrics(&common.out, &records)
}

fn sweep(common: &Common, axis: Axis, params: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = cfg.training.seed;
    let records = match axis {
        Axis::Retention => retention_sweep(&cfg, &DEFAULT_RETENTIONS)?,
        Axis::Latency | Axis::Drop => {
            let model = match params {
                Some(_) => model_with_params(&cfg, params)?,
                None => {
                    let report = train(&cfg)?;
                    write_training(&common.out, &report)?;
                    report.model
                }
            };
            match axis {
                Axis::Latency => latency_sweep(&model, &cfg, &DEFAULT_LATENCIES, seed)?,
                _ => history_loss_sweep(&model, &cfg, &DEFAULT_DROP_RATES, seed)?,
            }
        }
    };
    write_metrics(&common.out, &records)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            common,
            params,
            scenario,
        } => run(common, params.as_deref(), scenario.as_deref()),
        Command::Train { common } => train_cmd(common),
        Command::Ablate { common, seeds } => ablate(common, seeds),
        Command::Sweep { common, axis, params } => sweep(common, *axis, params.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
