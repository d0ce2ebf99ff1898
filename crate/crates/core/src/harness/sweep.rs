use rayon::prelude::*;

use super::config::{PipelineConfig, Toggles};
use super::episode::{evaluate, MetricRecord};
use super::model::Model;
use super::train::{train, TrainReport};
use crate::error::Result;
use crate::sim::ChannelConfig;

pub const DEFAULT_LATENCIES: [u32; 6] = [0, 1, 2, 3, 4, 5];
pub const DEFAULT_RETENTIONS: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
pub const DEFAULT_DROP_RATES: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 0.95];

/// One trained configuration and its score under the configured channel.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub seed: u64,
    pub report: TrainReport,
    pub record: MetricRecord,
}

/// Trains and scores the seven toggle combinations for every seed. Rows
/// come back seed-major in `Toggles::ablation()` order.
pub fn ablation_suite(cfg: &PipelineConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let jobs: Vec<(u64, Toggles)> = seeds
        .iter()
        .flat_map(|&s| Toggles::ablation().into_iter().map(move |t| (s, t)))
        .collect();
    jobs.par_iter()
        .map(|&(seed, toggles)| {
            let mut c = cfg.with_modules(toggles);
            c.training.seed = seed;
            let report = train(&c)?;
            let record = evaluate(&report.model, &c, &c.channel, seed)?;
            Ok(AblationRow {
                toggles,
                seed,
                report,
                record,
            })
        })
        .collect()
}

/// Scores one trained model under each channel condition.
pub fn evaluate_conditions(
    model: &Model,
    cfg: &PipelineConfig,
    channels: &[ChannelConfig],
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    channels.par_iter().map(|ch| evaluate(model, cfg, ch, seed)).collect()
}

/// Same model, pose noise fixed at the configured level, latency varied.
pub fn latency_sweep(model: &Model, cfg: &PipelineConfig, latencies: &[u32], seed: u64) -> Result<Vec<MetricRecord>> {
    let channels: Vec<_> = latencies
        .iter()
        .map(|&l| ChannelConfig {
            max_latency: l,
            ..cfg.channel
        })
        .collect();
    evaluate_conditions(model, cfg, &channels, seed)
}

/// Same model, packet drop probability varied.
pub fn history_loss_sweep(
    model: &Model,
    cfg: &PipelineConfig,
    drop_rates: &[f64],
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    let channels: Vec<_> = drop_rates
        .iter()
        .map(|&p| ChannelConfig {
            drop_p: p,
            ..cfg.channel
        })
        .collect();
    evaluate_conditions(model, cfg, &channels, seed)
}

/// Same model, no latency, pose noise varied on both axes.
pub fn noise_sweep(model: &Model, cfg: &PipelineConfig, sigmas: &[f64], seed: u64) -> Result<Vec<MetricRecord>> {
    let channels: Vec<_> = sigmas
        .iter()
        .map(|&s| {
            ChannelConfig {
                max_latency: 0,
                ..cfg.channel
            }
            .with_noise(s)
        })
        .collect();
    evaluate_conditions(model, cfg, &channels, seed)
}

/// Trains one model per retention ratio from the same seed.
pub fn retention_sweep(cfg: &PipelineConfig, retentions: &[f64]) -> Result<Vec<MetricRecord>> {
    retentions
        .par_iter()
        .map(|&k| {
            let c = PipelineConfig {
                retention: k,
                ..cfg.clone()
            };
            let report = train(&c)?;
            evaluate(&report.model, &c, &c.channel, c.training.seed)
        })
        .collect()
}
