use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::model::{Model, TickInput};
use crate::error::{Error, Result};
use crate::numerics::{Scope, Tape, Tensor};
use crate::sim::{ChannelConfig, Frame, ReceivedStore, Scenario, World, HEADING_UNIT};
use crate::temporal::FeatureBuffer;

/// What the ego vehicle keeps between ticks: the newest feature from each
/// collaborator (a lost or late packet leaves the older one in place) and
/// the agent stacks of the last `K` ticks.
#[derive(Debug, Clone)]
pub struct EgoHistory {
    received: ReceivedStore,
    buffer: FeatureBuffer<Tensor>,
}

impl EgoHistory {
    pub fn new(k: usize) -> Result<Self> {
        Ok(EgoHistory {
            received: ReceivedStore::default(),
            buffer: FeatureBuffer::new(k)?,
        })
    }

    /// Takes in the frame's deliveries and pushes this tick's agent stack.
    pub fn observe(&mut self, frame: &Frame) -> Result<()> {
        for r in &frame.delivered {
            self.received.insert(r.clone());
        }
        let stack = agent_stack(&frame.ego_feature, &self.received)?;
        self.buffer.push(frame.tick, stack)
    }

    pub fn stacks(&self) -> Vec<Tensor> {
        self.buffer.entries().cloned().collect()
    }

    /// Ticks since the newest collaborator emission the ego vehicle holds.
    pub fn staleness(&self, now: i64) -> Option<i64> {
        self.received.features().map(|(_, e, _)| now - e).min()
    }
}

/// `N×C×H×W` stack: the ego feature first, then collaborators by sender id.
pub fn agent_stack(ego: &Tensor, received: &ReceivedStore) -> Result<Tensor> {
    let mut shape = vec![1 + received.len()];
    shape.extend_from_slice(ego.shape());
    let mut data = Vec::with_capacity(ego.len() * shape[0]);
    data.extend_from_slice(ego.data());
    for (_, _, f) in received.features() {
        if f.shape() != ego.shape() {
            return Err(Error::shape(
                "agent_stack",
                format!("{:?} vs ego {:?}", f.shape(), ego.shape()),
            ));
        }
        data.extend_from_slice(f.data());
    }
    Tensor::new(&shape, data)
}

/// Running intersection/union and squared-error totals.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Tally {
    pub intersection: f64,
    pub union: f64,
    pub squared_error: f64,
    pub elements: usize,
    pub ticks: usize,
}

impl Tally {
    /// Scores decoder logits against ground truth (prediction = logit >= 0,
    /// i.e. probability >= 0.5) and the fused feature against the clean one.
    pub fn add(&mut self, logits: &Tensor, truth: &Tensor, feature: &Tensor, clean: &Tensor) {
        for (&l, &g) in logits.data().iter().zip(truth.data()) {
            let p = l >= 0.0;
            let g = g >= 0.5;
            if p && g {
                self.intersection += 1.0;
            }
            if p || g {
                self.union += 1.0;
            }
        }
        for (&f, &c) in feature.data().iter().zip(clean.data()) {
            self.squared_error += (f - c) * (f - c);
        }
        self.elements += feature.len();
        self.ticks += 1;
    }

    pub fn merge(&mut self, other: &Tally) {
        self.intersection += other.intersection;
        self.union += other.union;
        self.squared_error += other.squared_error;
        self.elements += other.elements;
        self.ticks += other.ticks;
    }

    /// Pooled IoU; an empty union counts as a perfect match.
    pub fn iou(&self) -> f64 {
        if self.union == 0.0 {
            1.0
        } else {
            self.intersection / self.union
        }
    }

    pub fn mse(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.squared_error / self.elements as f64
        }
    }
}

/// IoU and MSE for one configuration under one set of channel conditions.
/// The IoU is an occupancy proxy for detection AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub config: String,
    pub seed: u64,
    pub max_latency: u32,
    pub drop_p: f64,
    pub loc_sigma: f64,
    /// Heading noise in units of pi/18 radians.
    pub head_sigma: f64,
    pub retention: f64,
    pub iou: f64,
    pub mse_to_clean: f64,
    pub ticks: usize,
    /// Pooled IoU keyed by how many ticks old the freshest collaborator data was.
    #[serde(skip)]
    pub per_staleness: BTreeMap<i64, f64>,
}

impl MetricRecord {
    fn from_tallies(
        config: String,
        seed: u64,
        channel: &ChannelConfig,
        retention: f64,
        total: &Tally,
        by_age: &BTreeMap<i64, Tally>,
    ) -> Self {
        MetricRecord {
            config,
            seed,
            max_latency: channel.max_latency,
            drop_p: channel.drop_p,
            loc_sigma: channel.loc_sigma,
            head_sigma: channel.head_sigma / HEADING_UNIT,
            retention,
            iou: total.iou(),
            mse_to_clean: total.mse(),
            ticks: total.ticks,
            per_staleness: by_age.iter().map(|(&a, t)| (a, t.iou())).collect(),
        }
    }
}

/// Column order of every metrics CSV.
pub const METRIC_COLUMNS: [&str; 10] = [
    "config",
    "seed",
    "max_latency",
    "drop_p",
    "loc_sigma",
    "head_sigma",
    "retention",
    "iou",
    "mse_to_clean",
    "ticks",
];

pub fn write_metrics_csv<W: Write>(records: &[MetricRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(METRIC_COLUMNS)?;
    for r in records {
        wr.write_record([
            r.config.clone(),
            r.seed.to_string(),
            r.max_latency.to_string(),
            r.drop_p.to_string(),
            r.loc_sigma.to_string(),
            r.head_sigma.to_string(),
            r.retention.to_string(),
            format!("{:.6}", r.iou),
            format!("{:.6e}", r.mse_to_clean),
            r.ticks.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Accumulates scores for one scenario.
fn score_scenario(
    model: &Model,
    cfg: &PipelineConfig,
    scenario: &Scenario,
    total: &mut Tally,
    by_age: &mut BTreeMap<i64, Tally>,
) -> Result<()> {
    let mut world = World::new(scenario.clone(), cfg.grid)?;
    let mut history = EgoHistory::new(cfg.buffer)?;
    let first_scored = cfg.warmup().min(scenario.ticks.saturating_sub(1));
    for t in 0..scenario.ticks {
        let frame = world.advance()?;
        history.observe(&frame)?;
        if t < first_scored {
            continue;
        }
        let stacks = history.stacks();
        let tape = Tape::inference();
        let s = Scope::new(&tape, &model.store);
        let out = model.forward(
            s,
            TickInput {
                stacks: &stacks,
                ego: &frame.ego_feature,
            },
        )?;
        let mut tally = Tally::default();
        tally.add(
            &out.logits.value(),
            &frame.ground_truth,
            &out.feature.value(),
            &frame.clean,
        );
        total.merge(&tally);
        let age = history.staleness(frame.tick).unwrap_or(-1);
        by_age.entry(age).or_default().merge(&tally);
    }
    Ok(())
}

/// Runs one scenario through the pipeline and scores every tick from the
/// warm-up on (or only the last tick of shorter scenarios).
pub fn run_pipeline(model: &Model, cfg: &PipelineConfig, scenario: &Scenario, seed: u64) -> Result<MetricRecord> {
    cfg.validate()?;
    let mut total = Tally::default();
    let mut by_age = BTreeMap::new();
    score_scenario(model, cfg, scenario, &mut total, &mut by_age)?;
    Ok(MetricRecord::from_tallies(
        model.toggles.label(),
        seed,
        &scenario.channel,
        model.selector.retention,
        &total,
        &by_age,
    ))
}

/// Scores the model on the configured evaluation scenarios under `channel`.
pub fn evaluate(model: &Model, cfg: &PipelineConfig, channel: &ChannelConfig, seed: u64) -> Result<MetricRecord> {
    cfg.validate()?;
    channel.validate()?;
    let mut total = Tally::default();
    let mut by_age = BTreeMap::new();
    for scenario in evaluation_scenarios(cfg, channel) {
        score_scenario(model, cfg, &scenario, &mut total, &mut by_age)?;
    }
    Ok(MetricRecord::from_tallies(
        model.toggles.label(),
        seed,
        channel,
        model.selector.retention,
        &total,
        &by_age,
    ))
}

/// Held-out scenarios. Scene layout and channel draws depend only on the
/// evaluation seed, so every configuration sees the same worlds.
pub fn evaluation_scenarios(cfg: &PipelineConfig, channel: &ChannelConfig) -> Vec<Scenario> {
    let spec = crate::sim::ScenarioSpec {
        ticks: cfg.warmup() + cfg.evaluation.ticks,
        ..cfg.scenario
    };
    (0..cfg.evaluation.scenarios as u64)
        .map(|i| Scenario::generate(&spec, cfg.evaluation.seed + i, *channel))
        .collect()
}
