use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::PipelineConfig;
use super::episode::EgoHistory;
use super::model::{Model, TickInput};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Scope, Tape, Tensor};
use crate::sim::{Scenario, ScenarioSpec, World};

/// One supervised example: the buffered stacks at a tick and its targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub stacks: Vec<Tensor>,
    pub ego: Tensor,
    pub ground_truth: Tensor,
    pub clean: Tensor,
}

/// Simulates a fresh scenario up to a random tick past the warm-up.
pub fn training_sample(cfg: &PipelineConfig, seed: u64, step: usize, item: usize) -> Result<Sample> {
    let key = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((step as u64) << 8)
        .wrapping_add(item as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let ticks = cfg.warmup() + rng.random_range(0..8);
    let spec = ScenarioSpec { ticks, ..cfg.scenario };
    let scenario = Scenario::generate(&spec, rng.random(), cfg.channel);
    let mut world = World::new(scenario, cfg.grid)?;
    let mut history = EgoHistory::new(cfg.buffer)?;
    let mut last = None;
    for _ in 0..ticks {
        let frame = world.advance()?;
        history.observe(&frame)?;
        last = Some(frame);
    }
    let frame = last.ok_or_else(|| Error::invalid("training_sample", "zero ticks"))?;
    Ok(Sample {
        stacks: history.stacks(),
        ego: frame.ego_feature,
        ground_truth: frame.ground_truth,
        clean: frame.clean,
    })
}

/// Occupancy BCE plus the weighted feature-to-clean MSE, as a scalar.
pub fn sample_loss<'t>(
    model: &Model,
    s: Scope<'t, '_>,
    sample: &Sample,
    mse_weight: f64,
) -> Result<crate::numerics::Var<'t>> {
    let out = model.forward(
        s,
        TickInput {
            stacks: &sample.stacks,
            ego: &sample.ego,
        },
    )?;
    let bce = out.logits.bce_with_logits(&sample.ground_truth)?;
    if mse_weight == 0.0 {
        return Ok(bce);
    }
    bce.add(out.feature.mse_to(&sample.clean)?.scale(mse_weight))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: Model,
    /// Mean loss of each optimizer step, before that step's update.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    /// Mean over the last tenth of the curve.
    pub fn final_loss(&self) -> f64 {
        let n = (self.losses.len() / 10).max(1);
        let tail = &self.losses[self.losses.len() - n..];
        tail.iter().sum::<f64>() / n as f64
    }

    pub fn write_loss_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "loss"])?;
        for (i, l) in self.losses.iter().enumerate() {
            wr.write_record([i.to_string(), format!("{l:.9e}")])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Trains a model initialized from the configured seed.
pub fn train(cfg: &PipelineConfig) -> Result<TrainReport> {
    let model = Model::new(cfg, cfg.training.seed)?;
    train_model(model, cfg)
}

/// Adam on the per-step mean of the sample losses. Aborts on a non-finite loss.
pub fn train_model(mut model: Model, cfg: &PipelineConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let t = cfg.training;
    let mut opt = Adam::new(t.learning_rate);
    let mut losses = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        model.store.zero_grads();
        let mut total = 0.0;
        for item in 0..t.batch_scenes {
            let sample = training_sample(cfg, t.seed, step, item)?;
            let tape = Tape::new();
            let grads = {
                let s = Scope::new(&tape, &model.store);
                let loss = sample_loss(&model, s, &sample, t.mse_weight)?.scale(1.0 / t.batch_scenes as f64);
                total += loss.value().item();
                tape.backward(loss)
            };
            grads.accumulate_into(&mut model.store);
        }
        if !total.is_finite() {
            return Err(Error::Divergence { step, loss: total });
        }
        losses.push(total);
        opt.step(&mut model.store);
        if (step + 1) % 100 == 0 {
            log::info!("{} step {}: loss {:.5}", model.toggles.label(), step + 1, total);
        }
    }
    Ok(TrainReport { model, losses })
}
