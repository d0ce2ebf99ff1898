use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoise::DEFAULT_STATE_DIM;
use crate::error::{Error, Result};
use crate::selector::{validate_scales, DEFAULT_RETENTION, DEFAULT_SCALES};
use crate::sim::{ChannelConfig, GridSpec, ScenarioSpec};

/// Which fusion stages run. Disabled stages are exact passthroughs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub temporal_sync: bool,
    pub wavelet_denoise: bool,
    pub adaptive_select: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::FULL
    }
}

impl Toggles {
    pub const BASELINE: Toggles = Toggles::new(false, false, false);
    pub const FULL: Toggles = Toggles::new(true, true, true);

    pub const fn new(temporal_sync: bool, wavelet_denoise: bool, adaptive_select: bool) -> Self {
        Toggles {
            temporal_sync,
            wavelet_denoise,
            adaptive_select,
        }
    }

    /// The seven ablation rows, baseline first and full last.
    pub fn ablation() -> [Toggles; 7] {
        [
            Toggles::BASELINE,
            Toggles::new(true, false, false),
            Toggles::new(false, true, false),
            Toggles::new(false, false, true),
            Toggles::new(true, true, false),
            Toggles::new(true, false, true),
            Toggles::FULL,
        ]
    }

    /// Short row label such as `stsync+adpsel`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.temporal_sync {
            parts.push("stsync");
        }
        if self.wavelet_denoise {
            parts.push("wtden");
        }
        if self.adaptive_select {
            parts.push("adpsel");
        }
        if parts.is_empty() {
            "baseline".into()
        } else if parts.len() == 3 {
            "full".into()
        } else {
            parts.join("+")
        }
    }

    pub fn enabled_count(&self) -> usize {
        [self.temporal_sync, self.wavelet_denoise, self.adaptive_select]
            .iter()
            .filter(|&&b| b)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_scenes: usize,
    pub seed: u64,
    /// Weight of the feature-to-clean MSE term added to the occupancy BCE.
    pub mse_weight: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 500,
            learning_rate: 1e-3,
            batch_scenes: 1,
            seed: 0,
            mse_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub scenarios: usize,
    /// Ticks scored per scenario after the warm-up.
    pub ticks: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scenarios: 8,
            ticks: 8,
            seed: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub buffer: usize,
    pub scales: Vec<usize>,
    pub retention: f64,
    pub state_dim: usize,
    pub channel: ChannelConfig,
    pub scenario: ScenarioSpec,
    pub training: TrainingConfig,
    pub evaluation: EvalConfig,
    pub modules: Toggles,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid: GridSpec::default(),
            buffer: 4,
            scales: DEFAULT_SCALES.to_vec(),
            retention: DEFAULT_RETENTION,
            state_dim: DEFAULT_STATE_DIM,
            channel: ChannelConfig {
                max_latency: 3,
                ..ChannelConfig::default()
            }
            .with_noise(0.2),
            scenario: ScenarioSpec::default(),
            training: TrainingConfig::default(),
            evaluation: EvalConfig::default(),
            modules: Toggles::FULL,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        validate_scales(&self.scales)?;
        for &s in &self.scales {
            if !self.grid.h.is_multiple_of(s) || !self.grid.w.is_multiple_of(s) {
                return Err(Error::Config(format!(
                    "scale {s} does not divide the {}×{} grid",
                    self.grid.h, self.grid.w
                )));
            }
        }
        if !(self.retention > 0.0 && self.retention <= 1.0) {
            return Err(Error::Config(format!("retention {} outside (0, 1]", self.retention)));
        }
        if self.buffer == 0 {
            return Err(Error::Config("buffer length must be positive".into()));
        }
        if self.state_dim == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if self.training.steps == 0 || self.training.batch_scenes == 0 {
            return Err(Error::Config(
                "training needs at least one step and one scene per step".into(),
            ));
        }
        if self.training.learning_rate.is_nan() || self.training.learning_rate < 0.0 {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.scenario.agents == 0 {
            return Err(Error::Config("scenarios need at least the ego agent".into()));
        }
        if self.evaluation.scenarios == 0 || self.evaluation.ticks == 0 {
            return Err(Error::Config(
                "evaluation needs at least one scenario and one tick".into(),
            ));
        }
        self.channel.validate()
    }

    /// Ticks simulated before any tick is scored.
    pub fn warmup(&self) -> usize {
        self.buffer + 5
    }

    pub fn from_json(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        PipelineConfig::from_json(&text)
    }

    pub fn with_modules(&self, modules: Toggles) -> PipelineConfig {
        PipelineConfig {
            modules,
            ..self.clone()
        }
    }
}
