use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{PipelineConfig, Toggles};
use crate::denoise::WaveletDenoiser;
use crate::error::{Error, Result};
use crate::numerics::{Conv2d, ConvSpec, Init, ParamStore, Scope, Tensor, Var};
use crate::selector::AdaptiveSelector;
use crate::temporal::{Integrator, TemporalSync};

/// Every learned stage of the fusion pipeline plus the toy decoder. All
/// stages are always constructed, each from its own seeded stream, so
/// configurations that differ only in toggles start from identical values.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub integrator: Integrator,
    pub temporal: TemporalSync,
    pub denoiser: WaveletDenoiser,
    pub selector: AdaptiveSelector,
    pub decoder: Conv2d,
    pub toggles: Toggles,
    channels: usize,
}

/// Inputs for one scored tick: agent stacks for the buffered ticks (oldest
/// first, each `N×C×H×W`) and the ego vehicle's live feature.
#[derive(Debug, Clone, Copy)]
pub struct TickInput<'a> {
    pub stacks: &'a [Tensor],
    pub ego: &'a Tensor,
}

/// Final fused feature and decoder logits (`H×W`).
#[derive(Debug, Clone, Copy)]
pub struct Forward<'t> {
    pub feature: Var<'t>,
    pub logits: Var<'t>,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(k))
}

impl Model {
    pub fn new(cfg: &PipelineConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let c = cfg.grid.channels;
        let mut store = ParamStore::new();
        let integrator = Integrator::new(&mut store, "integrate", c, &mut stream(seed, 1));
        let temporal = TemporalSync::new(&mut store, "stsync", c, &mut stream(seed, 2));
        let denoiser = WaveletDenoiser::new(&mut store, "wtden", c, cfg.state_dim, &mut stream(seed, 3));
        let selector = AdaptiveSelector::new(
            &mut store,
            "adpsel",
            c,
            &cfg.scales,
            cfg.retention,
            &mut stream(seed, 4),
        )?;
        let decoder = Conv2d::new(
            &mut store,
            "decoder",
            c,
            1,
            1,
            ConvSpec::same(1),
            true,
            Init::Scaled(1.0),
            &mut stream(seed, 5),
        );
        Ok(Model {
            store,
            integrator,
            temporal,
            denoiser,
            selector,
            decoder,
            toggles: cfg.modules,
            channels: c,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Integrates each agent stack into one fused map.
    pub fn integrate<'t>(&self, s: Scope<'t, '_>, stack: &Tensor) -> Result<Var<'t>> {
        self.integrator.forward(s, s.constant(stack.clone()))
    }

    /// The fused feature before decoding.
    pub fn fuse<'t>(&self, s: Scope<'t, '_>, input: TickInput<'_>) -> Result<Var<'t>> {
        let last = input
            .stacks
            .last()
            .ok_or_else(|| Error::invalid("run_pipeline", "empty feature buffer"))?;
        let mut f = if self.toggles.temporal_sync {
            let buffer = input
                .stacks
                .iter()
                .map(|st| self.integrate(s, st))
                .collect::<Result<Vec<_>>>()?;
            self.temporal.forward(s, &buffer, s.constant(input.ego.clone()))?
        } else {
            self.integrate(s, last)?
        };
        if self.toggles.wavelet_denoise {
            f = self.denoiser.forward(s, f)?;
        }
        if self.toggles.adaptive_select {
            f = self.selector.forward(s, f)?.output;
        }
        Ok(f)
    }

    pub fn forward<'t>(&self, s: Scope<'t, '_>, input: TickInput<'_>) -> Result<Forward<'t>> {
        let feature = self.fuse(s, input)?;
        let shape = feature.shape();
        let logits = self.decoder.forward(s, feature)?.reshape(&shape[1..])?;
        Ok(Forward { feature, logits })
    }
}
