//! Latency compensation: agent integration, a recurrent motion-aligned unit
//! rolled over a history buffer, and deformable cross-attention against the
//! ego vehicle's live feature.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{identity_grid, Conv2d, ConvSpec, Init, Linear, ParamStore, Scope, Tensor, Var};

/// Default number of deformable cross-attention sampling points per query.
pub const DCA_POINTS: usize = 4;
/// Channel reduction of the gate's channel-attention perceptron.
pub const GATE_REDUCTION: usize = 4;
/// Kernel size of the gate's spatial-attention convolution.
pub const GATE_SPATIAL_KERNEL: usize = 7;

/// The `K` most recent per-tick entries, oldest first, ticks contiguous.
#[derive(Debug, Clone)]
pub struct FeatureBuffer<T> {
    capacity: usize,
    entries: VecDeque<(i64, T)>,
}

impl<T: Clone> FeatureBuffer<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("FeatureBuffer", "capacity must be positive"));
        }
        Ok(FeatureBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_tick(&self) -> Option<i64> {
        self.entries.back().map(|(t, _)| *t)
    }

    /// Appends the entry for `tick`, evicting the oldest beyond capacity.
    /// Ticks must follow the previous entry by exactly one.
    pub fn push(&mut self, tick: i64, entry: T) -> Result<()> {
        if let Some(last) = self.last_tick() {
            if tick != last + 1 {
                return Err(Error::invalid(
                    "FeatureBuffer::push",
                    format!("tick {tick} does not follow {last}"),
                ));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((tick, entry));
        Ok(())
    }

    /// Appends `entry`, or repeats the newest entry when it is missing.
    /// Returns false when nothing could be filled (empty buffer, no entry).
    pub fn push_or_fill(&mut self, tick: i64, entry: Option<T>) -> Result<bool> {
        match entry.or_else(|| self.entries.back().map(|(_, e)| e.clone())) {
            Some(e) => self.push(tick, e).map(|_| true),
            None => Ok(false),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &T> {
        self.entries.iter().map(|(_, e)| e)
    }

    pub fn ticks(&self) -> impl Iterator<Item = i64> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }
}

fn require_same(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb || sa.len() != 3 {
        return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
    }
    Ok(sa)
}

/// Fuses an `N×C×H×W` agent stack: max and mean over agents, stacked on a
/// depth axis of size two, collapsed by a `C×C×2×3×3` 3D convolution.
#[derive(Debug, Clone)]
pub struct Integrator {
    pub kernel: crate::numerics::ParamId,
    pub bias: crate::numerics::ParamId,
    channels: usize,
}

impl Integrator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let c = channels;
        // Start near "average the two streams": 0.5 on each depth slice of the centre tap.
        let mut k = Tensor::randn(&[c, c, 2, 3, 3], 0.02, rng);
        for o in 0..c {
            for d in 0..2 {
                let v = k.at(&[o, o, d, 1, 1]);
                k.set(&[o, o, d, 1, 1], v + 0.5);
            }
        }
        Integrator {
            kernel: store.add(format!("{name}.conv3d.weight"), k),
            bias: store.add(format!("{name}.conv3d.bias"), Tensor::zeros(&[c])),
            channels,
        }
    }

    /// Kernel that outputs the mean of the max and average streams.
    pub fn stream_average_kernel(channels: usize) -> Tensor {
        let mut k = Tensor::zeros(&[channels, channels, 2, 3, 3]);
        for o in 0..channels {
            k.set(&[o, o, 0, 1, 1], 0.5);
            k.set(&[o, o, 1, 1, 1], 0.5);
        }
        k
    }

    pub fn forward<'t>(&self, s: Scope<'t, '_>, agents: Var<'t>) -> Result<Var<'t>> {
        let shape = agents.shape();
        let (n, c, h, w) = match shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::shape(
                    "integrate_agents",
                    format!("expected N×C×H×W, got {:?}", shape),
                ))
            }
        };
        if n == 0 {
            return Err(Error::invalid("integrate_agents", "empty agent stack"));
        }
        if c != self.channels {
            return Err(Error::shape(
                "integrate_agents",
                format!("agents have {c} channels, integrator expects {}", self.channels),
            ));
        }
        let max = agents.max_axis(0, false)?.reshape(&[c, 1, h, w])?;
        let avg = agents.mean_axis(0, false)?.reshape(&[c, 1, h, w])?;
        // Channel index c*2 + depth matches the 3D kernel's (C_in, depth) flattening.
        let stacked = Var::concat(&[max, avg], 1)?.reshape(&[2 * c, h, w])?;
        let kernel = s.param(self.kernel).reshape(&[c, 2 * c, 3, 3])?;
        stacked.conv2d(kernel, Some(s.param(self.bias)), ConvSpec::same(3))
    }
}

/// Spatial and channel attention producing the convex blend coefficient.
#[derive(Debug, Clone)]
pub struct StGate {
    pub spatial: Conv2d,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Blend coefficient and blended state of one gate evaluation.
#[derive(Debug, Clone, Copy)]
pub struct GateOutput<'t> {
    pub alpha: Var<'t>,
    pub fused: Var<'t>,
}

impl StGate {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let c2 = 2 * channels;
        let hidden = (c2 / GATE_REDUCTION).max(1);
        StGate {
            spatial: Conv2d::new(
                store,
                &format!("{name}.spatial"),
                c2,
                1,
                GATE_SPATIAL_KERNEL,
                ConvSpec::same(GATE_SPATIAL_KERNEL),
                true,
                Init::Scaled(0.5),
                rng,
            ),
            fc1: Linear::new(store, &format!("{name}.fc1"), c2, hidden, true, Init::Scaled(1.0), rng),
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                hidden,
                channels,
                true,
                Init::Scaled(0.5),
                rng,
            ),
        }
    }

    pub fn forward<'t>(&self, s: Scope<'t, '_>, hidden: Var<'t>, warped: Var<'t>) -> Result<GateOutput<'t>> {
        let shape = require_same("st_gate", &hidden, &warped)?;
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let both = Var::concat(&[hidden, warped], 0)?;
        let spatial = self.spatial.forward(s, both)?; // 1×H×W
        let pooled = both.mean_axis(2, false)?.mean_axis(1, false)?.reshape(&[1, 2 * c])?;
        let channel = self
            .fc2
            .forward(s, self.fc1.forward(s, pooled)?.silu())?
            .reshape(&[c, 1, 1])?;
        let alpha = spatial.add(channel)?.sigmoid(); // broadcast to C×H×W
        debug_assert_eq!(alpha.shape(), vec![c, h, w]);
        let fused = hidden.add(alpha.mul(warped.sub(hidden)?)?)?;
        Ok(GateOutput { alpha, fused })
    }
}

/// Samples `feature` at grid-plus-offset positions, then applies a learned 3×3 conv.
#[derive(Debug, Clone)]
pub struct DeformWarp {
    pub conv: Conv2d,
}

impl DeformWarp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        DeformWarp {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                channels,
                channels,
                3,
                ConvSpec::same(3),
                true,
                Init::Identity {
                    scale: 1.0,
                    noise: 0.01,
                },
                rng,
            ),
        }
    }

    pub fn forward<'t>(&self, s: Scope<'t, '_>, feature: Var<'t>, offsets: Var<'t>) -> Result<Var<'t>> {
        let fs = feature.shape();
        let os = offsets.shape();
        if fs.len() != 3 || os != [2, fs[1], fs[2]] {
            return Err(Error::shape(
                "deform_warp",
                format!("feature {:?} with offsets {:?}", fs, os),
            ));
        }
        let grid = s.constant(identity_grid(fs[1], fs[2]));
        let sampled = feature.bilinear_sample(grid.add(offsets)?)?;
        self.conv.forward(s, sampled)
    }
}

/// Deformable cross-attention: each query emits `M` sampling offsets and
/// logits from its own feature vector and reads the ego feature there.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub proj: Conv2d,
    pub points: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        points: usize,
        rng: &mut R,
    ) -> Self {
        // Small random weights break the symmetry between sampling points;
        // at zero they would all read the query position with equal weight.
        let proj = Conv2d::new(
            store,
            &format!("{name}.offset_logit"),
            channels,
            3 * points,
            1,
            ConvSpec::same(1),
            true,
            Init::Scaled(0.01),
            rng,
        );
        CrossAttention { proj, points }
    }

    pub fn forward<'t>(&self, s: Scope<'t, '_>, predicted: Var<'t>, ego: Var<'t>) -> Result<Var<'t>> {
        let shape = require_same("dca_refine", &predicted, &ego)?;
        let (h, w) = (shape[1], shape[2]);
        let m = self.points;
        let proj = self.proj.forward(s, predicted)?;
        let weights = proj.narrow(0, 2 * m, m)?.softmax(0)?;
        let grid = s.constant(identity_grid(h, w));
        let mut acc = predicted;
        for p in 0..m {
            let coords = grid.add(proj.narrow(0, 2 * p, 2)?)?;
            let value = ego.bilinear_sample(coords)?;
            acc = acc.add(weights.narrow(0, p, 1)?.mul(value)?)?;
        }
        Ok(acc)
    }
}

/// Recurrent synchronization over the history buffer plus ego anchoring.
/// Parameters are shared across recurrence steps.
#[derive(Debug, Clone)]
pub struct TemporalSync {
    pub offset: Conv2d,
    pub warp: DeformWarp,
    pub gate: StGate,
    pub update_offset: Conv2d,
    pub update_warp: DeformWarp,
    pub dca: CrossAttention,
    channels: usize,
}

impl TemporalSync {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let c = channels;
        let offset_conv = |store: &mut ParamStore, n: &str, c_in: usize, rng: &mut R| {
            Conv2d::new(store, n, c_in, 2, 3, ConvSpec::same(3), true, Init::Zeros, rng)
        };
        TemporalSync {
            offset: offset_conv(store, &format!("{name}.motion_offset"), 2 * c, rng),
            warp: DeformWarp::new(store, &format!("{name}.warp"), c, rng),
            gate: StGate::new(store, &format!("{name}.gate"), c, rng),
            update_offset: offset_conv(store, &format!("{name}.update_offset"), c, rng),
            update_warp: DeformWarp::new(store, &format!("{name}.update_warp"), c, rng),
            dca: CrossAttention::new(store, &format!("{name}.dca"), c, DCA_POINTS, rng),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(row, col)` motion offsets from the two preceding entries.
    pub fn predict_offset<'t>(&self, s: Scope<'t, '_>, prev2: Var<'t>, prev1: Var<'t>) -> Result<Var<'t>> {
        require_same("predict_offset", &prev2, &prev1)?;
        self.offset.forward(s, Var::concat(&[prev2, prev1], 0)?)
    }

    pub fn deform_warp<'t>(&self, s: Scope<'t, '_>, feature: Var<'t>, offsets: Var<'t>) -> Result<Var<'t>> {
        self.warp.forward(s, feature, offsets)
    }

    pub fn st_gate<'t>(&self, s: Scope<'t, '_>, hidden: Var<'t>, warped: Var<'t>) -> Result<GateOutput<'t>> {
        self.gate.forward(s, hidden, warped)
    }

    /// Hidden-state update: a conv of the blended state yields offsets that
    /// deformably warp the blended state itself.
    pub fn update<'t>(&self, s: Scope<'t, '_>, blended: Var<'t>) -> Result<Var<'t>> {
        let offsets = self.update_offset.forward(s, blended)?;
        self.update_warp.forward(s, blended, offsets)
    }

    /// Rolls the recurrence over `buffer` (oldest first) and returns the final hidden state.
    pub fn rollout<'t>(&self, s: Scope<'t, '_>, buffer: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *buffer
            .first()
            .ok_or_else(|| Error::invalid("taru_rollout", "empty buffer"))?;
        let zero = s.constant(Tensor::zeros(&first.shape()));
        let mut hidden = first;
        for i in 1..buffer.len() {
            let prev1 = buffer[i - 1];
            let prev2 = if i >= 2 { buffer[i - 2] } else { zero };
            let delta = self.predict_offset(s, prev2, prev1)?;
            let warped = self.deform_warp(s, prev1, delta)?;
            let blended = self.st_gate(s, hidden, warped)?.fused;
            hidden = self.update(s, blended)?;
        }
        Ok(hidden)
    }

    pub fn dca_refine<'t>(&self, s: Scope<'t, '_>, predicted: Var<'t>, ego: Var<'t>) -> Result<Var<'t>> {
        self.dca.forward(s, predicted, ego)
    }

    /// Rollout followed by ego anchoring.
    pub fn forward<'t>(&self, s: Scope<'t, '_>, buffer: &[Var<'t>], ego: Var<'t>) -> Result<Var<'t>> {
        let predicted = self.rollout(s, buffer)?;
        self.dca_refine(s, predicted, ego)
    }
}
