//! Synthetic multi-agent world: moving rectangles, static agents with a
//! limited field of view, BEV rasterization, pose noise, rigid transforms
//! into the ego frame, and a channel that drops and delays packets.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{bilinear_sample_forward, Tensor};

/// Heading noise unit: a sweep value of `sigma` means `sigma * HEADING_UNIT` radians.
pub const HEADING_UNIT: f64 = PI / 18.0;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose2D {
            x,
            y,
            heading: wrap_angle(heading),
        }
    }

    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
    }

    pub fn to_local(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (s, c) = self.heading.sin_cos();
        let (dx, dy) = (wx - self.x, wy - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// Axis-aligned rectangle moving at constant velocity (meters per tick).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default)]
    pub vx: f64,
    #[serde(default)]
    pub vy: f64,
}

impl SceneObject {
    fn contains(&self, wx: f64, wy: f64) -> bool {
        (wx - self.x).abs() <= 0.5 * self.w && (wy - self.y).abs() <= 0.5 * self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    /// Object centres stay within `[-bound, bound]` on both axes.
    pub bound: f64,
    pub seed: u64,
}

fn reflect(p: f64, v: f64, bound: f64) -> (f64, f64) {
    if p > bound {
        (2.0 * bound - p, -v)
    } else if p < -bound {
        (-2.0 * bound - p, -v)
    } else {
        (p, v)
    }
}

/// Advances every object one tick, reflecting at the bounds.
pub fn step_scene(scene: &Scene) -> Scene {
    let objects = scene
        .objects
        .iter()
        .map(|o| {
            let (x, vx) = reflect(o.x + o.vx, o.vx, scene.bound);
            let (y, vy) = reflect(o.y + o.vy, o.vy, scene.bound);
            SceneObject { x, y, vx, vy, ..*o }
        })
        .collect();
    Scene {
        objects,
        bound: scene.bound,
        seed: scene.seed,
    }
}

/// Raster geometry shared by every agent. Column index grows with local x,
/// row index with local y; the agent sits at the grid centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub cell_m: f64,
    pub channels: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            h: 32,
            w: 32,
            cell_m: 1.0,
            channels: 8,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || !self.h.is_multiple_of(4) || !self.w.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "grid {}×{} must be divisible by 4",
                self.h, self.w
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("at least one feature channel is required".into()));
        }
        if self.cell_m.is_nan() || self.cell_m <= 0.0 {
            return Err(Error::Config(format!("cell size {} must be positive", self.cell_m)));
        }
        Ok(())
    }

    /// Local coordinates of the centre of cell `(row, col)`.
    pub fn cell_center(&self, row: f64, col: f64) -> (f64, f64) {
        (
            (col + 0.5 - self.w as f64 / 2.0) * self.cell_m,
            (row + 0.5 - self.h as f64 / 2.0) * self.cell_m,
        )
    }

    /// Fractional `(row, col)` of a local position.
    pub fn cell_of(&self, lx: f64, ly: f64) -> (f64, f64) {
        (
            ly / self.cell_m + self.h as f64 / 2.0 - 0.5,
            lx / self.cell_m + self.w as f64 / 2.0 - 0.5,
        )
    }
}

/// Value of positional channel `k >= 1` at cell `(row, col)`.
fn coordinate_channel(k: usize, row: usize, col: usize, grid: &GridSpec) -> f64 {
    let m = k - 1;
    let octave = (m / 4) as i32;
    let period = grid.h.max(grid.w) as f64 / 2f64.powi(octave);
    let coord = if m.is_multiple_of(2) { col } else { row } as f64;
    let phase = 2.0 * PI * (coord + 0.5) / period;
    if (m / 2).is_multiple_of(2) {
        0.5 * phase.sin()
    } else {
        0.5 * phase.cos()
    }
}

/// Occupancy in channel 0 (cells whose centre lies in an object and within
/// `fov_m` of the agent), fixed positional encodings in channels `1..C`.
pub fn render_bev(scene: &Scene, pose: &Pose2D, grid: &GridSpec, fov_m: f64) -> Tensor {
    let (h, w) = (grid.h, grid.w);
    let mut out = Tensor::zeros(&[grid.channels, h, w]);
    let data = out.data_mut();
    for r in 0..h {
        for c in 0..w {
            let (lx, ly) = grid.cell_center(r as f64, c as f64);
            if lx.hypot(ly) <= fov_m {
                let (wx, wy) = pose.to_world(lx, ly);
                if scene.objects.iter().any(|o| o.contains(wx, wy)) {
                    data[r * w + c] = 1.0;
                }
            }
            for k in 1..grid.channels {
                data[(k * h + r) * w + c] = coordinate_channel(k, r, c, grid);
            }
        }
    }
    out
}

/// Occupancy of every object in the agent's grid, ignoring field of view.
pub fn ground_truth(scene: &Scene, pose: &Pose2D, grid: &GridSpec) -> Tensor {
    let single = GridSpec { channels: 1, ..*grid };
    render_bev(scene, pose, &single, f64::INFINITY)
        .reshape(&[grid.h, grid.w])
        .expect("same size")
}

/// Gaussian localization and heading noise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseNoise {
    pub loc_sigma: f64,
    pub head_sigma: f64,
}

/// Adds zero-mean noise to position and heading. Always consumes three
/// normal draws so streams stay aligned across noise levels.
pub fn perturb_pose<R: Rng + ?Sized>(pose: &Pose2D, noise: &PoseNoise, rng: &mut R) -> Pose2D {
    let nx: f64 = StandardNormal.sample(rng);
    let ny: f64 = StandardNormal.sample(rng);
    let nh: f64 = StandardNormal.sample(rng);
    Pose2D::new(
        pose.x + noise.loc_sigma * nx,
        pose.y + noise.loc_sigma * ny,
        pose.heading + noise.head_sigma * nh,
    )
}

/// Source `(row, col)` in the sender grid for every ego cell.
pub fn ego_sampling_grid(sender: &Pose2D, ego: &Pose2D, grid: &GridSpec) -> Tensor {
    let (h, w) = (grid.h, grid.w);
    let mut coords = Tensor::zeros(&[2, h, w]);
    let d = coords.data_mut();
    for r in 0..h {
        for c in 0..w {
            let (lx, ly) = grid.cell_center(r as f64, c as f64);
            let (wx, wy) = ego.to_world(lx, ly);
            let (sx, sy) = sender.to_local(wx, wy);
            let (sr, sc) = grid.cell_of(sx, sy);
            d[r * w + c] = sr;
            d[h * w + r * w + c] = sc;
        }
    }
    coords
}

/// Resamples a sender-frame grid into the ego frame; cells that map
/// outside the sender grid read zero.
pub fn transform_to_ego(feature: &Tensor, sender: &Pose2D, ego: &Pose2D, grid: &GridSpec) -> Result<Tensor> {
    bilinear_sample_forward(feature, &ego_sampling_grid(sender, ego, grid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    #[serde(rename = "L_ticks")]
    pub max_latency: u32,
    pub drop_p: f64,
    #[serde(default)]
    pub loc_sigma: f64,
    /// Radians.
    #[serde(default)]
    pub head_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            max_latency: 0,
            drop_p: 0.0,
            loc_sigma: 0.0,
            head_sigma: 0.0,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    /// Both noise axes from one sweep value: `sigma` meters and `sigma` heading units.
    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.loc_sigma = sigma;
        self.head_sigma = sigma * HEADING_UNIT;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_p) {
            return Err(Error::Config(format!(
                "drop probability {} outside [0, 1]",
                self.drop_p
            )));
        }
        if !(self.loc_sigma >= 0.0 && self.head_sigma >= 0.0) {
            return Err(Error::Config("noise sigmas must be non-negative".into()));
        }
        Ok(())
    }

    pub fn noise(&self) -> PoseNoise {
        PoseNoise {
            loc_sigma: self.loc_sigma,
            head_sigma: self.head_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePacket {
    pub sender: u32,
    pub emit_tick: i64,
    pub arrive_tick: i64,
    pub reported_pose: Pose2D,
    pub feature: Tensor,
}

/// One emitted packet as seen by the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: i64,
    pub sender: u32,
    pub emit_tick: i64,
    pub arrive_tick: i64,
    pub dropped: bool,
}

/// Drops each packet with probability `p` and delays survivors by a
/// uniform integer latency in `[0, L]`.
#[derive(Debug, Clone)]
pub struct Channel {
    cfg: ChannelConfig,
    rng: ChaCha8Rng,
    in_flight: Vec<FeaturePacket>,
    trace: Vec<TraceRecord>,
}

impl Channel {
    pub fn new(cfg: ChannelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Channel {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            in_flight: Vec::new(),
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    /// Sends a packet emitted at `tick`. The drop and latency draws are
    /// taken for every packet regardless of configuration.
    pub fn transmit(&mut self, sender: u32, tick: i64, reported_pose: Pose2D, feature: Tensor) -> TraceRecord {
        let u: f64 = self.rng.random();
        let latency = self.rng.random_range(0..=self.cfg.max_latency) as i64;
        let dropped = u < self.cfg.drop_p;
        let rec = TraceRecord {
            tick,
            sender,
            emit_tick: tick,
            arrive_tick: tick + latency,
            dropped,
        };
        self.trace.push(rec);
        if !dropped {
            self.in_flight.push(FeaturePacket {
                sender,
                emit_tick: tick,
                arrive_tick: tick + latency,
                reported_pose,
                feature,
            });
        }
        rec
    }

    /// Removes and returns every packet with `arrive_tick <= now`, ordered
    /// by `(arrive_tick, sender)`.
    pub fn deliver(&mut self, now: i64) -> Vec<FeaturePacket> {
        let (mut ready, pending): (Vec<_>, Vec<_>) = std::mem::take(&mut self.in_flight)
            .into_iter()
            .partition(|p| p.arrive_tick <= now);
        self.in_flight = pending;
        ready.sort_by_key(|p| (p.arrive_tick, p.sender, p.emit_tick));
        ready
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for rec in trace {
        wr.serialize(rec)?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: u32,
    pub pose: Pose2D,
    pub fov_m: f64,
}

/// A complete scenario file. The first agent is the ego vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub ticks: usize,
    pub agents: Vec<AgentSpec>,
    pub objects: Vec<SceneObject>,
    pub channel: ChannelConfig,
    #[serde(default = "default_bound")]
    pub bound: f64,
}

fn default_bound() -> f64 {
    24.0
}

/// Knobs for procedurally generated scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub agents: usize,
    pub objects: usize,
    pub ticks: usize,
    pub fov_m: f64,
    /// Collaborator distance range from the ego vehicle, meters.
    pub agent_distance: (f64, f64),
    /// Object speed range, meters per tick.
    pub speed: (f64, f64),
    pub bound: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            agents: 3,
            objects: 10,
            ticks: 24,
            fov_m: 12.0,
            agent_distance: (8.0, 14.0),
            speed: (0.5, 1.5),
            bound: 20.0,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::Config("scenario needs at least the ego agent".into()));
        }
        if self.bound.is_nan() || self.bound <= 0.0 {
            return Err(Error::Config(format!("bound {} must be positive", self.bound)));
        }
        self.channel.validate()
    }

    /// Random static agents around an ego vehicle at the origin, and
    /// objects moving along straight lines.
    pub fn generate(spec: &ScenarioSpec, seed: u64, channel: ChannelConfig) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut agents = vec![AgentSpec {
            id: 0,
            pose: Pose2D::new(0.0, 0.0, 0.0),
            fov_m: spec.fov_m,
        }];
        let n = spec.agents.max(1);
        let base: f64 = rng.random_range(0.0..2.0 * PI);
        for i in 1..n {
            let ang = base + 2.0 * PI * (i - 1) as f64 / (n - 1) as f64 + rng.random_range(-0.3..0.3);
            let d = rng.random_range(spec.agent_distance.0..=spec.agent_distance.1);
            agents.push(AgentSpec {
                id: i as u32,
                pose: Pose2D::new(d * ang.cos(), d * ang.sin(), rng.random_range(-PI..PI)),
                fov_m: spec.fov_m,
            });
        }
        let objects = (0..spec.objects)
            .map(|_| {
                let dir: f64 = rng.random_range(-PI..PI);
                let speed = rng.random_range(spec.speed.0..=spec.speed.1);
                SceneObject {
                    x: rng.random_range(-spec.bound..spec.bound),
                    y: rng.random_range(-spec.bound..spec.bound),
                    w: rng.random_range(2.0..4.5),
                    h: rng.random_range(1.5..2.5),
                    vx: speed * dir.cos(),
                    vy: speed * dir.sin(),
                }
            })
            .collect();
        Scenario {
            seed,
            ticks: spec.ticks,
            agents,
            objects,
            channel: ChannelConfig {
                seed: seed ^ 0x9e37_79b9_7f4a_7c15,
                ..channel
            },
            bound: spec.bound,
        }
    }

    pub fn from_json(text: &str) -> Result<Scenario> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario> {
        Scenario::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn initial_scene(&self) -> Scene {
        Scene {
            objects: self.objects.clone(),
            bound: self.bound,
            seed: self.seed,
        }
    }
}

/// A collaborator packet after reception, already in the ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Received {
    pub sender: u32,
    pub emit_tick: i64,
    pub arrive_tick: i64,
    pub feature: Tensor,
}

/// Everything the ego vehicle and the evaluator see at one tick.
#[derive(Debug, Clone)]
pub struct Frame {
    pub tick: i64,
    pub ego_feature: Tensor,
    pub delivered: Vec<Received>,
    /// `H×W` occupancy of all objects in the ego grid.
    pub ground_truth: Tensor,
    /// Ego feature whose occupancy is the union of every agent's current,
    /// noise-free view.
    pub clean: Tensor,
}

/// Runs a scenario tick by tick.
#[derive(Debug, Clone)]
pub struct World {
    scenario: Scenario,
    grid: GridSpec,
    scene: Scene,
    channel: Channel,
    noise_rng: ChaCha8Rng,
    tick: i64,
}

impl World {
    pub fn new(scenario: Scenario, grid: GridSpec) -> Result<Self> {
        scenario.validate()?;
        grid.validate()?;
        let channel = Channel::new(scenario.channel)?;
        Ok(World {
            scene: scenario.initial_scene(),
            noise_rng: ChaCha8Rng::seed_from_u64(scenario.channel.seed.rotate_left(17) ^ 0x5851_f42d),
            channel,
            scenario,
            grid,
            tick: 0,
        })
    }

    pub fn tick(&self) -> i64 {
        self.tick
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.channel.trace()
    }

    /// Renders the current tick, transmits collaborator features, collects
    /// deliveries, then advances the scene.
    pub fn advance(&mut self) -> Result<Frame> {
        let t = self.tick;
        let ego = self.scenario.agents[0];
        let grid = self.grid;
        let ego_feature = render_bev(&self.scene, &ego.pose, &grid, ego.fov_m);
        let mut clean = ego_feature.clone();
        let plane = grid.h * grid.w;
        let noise = self.scenario.channel.noise();
        for agent in &self.scenario.agents[1..] {
            let feature = render_bev(&self.scene, &agent.pose, &grid, agent.fov_m);
            let aligned = transform_to_ego(&feature, &agent.pose, &ego.pose, &grid)?;
            for (dst, &src) in clean.data_mut()[..plane].iter_mut().zip(&aligned.data()[..plane]) {
                *dst = dst.max(src);
            }
            let reported = perturb_pose(&agent.pose, &noise, &mut self.noise_rng);
            self.channel.transmit(agent.id, t, reported, feature);
        }
        let mut delivered = Vec::new();
        for p in self.channel.deliver(t) {
            delivered.push(Received {
                sender: p.sender,
                emit_tick: p.emit_tick,
                arrive_tick: p.arrive_tick,
                feature: transform_to_ego(&p.feature, &p.reported_pose, &ego.pose, &grid)?,
            });
        }
        let frame = Frame {
            tick: t,
            ground_truth: ground_truth(&self.scene, &ego.pose, &grid),
            ego_feature,
            delivered,
            clean,
        };
        self.scene = step_scene(&self.scene);
        self.tick += 1;
        Ok(frame)
    }
}

/// Latest received feature per collaborator, by emit tick.
#[derive(Debug, Clone, Default)]
pub struct ReceivedStore {
    latest: BTreeMap<u32, (i64, Tensor)>,
}

impl ReceivedStore {
    pub fn insert(&mut self, r: Received) {
        match self.latest.get(&r.sender) {
            Some((emit, _)) if *emit >= r.emit_tick => {}
            _ => {
                self.latest.insert(r.sender, (r.emit_tick, r.feature));
            }
        }
    }

    /// Features in sender order.
    pub fn features(&self) -> impl Iterator<Item = (u32, i64, &Tensor)> {
        self.latest.iter().map(|(&s, (e, f))| (s, *e, f))
    }

    pub fn len(&self) -> usize {
        self.latest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latest.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::default()
    }

    fn scene(objects: Vec<SceneObject>) -> Scene {
        Scene {
            objects,
            bound: 20.0,
            seed: 0,
        }
    }

    fn obj(x: f64, y: f64, w: f64, h: f64) -> SceneObject {
        SceneObject {
            x,
            y,
            w,
            h,
            vx: 0.0,
            vy: 0.0,
        }
    }

    #[test]
    fn wrap_keeps_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(PI + 0.1) - (-PI + 0.1)).abs() < 1e-12);
        assert!((wrap_angle(7.0 * PI) - PI).abs() < 1e-12);
    }

    #[test]
    fn scene_stepping() {
        let s = scene(vec![obj(1.0, 2.0, 2.0, 2.0)]);
        assert_eq!(step_scene(&s), s);
        let mut s = scene(vec![SceneObject {
            vx: 1.0,
            ..obj(0.0, 0.0, 2.0, 2.0)
        }]);
        for _ in 0..3 {
            s = step_scene(&s);
        }
        assert_eq!(s.objects[0].x, 3.0);
        let s = scene(vec![SceneObject {
            vx: 2.0,
            ..obj(19.0, 0.0, 2.0, 2.0)
        }]);
        let n = step_scene(&s);
        assert_eq!(n.objects[0].x, 19.0);
        assert_eq!(n.objects[0].vx, -2.0);
    }

    #[test]
    fn render_cases() {
        let g = grid();
        let origin = Pose2D::new(0.0, 0.0, 0.0);
        let empty = render_bev(&scene(vec![]), &origin, &g, 100.0);
        assert!(empty.channel(0).iter().all(|&v| v == 0.0));
        let one = render_bev(&scene(vec![obj(0.0, 0.0, 2.0, 2.0)]), &origin, &g, 100.0);
        let occupied: Vec<usize> = (0..32 * 32).filter(|&p| one.channel(0)[p] == 1.0).collect();
        assert_eq!(occupied, vec![15 * 32 + 15, 15 * 32 + 16, 16 * 32 + 15, 16 * 32 + 16]);
        assert!(one.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let narrow = render_bev(&scene(vec![obj(10.0, 0.0, 2.0, 2.0)]), &origin, &g, 5.0);
        assert!(narrow.channel(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn render_translation_shifts_occupancy() {
        let g = grid();
        let s = scene(vec![obj(3.0, -2.0, 3.0, 2.0), obj(-6.0, 5.0, 2.0, 4.0)]);
        let a = render_bev(&s, &Pose2D::new(0.0, 0.0, 0.0), &g, 100.0);
        let b = render_bev(&s, &Pose2D::new(2.0, 1.0, 0.0), &g, 100.0);
        for r in 1..31 {
            for c in 2..32 {
                assert_eq!(b.at(&[0, r - 1, c - 2]), a.at(&[0, r, c]));
            }
        }
    }

    #[test]
    fn ground_truth_ignores_fov() {
        let g = grid();
        let s = scene(vec![obj(10.0, 0.0, 2.0, 2.0)]);
        let gt = ground_truth(&s, &Pose2D::new(0.0, 0.0, 0.0), &g);
        assert_eq!(gt.shape(), &[32, 32]);
        assert_eq!(gt.sum(), 4.0);
    }

    #[test]
    fn pose_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Pose2D::new(1.0, 2.0, 0.5);
        assert_eq!(perturb_pose(&p, &PoseNoise::default(), &mut rng), p);
        let noise = PoseNoise {
            loc_sigma: 0.3,
            head_sigma: 0.0,
        };
        let xs: Vec<f64> = (0..10_000)
            .map(|_| perturb_pose(&p, &noise, &mut rng).x - 1.0)
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
        assert!((sd - 0.3).abs() < 0.05 * 0.3, "{sd}");
        let edge = Pose2D::new(0.0, 0.0, PI - 1e-3);
        let spun = perturb_pose(
            &edge,
            &PoseNoise {
                loc_sigma: 0.0,
                head_sigma: 1.0,
            },
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        assert!(spun.heading > -PI && spun.heading <= PI);
    }

    #[test]
    fn transform_identity_and_shift() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::randn(&[8, 32, 32], 1.0, &mut rng);
        let p = Pose2D::new(3.0, -1.0, 0.7);
        let same = transform_to_ego(&f, &p, &p, &g).unwrap();
        assert!(same.max_abs_diff(&f) < 1e-9);
        // Ego one cell to the +x of the sender: ego column c reads sender column c + 1.
        let sender = Pose2D::new(0.0, 0.0, 0.0);
        let ego = Pose2D::new(1.0, 0.0, 0.0);
        let out = transform_to_ego(&f, &sender, &ego, &g).unwrap();
        for k in 0..8 {
            for r in 0..32 {
                for c in 0..32 {
                    let expected = if c < 31 { f.at(&[k, r, c + 1]) } else { 0.0 };
                    assert!((out.at(&[k, r, c]) - expected).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn channel_extremes() {
        let feature = Tensor::zeros(&[1, 4, 4]);
        let pose = Pose2D::new(0.0, 0.0, 0.0);
        let mut ch = Channel::new(ChannelConfig::default()).unwrap();
        for t in 0..5 {
            ch.transmit(1, t, pose, feature.clone());
            let d = ch.deliver(t);
            assert_eq!(d.len(), 1);
            assert_eq!(d[0].arrive_tick, t);
        }
        let mut ch = Channel::new(ChannelConfig {
            drop_p: 1.0,
            max_latency: 2,
            ..Default::default()
        })
        .unwrap();
        for t in 0..50 {
            ch.transmit(1, t, pose, feature.clone());
            assert!(ch.deliver(t).is_empty());
        }
        assert!(Channel::new(ChannelConfig {
            drop_p: 1.5,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn delivery_order_and_latency_bound() {
        let pose = Pose2D::new(0.0, 0.0, 0.0);
        let cfg = ChannelConfig {
            max_latency: 3,
            seed: 9,
            ..Default::default()
        };
        let mut ch = Channel::new(cfg).unwrap();
        let mut got = Vec::new();
        for t in 0..40 {
            for s in [2, 1] {
                ch.transmit(s, t, pose, Tensor::zeros(&[1]));
            }
            let d = ch.deliver(t);
            for w in d.windows(2) {
                assert!((w[0].arrive_tick, w[0].sender) <= (w[1].arrive_tick, w[1].sender));
            }
            got.extend(d.into_iter().map(|p| (p.emit_tick, p.arrive_tick)));
        }
        assert!(got.iter().all(|&(e, a)| (0..=3).contains(&(a - e))));
    }

    #[test]
    fn world_is_deterministic_and_trace_serializes() {
        let spec = ScenarioSpec {
            ticks: 6,
            ..Default::default()
        };
        let cfg = ChannelConfig {
            max_latency: 2,
            drop_p: 0.2,
            ..Default::default()
        }
        .with_noise(0.2);
        let sc = Scenario::generate(&spec, 11, cfg);
        let run = || {
            let mut w = World::new(sc.clone(), grid()).unwrap();
            let frames: Vec<Frame> = (0..6).map(|_| w.advance().unwrap()).collect();
            (frames, w.trace().to_vec())
        };
        let (fa, ta) = run();
        let (fb, tb) = run();
        assert_eq!(ta, tb);
        for (a, b) in fa.iter().zip(&fb) {
            assert_eq!(a.delivered, b.delivered);
            assert_eq!(a.clean, b.clean);
        }
        let mut buf = Vec::new();
        write_trace_csv(&ta, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("tick,sender,emit_tick,arrive_tick,dropped\n"));
        assert_eq!(text.lines().count(), 1 + 6 * 2);
    }

    #[test]
    fn scenario_json_round_trip() {
        let sc = Scenario::generate(&ScenarioSpec::default(), 4, ChannelConfig::default());
        let text = serde_json::to_string(&sc).unwrap();
        assert!(text.contains("\"L_ticks\""));
        assert!(text.contains("\"fov_m\""));
        assert_eq!(Scenario::from_json(&text).unwrap(), sc);
        assert!(Scenario::from_json("{\"seed\": 1}").is_err());
    }
}
