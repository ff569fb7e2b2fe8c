//! Closed-loop rollouts and safety metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barriernet::{Decision, Fallback, ForwardOptions, LocalScene, NoiseConfig, NoiseProcess, Observation, PolicyNetwork};
use crate::dynamics::{curvature_at, global_pose, step_rk4, Control, CurvilinearState, ReferencePath, VehicleParams};
use crate::error::{Error, Result};
use crate::hocbf::{hocbf_terms_at, Penalties};
use crate::nominal_mpc::episode_rngs;
use crate::scalar::Scalar;
use crate::scenario::{sort_and_slot, CoverConfig, Footprint, Scenario, ScenarioDistribution, SlotConfig};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const ROLLOUT_SCHEMA_VERSION: u32 = 1;
pub const SWEEP_SCHEMA_VERSION: u32 = 1;

/// Oriented rectangle in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect<T> {
    pub x: T,
    pub y: T,
    pub heading: T,
    pub length: T,
    pub width: T,
}

impl<T: Scalar> Rect<T> {
    pub fn new(x: T, y: T, heading: T, length: T, width: T) -> Self {
        Self { x, y, heading, length, width }
    }

    pub fn corners(&self) -> [(T, T); 4] {
        let (s, c) = self.heading.sin_cos();
        let (hl, hw) = (self.length * T::lit(0.5), self.width * T::lit(0.5));
        let p = |a: T, b: T| (self.x + a * c - b * s, self.y + a * s + b * c);
        [p(hl, hw), p(-hl, hw), p(-hl, -hw), p(hl, -hw)]
    }

    fn axes(&self) -> [(T, T); 2] {
        let (s, c) = self.heading.sin_cos();
        [(c, s), (-s, c)]
    }
}

fn project<T: Scalar>(pts: &[(T, T); 4], axis: (T, T)) -> (T, T) {
    pts.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), p| {
        let v = p.0 * axis.0 + p.1 * axis.1;
        (lo.min(v), hi.max(v))
    })
}

fn point_segment<T: Scalar>(p: (T, T), a: (T, T), b: (T, T)) -> T {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > T::zero() {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).max(T::zero()).min(T::one())
    } else {
        T::zero()
    };
    let (ex, ey) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (ex * ex + ey * ey).sqrt()
}

/// Minimum distance between two rectangles; zero when they overlap.
pub fn clearance<T: Scalar>(a: &Rect<T>, b: &Rect<T>) -> T {
    let (ca, cb) = (a.corners(), b.corners());
    let separated = a.axes().iter().chain(b.axes().iter()).any(|&axis| {
        let (lo_a, hi_a) = project(&ca, axis);
        let (lo_b, hi_b) = project(&cb, axis);
        hi_a < lo_b || hi_b < lo_a
    });
    if !separated {
        return T::zero();
    }
    let mut best = T::infinity();
    for (pts, other) in [(&ca, &cb), (&cb, &ca)] {
        for &p in pts.iter() {
            for i in 0..4 {
                best = best.min(point_segment(p, other[i], other[(i + 1) % 4]));
            }
        }
    }
    best
}

/// Global rectangle of an obstacle footprint, aligned with the path.
pub fn footprint_rect(path: &ReferencePath<f64>, fp: &Footprint<f64>) -> Result<Rect<f64>> {
    let p = path.pose_at(fp.s, fp.d)?;
    Ok(Rect::new(p.x, p.y, p.theta, fp.length, fp.width))
}

pub fn ego_rect(path: &ReferencePath<f64>, state: &CurvilinearState<f64>, length: f64, width: f64) -> Result<Rect<f64>> {
    let p = global_pose(path, state)?;
    Ok(Rect::new(p.x, p.y, p.theta, length, width))
}

/// What a policy sees at one step.
pub struct StepContext<'a> {
    pub state: &'a CurvilinearState<f64>,
    pub observation: &'a Observation,
    /// exact constraint geometry in the ego frame
    pub truth: &'a LocalScene,
    pub params: &'a VehicleParams<f64>,
    pub previous: Control<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub control: Control<f64>,
    /// penalties per constraint, unit for policies without a QP layer
    pub penalties: Vec<Penalties<f64>>,
    pub qp_infeasible: bool,
}

pub trait Policy: Sync {
    fn act(&self, ctx: &StepContext<'_>) -> Result<PolicyOutput>;

    /// Lane barrier bound used for the recorded barrier traces.
    fn lane_bound(&self) -> f64 {
        1.8
    }
}

pub struct BarrierNetPolicy<'a> {
    pub net: &'a PolicyNetwork,
    pub options: ForwardOptions,
}

impl Policy for BarrierNetPolicy<'_> {
    fn act(&self, ctx: &StepContext<'_>) -> Result<PolicyOutput> {
        let Decision { control, heads, fallback, .. } =
            self.net.forward(ctx.observation, ctx.truth, ctx.params, &self.options, ctx.previous)?;
        Ok(PolicyOutput { control, penalties: heads.penalties, qp_infeasible: fallback != Fallback::None })
    }

    fn lane_bound(&self) -> f64 {
        self.net.config.d_lf
    }
}

/// Ground-truth lane tracker: speed regulation plus a steering law on
/// `(d, mu, delta)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingPolicy {
    pub target_speed: f64,
    pub k_speed: f64,
    pub k_d: f64,
    pub k_mu: f64,
    pub k_delta: f64,
}

impl Default for TrackingPolicy {
    fn default() -> Self {
        Self { target_speed: 8.0, k_speed: 1.0, k_d: 0.3, k_mu: 1.0, k_delta: 2.0 }
    }
}

impl Policy for TrackingPolicy {
    fn act(&self, ctx: &StepContext<'_>) -> Result<PolicyOutput> {
        let x = ctx.state;
        let p = ctx.params;
        let wheelbase = p.l_r + p.l_f;
        let delta_ff = (wheelbase * ctx.truth.kappa).atan();
        let delta_des = delta_ff - self.k_d * x.d - self.k_mu * x.mu;
        let a = p.a_bounds.clamp(self.k_speed * (self.target_speed - x.v));
        let omega = p.omega_bounds.clamp(self.k_delta * (delta_des - x.delta));
        Ok(PolicyOutput { control: Control::new(a, omega), penalties: vec![Penalties::unit(); ctx.truth.disks.len() + 2], qp_infeasible: false })
    }
}

/// Applies the same control forever.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantPolicy(pub Control<f64>);

impl Policy for ConstantPolicy {
    fn act(&self, ctx: &StepContext<'_>) -> Result<PolicyOutput> {
        Ok(PolicyOutput { control: self.0, penalties: vec![Penalties::unit(); ctx.truth.disks.len() + 2], qp_infeasible: false })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub max_steps: usize,
    pub ego_length: f64,
    pub ego_width: f64,
    pub cover: CoverConfig,
    pub noise: NoiseConfig,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { max_steps: 200, ego_length: 4.5, ego_width: 1.8, cover: CoverConfig::default(), noise: NoiseConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Crash,
    OffLane,
    QpInfeasible,
    Completed,
}

impl EventKind {
    pub fn is_terminal(self) -> bool {
        self != EventKind::QpInfeasible
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub step: usize,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// One recorded step. `control` is absent on the terminal step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub state: CurvilinearState<f64>,
    pub control: Option<Control<f64>>,
    /// barrier values per constraint (lane-left, lane-right, slots)
    pub barriers: Vec<f64>,
    pub psi1: Vec<f64>,
    /// `[p1, p2]` per constraint
    pub penalties: Vec<[f64; 2]>,
    /// distance to the nearest obstacle footprint (`None` without obstacles)
    pub clearance: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub steps: Vec<StepRecord>,
    pub events: Vec<Event>,
}

impl RolloutResult {
    pub fn states(&self) -> impl Iterator<Item = &CurvilinearState<f64>> {
        self.steps.iter().map(|s| &s.state)
    }

    pub fn terminal(&self) -> Option<&Event> {
        self.events.iter().find(|e| e.kind.is_terminal())
    }

    pub fn crashed(&self) -> bool {
        matches!(self.terminal().map(|e| e.kind), Some(EventKind::Crash | EventKind::OffLane))
    }

    pub fn min_clearance(&self) -> Option<f64> {
        self.steps.iter().filter_map(|s| s.clearance).reduce(f64::min)
    }

    pub fn min_barrier(&self) -> f64 {
        self.steps.iter().flat_map(|s| s.barriers.iter().copied()).fold(f64::INFINITY, f64::min)
    }
}

fn barrier_diagnostics(
    truth: &LocalScene,
    d_lf: f64,
    penalties: &[Penalties<f64>],
    params: &VehicleParams<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let specs = truth.specs(d_lf);
    let mut b = Vec::with_capacity(specs.len());
    let mut psi = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let p = penalties.get(i).copied().unwrap_or_else(Penalties::unit);
        match hocbf_terms_at(spec, &truth.state, truth.kappa, &p, params) {
            Ok(t) => {
                b.push(t.b);
                psi.push(t.psi1);
            }
            Err(_) => {
                b.push(crate::hocbf::barrier_value(spec, &truth.state));
                psi.push(f64::NAN);
            }
        }
    }
    (b, psi)
}

/// Closed loop: observe, slot, act, integrate, until a terminal event or
/// `max_steps`.
pub fn rollout<P: Policy + ?Sized, R: rand::Rng + ?Sized>(
    policy: &P,
    scenario: &Scenario,
    config: &RolloutConfig,
    params: &VehicleParams<f64>,
    noise_rng: &mut R,
) -> Result<RolloutResult> {
    if config.max_steps == 0 {
        return Err(Error::InvalidInput("max_steps must be at least 1".into()));
    }
    scenario.validate()?;
    let path = &scenario.path;
    let lhw = path.lane_half_width();
    let slots = SlotConfig { n_slots: scenario.n_slots, ..SlotConfig::default() };
    let rects = scenario.obstacles.iter().map(|fp| footprint_rect(path, fp)).collect::<Result<Vec<_>>>()?;
    let mut noise = NoiseProcess::new(config.noise, scenario.n_slots);
    let mut x = scenario.ego_init;
    let mut previous = Control::new(0.0, 0.0);
    let mut out = RolloutResult::default();
    let mut step = 0;
    loop {
        let clearance = if rects.is_empty() {
            None
        } else {
            let ego = ego_rect(path, &x, config.ego_length, config.ego_width)?;
            Some(rects.iter().map(|r| clearance(&ego, r)).fold(f64::INFINITY, f64::min))
        };
        let disks = sort_and_slot(&x, &scenario.obstacles, path, &config.cover, &slots)?;
        let kappa = curvature_at(path, x.s)?;
        let truth = LocalScene::exact(&x, &disks, kappa);
        let mut record = StepRecord { step, state: x, control: None, barriers: vec![], psi1: vec![], penalties: vec![], clearance };

        let terminal = if x.d.abs() > lhw {
            Some(Event { kind: EventKind::OffLane, step, detail: format!("|d| = {:.3}", x.d.abs()) })
        } else if clearance.is_some_and(|c| c <= 0.0) {
            Some(Event { kind: EventKind::Crash, step, detail: "footprints overlap".into() })
        } else if step == config.max_steps {
            Some(Event { kind: EventKind::Completed, step, detail: String::new() })
        } else {
            None
        };
        if let Some(ev) = terminal {
            let (b, psi) = barrier_diagnostics(&truth, policy.lane_bound(), &[], params);
            record.barriers = b;
            record.psi1 = psi;
            out.steps.push(record);
            out.events.push(ev);
            return Ok(out);
        }

        let offsets = noise.sample(noise_rng);
        let obs = Observation::new(&x, &disks, kappa, offsets, config.noise.sigma);
        let ctx = StepContext { state: &x, observation: &obs, truth: &truth, params, previous };
        let act = policy.act(&ctx)?;
        if act.qp_infeasible {
            out.events.push(Event { kind: EventKind::QpInfeasible, step, detail: String::new() });
        }
        let (b, psi) = barrier_diagnostics(&truth, policy.lane_bound(), &act.penalties, params);
        record.barriers = b;
        record.psi1 = psi;
        record.penalties = act.penalties.iter().map(|p| [p.p1, p.p2]).collect();
        record.control = Some(act.control);
        out.steps.push(record);

        match step_rk4(&x, &act.control, path, params, params.dt) {
            Ok(mut next) => {
                next.v = next.v.max(0.0);
                next.a = act.control.a;
                next.omega = act.control.omega;
                x = next;
            }
            Err(e @ (Error::Singular { .. } | Error::SteeringDomain(_) | Error::OutOfRange { .. })) => {
                out.events.push(Event { kind: EventKind::Crash, step, detail: format!("dynamics: {e}") });
                return Ok(out);
            }
            Err(e) => return Err(e),
        }
        previous = act.control;
        step += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub rollout: RolloutConfig,
    /// lateral thresholds of the exceedance curve
    pub thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            seed: 0,
            rollout: RolloutConfig::default(),
            thresholds: (0..=20).map(|i| i as f64 * 0.1).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub crashed: bool,
    pub terminal: EventKind,
    pub steps: usize,
    pub min_clearance: Option<f64>,
    pub min_barrier: f64,
    pub qp_infeasible: usize,
    /// `|d|` at every recorded step
    pub abs_d: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub episodes: usize,
    pub crashes: usize,
    pub crash_rate: f64,
    /// mean over episodes with obstacles of the per-episode minimum clearance
    pub min_clearance: Option<f64>,
    /// `(threshold, P(|d| > threshold))`, pooled over all recorded steps
    pub deviation_exceedance: Vec<(f64, f64)>,
    pub qp_infeasible_steps: usize,
}

impl Metrics {
    pub fn exceedance_at(&self, threshold: f64) -> Option<f64> {
        self.deviation_exceedance.iter().find(|(t, _)| (t - threshold).abs() < 1e-9).map(|(_, p)| *p)
    }
}

pub fn summarize(episode: usize, r: &RolloutResult) -> EpisodeSummary {
    EpisodeSummary {
        episode,
        crashed: r.crashed(),
        terminal: r.terminal().map_or(EventKind::Completed, |e| e.kind),
        steps: r.steps.len(),
        min_clearance: r.min_clearance(),
        min_barrier: r.min_barrier(),
        qp_infeasible: r.events.iter().filter(|e| e.kind == EventKind::QpInfeasible).count(),
        abs_d: r.states().map(|s| s.d.abs()).collect(),
    }
}

/// Runs episode `index` of a distribution: scenario and noise come from the
/// episode's own RNG streams.
pub fn run_episode<P: Policy + ?Sized>(
    policy: &P,
    dist: &ScenarioDistribution,
    path: &ReferencePath<f64>,
    config: &EvalConfig,
    params: &VehicleParams<f64>,
    index: usize,
) -> Result<RolloutResult> {
    let (mut scen_rng, mut noise_rng) = episode_rngs(config.seed, index);
    let scenario = dist.sample(path, &mut scen_rng)?;
    rollout(policy, &scenario, &config.rollout, params, &mut noise_rng)
}

pub fn evaluate_episodes<P: Policy + ?Sized>(
    policy: &P,
    dist: &ScenarioDistribution,
    config: &EvalConfig,
    params: &VehicleParams<f64>,
) -> Result<Vec<EpisodeSummary>> {
    if config.episodes == 0 {
        return Err(Error::InvalidInput("episodes must be at least 1".into()));
    }
    dist.validate()?;
    let path = dist.path.build(None)?;
    (0..config.episodes)
        .into_par_iter()
        .map(|i| run_episode(policy, dist, &path, config, params, i).map(|r| summarize(i, &r)))
        .collect()
}

/// Aggregates episode summaries in episode order.
pub fn aggregate(summaries: &[EpisodeSummary], thresholds: &[f64]) -> Metrics {
    let n = summaries.len();
    let crashes = summaries.iter().filter(|s| s.crashed).count();
    let clear: Vec<f64> = summaries.iter().filter_map(|s| s.min_clearance).collect();
    let total: usize = summaries.iter().map(|s| s.abs_d.len()).sum();
    let deviation_exceedance = thresholds
        .iter()
        .map(|&t| {
            let k: usize = summaries.iter().map(|s| s.abs_d.iter().filter(|d| **d > t).count()).sum();
            (t, if total == 0 { 0.0 } else { k as f64 / total as f64 })
        })
        .collect();
    Metrics {
        schema_version: METRICS_SCHEMA_VERSION,
        episodes: n,
        crashes,
        crash_rate: if n == 0 { 0.0 } else { crashes as f64 / n as f64 },
        min_clearance: (!clear.is_empty()).then(|| clear.iter().sum::<f64>() / clear.len() as f64),
        deviation_exceedance,
        qp_infeasible_steps: summaries.iter().map(|s| s.qp_infeasible).sum(),
    }
}

pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    dist: &ScenarioDistribution,
    config: &EvalConfig,
    params: &VehicleParams<f64>,
) -> Result<Metrics> {
    let mut sorted = config.thresholds.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(aggregate(&evaluate_episodes(policy, dist, config, params)?, &sorted))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseChannel {
    D,
    Mu,
    Ds,
    Dobs,
}

impl std::str::FromStr for NoiseChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d" => Ok(Self::D),
            "mu" => Ok(Self::Mu),
            "ds" => Ok(Self::Ds),
            "dobs" | "d_obs" => Ok(Self::Dobs),
            _ => Err(Error::InvalidInput(format!("unknown noise channel {s:?} (d, mu, ds, dobs)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub crash_rate: f64,
    pub n: usize,
}

/// Crash rate per noise level on one channel; other channels keep the
/// configured noise. Every level uses the same episode seeds.
pub fn noise_sweep<P: Policy + ?Sized>(
    policy: &P,
    dist: &ScenarioDistribution,
    channel: NoiseChannel,
    sigmas: &[f64],
    config: &EvalConfig,
    params: &VehicleParams<f64>,
) -> Result<Vec<SweepRow>> {
    sigmas
        .iter()
        .map(|&sigma| {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidInput(format!("noise sigma must be non-negative, got {sigma}")));
            }
            let mut cfg = config.clone();
            let s = &mut cfg.rollout.noise.sigma;
            match channel {
                NoiseChannel::D => s.d = sigma,
                NoiseChannel::Mu => s.mu = sigma,
                NoiseChannel::Ds => s.ds = sigma,
                NoiseChannel::Dobs => s.dobs = sigma,
            }
            let m = evaluate(policy, dist, &cfg, params)?;
            Ok(SweepRow { sigma, crash_rate: m.crash_rate, n: m.episodes })
        })
        .collect()
}

pub fn write_sweep_csv(path: &std::path::Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sigma", "crash_rate", "n"])?;
    for r in rows {
        w.write_record([r.sigma.to_string(), r.crash_rate.to_string(), r.n.to_string()])?;
    }
    w.flush()?;
    crate::io::write_sidecar(path, "noise_sweep", SWEEP_SCHEMA_VERSION, serde_json::json!({}))
}

/// JSON lines, one object per step, preceded by a header line.
pub fn write_rollout_jsonl<W: std::io::Write>(mut w: W, result: &RolloutResult) -> Result<()> {
    let header = serde_json::json!({ "schema_version": ROLLOUT_SCHEMA_VERSION, "events": result.events });
    writeln!(w, "{header}")?;
    for s in &result.steps {
        writeln!(w, "{}", serde_json::to_string(s)?)?;
    }
    Ok(())
}
