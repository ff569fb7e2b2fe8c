//! The trainable policy: an MLP whose heads parameterise a CBF quadratic
//! program, trained end to end through [`crate::diffqp`].
//!
//! Observation layout (for `N` obstacle slots):
//! `d, mu, v, delta, kappa`, then per slot `Δs, d_obs, r_D, presence`.
//!
//! Output layout: residual corrections for `d, mu, Δs, d_obs, v, delta`
//! (the last two obstacle ones refer to slot 0), raw reference controls
//! `a, omega`, optionally two raw `H` diagonal entries, then `p1, p2` for each
//! constraint in the order lane-left, lane-right, slot 0..N.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffqp::{qp_backward, qp_solve, QpProblem, QpSettings, QpSolution, QpStatus};
use crate::dynamics::{Control, CurvilinearState, VehicleParams};
use crate::error::{Error, Result};
use crate::hocbf::{hocbf_terms_at, BarrierSpec, HocbfTerms, Penalties};
use crate::linalg::Matrix;
use crate::scenario::ObstacleDisk;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const LOSS_SCHEMA_VERSION: u32 = 1;

/// Floor applied by [`positive_map`].
pub const MIN_POSITIVE: f64 = 1e-6;

pub const EGO_CHANNELS: usize = 5;
pub const SLOT_CHANNELS: usize = 4;
const IDX_D: usize = 0;
const IDX_MU: usize = 1;
const IDX_V: usize = 2;
const IDX_DELTA: usize = 3;
const IDX_KAPPA: usize = 4;

/// Label fields in dataset column order; bit `i` of a mask refers to field `i`.
pub const LABEL_FIELDS: [&str; 8] = ["v", "delta", "d", "dobs", "mu", "ds", "a", "omega"];
pub const FIELD_V: usize = 0;
pub const FIELD_DELTA: usize = 1;
pub const FIELD_D: usize = 2;
pub const FIELD_DOBS: usize = 3;
pub const FIELD_MU: usize = 4;
pub const FIELD_DS: usize = 5;
pub const FIELD_A: usize = 6;
pub const FIELD_OMEGA: usize = 7;
pub const MASK_ALL: u8 = 0xff;
pub const MASK_NO_OBSTACLE: u8 = MASK_ALL & !(1 << FIELD_DOBS) & !(1 << FIELD_DS);

/// `softplus(x) / ln 2`, floored at [`MIN_POSITIVE`]; equals 1 at 0.
pub fn positive_map(x: f64) -> f64 {
    (softplus(x) / std::f64::consts::LN_2).max(MIN_POSITIVE)
}

pub fn positive_map_derivative(x: f64) -> f64 {
    if softplus(x) / std::f64::consts::LN_2 <= MIN_POSITIVE {
        0.0
    } else {
        sigmoid(x) / std::f64::consts::LN_2
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn observation_dim(n_slots: usize) -> usize {
    EGO_CHANNELS + SLOT_CHANNELS * n_slots
}

/// Per-channel noise standard deviations carried with an observation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSigmas {
    pub d: f64,
    pub mu: f64,
    pub ds: f64,
    pub dobs: f64,
}

impl NoiseSigmas {
    pub fn is_zero(&self) -> bool {
        self.d == 0.0 && self.mu == 0.0 && self.ds == 0.0 && self.dobs == 0.0
    }
}

/// Additive corruption of the observed channels (`ds`, `dobs` per slot).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservationOffsets {
    pub d: f64,
    pub mu: f64,
    pub ds: Vec<f64>,
    pub dobs: Vec<f64>,
}

/// Observation noise: each corrupted channel follows a stationary AR(1)
/// process with Gaussian marginals of standard deviation `sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub sigma: NoiseSigmas,
    /// step-to-step correlation, 0 gives white noise
    pub rho: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma: NoiseSigmas::default(), rho: 0.9 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.sigma;
        if [s.d, s.mu, s.ds, s.dobs].iter().any(|x| !(*x >= 0.0 && x.is_finite())) || !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidInput(format!("invalid noise config {self:?}")));
        }
        Ok(())
    }
}

/// Per-episode noise state.
#[derive(Clone, Debug)]
pub struct NoiseProcess {
    config: NoiseConfig,
    offsets: ObservationOffsets,
    started: bool,
}

impl NoiseProcess {
    pub fn new(config: NoiseConfig, n_slots: usize) -> Self {
        let offsets = ObservationOffsets { d: 0.0, mu: 0.0, ds: vec![0.0; n_slots], dobs: vec![0.0; n_slots] };
        Self { config, offsets, started: false }
    }

    /// Advances the process. Returns `None` without drawing when all
    /// sigmas are zero.
    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<&ObservationOffsets> {
        let s = self.config.sigma;
        if s.is_zero() {
            return None;
        }
        let (a, b) = if self.started {
            (self.config.rho, (1.0 - self.config.rho * self.config.rho).sqrt())
        } else {
            (0.0, 1.0)
        };
        self.started = true;
        let mut next = |x: &mut f64, sigma: f64| {
            let w: f64 = rng.sample(StandardNormal);
            *x = a * *x + b * sigma * w;
        };
        let o = &mut self.offsets;
        next(&mut o.d, s.d);
        next(&mut o.mu, s.mu);
        for x in o.ds.iter_mut() {
            next(x, s.ds);
        }
        for x in o.dobs.iter_mut() {
            next(x, s.dobs);
        }
        Some(&self.offsets)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub z: Vec<f64>,
    pub n_slots: usize,
    pub sigma: NoiseSigmas,
}

impl Observation {
    /// Builds the feature vector from the ego state, its slotted disks and the
    /// local curvature. Offsets apply to real obstacles only; parked slots are
    /// placeholders known exactly.
    pub fn new(
        ego: &CurvilinearState<f64>,
        disks: &[ObstacleDisk<f64>],
        kappa: f64,
        offsets: Option<&ObservationOffsets>,
        sigma: NoiseSigmas,
    ) -> Self {
        let n = disks.len();
        let mut z = vec![0.0; observation_dim(n)];
        let off = |f: fn(&ObservationOffsets) -> f64| offsets.map_or(0.0, f);
        z[IDX_D] = ego.d + off(|o| o.d);
        z[IDX_MU] = ego.mu + off(|o| o.mu);
        z[IDX_V] = ego.v;
        z[IDX_DELTA] = ego.delta;
        z[IDX_KAPPA] = kappa;
        for (k, disk) in disks.iter().enumerate() {
            let base = EGO_CHANNELS + SLOT_CHANNELS * k;
            let (mut ds, mut dobs) = (disk.s_obs - ego.s, disk.d_obs);
            if !disk.parked {
                if let Some(o) = offsets {
                    ds += o.ds.get(k).copied().unwrap_or(0.0);
                    dobs += o.dobs.get(k).copied().unwrap_or(0.0);
                }
            }
            z[base] = ds;
            z[base + 1] = dobs;
            z[base + 2] = disk.r_d;
            z[base + 3] = if disk.parked { 0.0 } else { 1.0 };
        }
        Self { z, n_slots: n, sigma }
    }

    pub fn slot(&self, k: usize) -> [f64; SLOT_CHANNELS] {
        let b = EGO_CHANNELS + SLOT_CHANNELS * k;
        [self.z[b], self.z[b + 1], self.z[b + 2], self.z[b + 3]]
    }

    pub fn kappa(&self) -> f64 {
        self.z[IDX_KAPPA]
    }

    fn input_scale(i: usize) -> f64 {
        match i {
            IDX_D => 2.0,
            IDX_MU => 0.3,
            IDX_V => 10.0,
            IDX_DELTA => 0.3,
            IDX_KAPPA => 0.05,
            _ => match (i - EGO_CHANNELS) % SLOT_CHANNELS {
                0 => 30.0,
                1 => 30.0,
                2 => 30.0,
                _ => 1.0,
            },
        }
    }

    pub fn scaled(&self) -> Vec<f64> {
        self.z.iter().enumerate().map(|(i, v)| v / Self::input_scale(i)).collect()
    }
}

/// Geometry the constraints are built from, expressed in the ego's local
/// frame: the ego sits at `s = 0` and disks carry their signed gaps.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalScene {
    pub state: CurvilinearState<f64>,
    pub disks: Vec<ObstacleDisk<f64>>,
    pub kappa: f64,
}

impl LocalScene {
    pub fn exact(ego: &CurvilinearState<f64>, disks: &[ObstacleDisk<f64>], kappa: f64) -> Self {
        let state = CurvilinearState { s: 0.0, ..*ego };
        let disks = disks.iter().map(|d| ObstacleDisk { s_obs: d.s_obs - ego.s, ..*d }).collect();
        Self { state, disks, kappa }
    }

    pub fn from_observation(obs: &Observation) -> Self {
        let z = &obs.z;
        let state = CurvilinearState::new(0.0, z[IDX_D], z[IDX_MU], z[IDX_V], z[IDX_DELTA]);
        let disks = (0..obs.n_slots)
            .map(|k| {
                let [ds, dobs, r, present] = obs.slot(k);
                ObstacleDisk { s_obs: ds, d_obs: dobs, r_d: r, slot: k, parked: present < 0.5 }
            })
            .collect();
        Self { state, disks, kappa: obs.kappa() }
    }

    pub fn specs(&self, d_lf: f64) -> Vec<BarrierSpec<f64>> {
        let mut specs = vec![BarrierSpec::lane_left(d_lf), BarrierSpec::lane_right(d_lf)];
        specs.extend(self.disks.iter().map(|d| d.barrier()));
        specs
    }

    pub fn terms(&self, d_lf: f64, penalties: &[Penalties<f64>], params: &VehicleParams<f64>) -> Result<Vec<HocbfTerms<f64>>> {
        let specs = self.specs(d_lf);
        if specs.len() != penalties.len() {
            return Err(Error::InvalidInput(format!("{} constraints but {} penalty pairs", specs.len(), penalties.len())));
        }
        specs
            .iter()
            .zip(penalties)
            .map(|(spec, p)| hocbf_terms_at(spec, &self.state, self.kappa, p, params))
            .collect()
    }
}

/// Fully connected tanh network with a linear output layer; parameters are
/// stored flat, layer by layer, weights row-major (`out × in`) then bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

pub struct MlpTrace {
    acts: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], output_gain: f64, rng: &mut R) -> Self {
        let n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let mut params = Vec::with_capacity(n);
        let layers = sizes.len() - 1;
        for (l, w) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt() * if l + 1 == layers { output_gain } else { 1.0 };
            for _ in 0..n_in * n_out {
                params.push(if limit > 0.0 { rng.random_range(-limit..limit) } else { 0.0 });
            }
            params.extend(std::iter::repeat_n(0.0, n_out));
        }
        Self { sizes: sizes.to_vec(), params }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let o = off;
            off += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    /// Offset of layer `l`'s weights, and its input and output widths.
    pub fn layer(&self, l: usize) -> (usize, usize, usize) {
        self.layers().nth(l).expect("layer index")
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).acts.pop().unwrap_or_default()
    }

    pub fn trace(&self, x: &[f64]) -> MlpTrace {
        assert_eq!(x.len(), self.sizes[0]);
        let last = self.n_layers() - 1;
        let mut acts = vec![x.to_vec()];
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            let input = &acts[l];
            let w = &self.params[off..off + n_in * n_out];
            let b = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            let out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let z = b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                    if l == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        MlpTrace { acts }
    }

    pub fn output(trace: &MlpTrace) -> &[f64] {
        trace.acts.last().expect("non-empty trace")
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂output`.
    pub fn backward(&self, trace: &MlpTrace, d_out: &[f64], grad: &mut [f64]) {
        let layers: Vec<_> = self.layers().collect();
        let mut delta = d_out.to_vec();
        for (l, &(off, n_in, n_out)) in layers.iter().enumerate().rev() {
            let input = &trace.acts[l];
            for o in 0..n_out {
                let g = delta[o];
                if g == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (r, x) in row.iter_mut().zip(input) {
                    *r += g * x;
                }
                grad[off + n_in * n_out + o] += g;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let g = delta[o];
                if g == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += g * wi;
                }
            }
            // previous activation is tanh
            for (p, a) in prev.iter_mut().zip(input) {
                *p *= 1.0 - a * a;
            }
            delta = prev;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub n_slots: usize,
    pub hidden: Vec<usize>,
    /// reference controls are `bound · tanh(raw)`
    pub a_ref_bound: f64,
    pub omega_ref_bound: f64,
    /// fixed QP cost diagonal, or the scale of the trained one
    pub h_diag: [f64; 2],
    pub train_h: bool,
    /// lateral bound of the lane barriers
    pub d_lf: f64,
    /// gain on the initial output layer
    pub output_gain: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_slots: 3,
            hidden: vec![64, 64, 64],
            a_ref_bound: 6.0,
            omega_ref_bound: 1.0,
            h_diag: [1.0, 1.0],
            train_h: false,
            d_lf: 1.8,
            output_gain: 0.1,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_slots >= 1
            && !self.hidden.is_empty()
            && self.hidden.iter().all(|h| *h > 0)
            && self.a_ref_bound > 0.0
            && self.omega_ref_bound > 0.0
            && self.h_diag.iter().all(|h| *h > 0.0)
            && self.d_lf > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid network config {self:?}")))
        }
    }

    pub fn n_constraints(&self) -> usize {
        self.n_slots + 2
    }

    fn h_offset(&self) -> usize {
        8
    }

    pub fn penalty_offset(&self) -> usize {
        if self.train_h {
            10
        } else {
            8
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.penalty_offset() + 2 * self.n_constraints()
    }
}

/// Residual output scales for `d, mu, Δs, d_obs, v, delta`.
const RESIDUAL_SCALE: [f64; 6] = [0.5, 0.1, 2.0, 1.0, 1.0, 0.1];

/// Decoded network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub d: f64,
    pub mu: f64,
    /// slot-0 gap estimate
    pub ds: f64,
    /// slot-0 lateral estimate
    pub dobs: f64,
    pub v: f64,
    pub delta: f64,
    pub u_ref: [f64; 2],
    pub h_diag: [f64; 2],
    pub penalties: Vec<Penalties<f64>>,
    pub raw: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNetwork {
    pub config: NetworkConfig,
    pub mlp: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierSource {
    /// constraints from the true state
    Exact,
    /// constraints from the network's state estimates and observed obstacles
    Estimated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    /// the bounded QP was infeasible; solved without control bounds
    Unbounded,
    /// both QPs were infeasible; previous control held
    HoldPrevious,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardOptions {
    pub source: BarrierSource,
    /// apply the QP layer (false gives the reference control)
    pub use_cbf: bool,
    pub use_bounds: bool,
    pub qp: QpSettings,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { source: BarrierSource::Exact, use_cbf: true, use_bounds: true, qp: QpSettings::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub control: Control<f64>,
    pub heads: Heads,
    /// constraint terms the QP was built from
    pub terms: Vec<HocbfTerms<f64>>,
    pub status: Option<QpStatus>,
    pub fallback: Fallback,
}

impl PolicyNetwork {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![observation_dim(config.n_slots)];
        sizes.extend(&config.hidden);
        sizes.push(config.n_outputs());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new(&sizes, config.output_gain, &mut rng);
        Ok(Self { config, mlp })
    }

    pub fn n_params(&self) -> usize {
        self.mlp.params.len()
    }

    fn check_obs(&self, obs: &Observation) -> Result<()> {
        if obs.n_slots != self.config.n_slots || obs.z.len() != observation_dim(self.config.n_slots) {
            return Err(Error::InvalidInput(format!(
                "observation has {} slots, network expects {}",
                obs.n_slots, self.config.n_slots
            )));
        }
        Ok(())
    }

    fn decode(&self, obs: &Observation, out: &[f64]) -> Heads {
        let c = &self.config;
        let z = &obs.z;
        let slot0 = obs.slot(0);
        let pen_off = c.penalty_offset();
        let penalties = (0..c.n_constraints())
            .map(|k| Penalties { p1: positive_map(out[pen_off + 2 * k]), p2: positive_map(out[pen_off + 2 * k + 1]) })
            .collect();
        let h_diag = if c.train_h {
            [c.h_diag[0] * positive_map(out[c.h_offset()]), c.h_diag[1] * positive_map(out[c.h_offset() + 1])]
        } else {
            c.h_diag
        };
        Heads {
            d: z[IDX_D] + RESIDUAL_SCALE[0] * out[0],
            mu: z[IDX_MU] + RESIDUAL_SCALE[1] * out[1],
            ds: slot0[0] + RESIDUAL_SCALE[2] * out[2],
            dobs: slot0[1] + RESIDUAL_SCALE[3] * out[3],
            v: z[IDX_V] + RESIDUAL_SCALE[4] * out[4],
            delta: z[IDX_DELTA] + RESIDUAL_SCALE[5] * out[5],
            u_ref: [c.a_ref_bound * out[6].tanh(), c.omega_ref_bound * out[7].tanh()],
            h_diag,
            penalties,
            raw: out.to_vec(),
        }
    }

    pub fn heads(&self, obs: &Observation) -> Result<Heads> {
        self.check_obs(obs)?;
        Ok(self.decode(obs, &self.mlp.forward(&obs.scaled())))
    }

    /// Scene built from the network's estimates: ego channels from the heads,
    /// slot 0 from the gap/lateral heads when an obstacle is present, other
    /// slots as observed.
    pub fn estimated_scene(&self, obs: &Observation, heads: &Heads) -> LocalScene {
        let mut scene = LocalScene::from_observation(obs);
        scene.state.d = heads.d;
        scene.state.mu = heads.mu;
        scene.state.v = heads.v.max(0.0);
        scene.state.delta = heads.delta;
        if let Some(d0) = scene.disks.first_mut() {
            if !d0.parked {
                d0.s_obs = heads.ds;
                d0.d_obs = heads.dobs;
            }
        }
        scene
    }

    /// Deployed forward pass. `truth` is used when the barrier source is exact.
    pub fn forward(
        &self,
        obs: &Observation,
        truth: &LocalScene,
        params: &VehicleParams<f64>,
        options: &ForwardOptions,
        previous: Control<f64>,
    ) -> Result<Decision> {
        let heads = self.heads(obs)?;
        let scene = match options.source {
            BarrierSource::Exact => truth.clone(),
            BarrierSource::Estimated => self.estimated_scene(obs, &heads),
        };
        let terms = scene.terms(self.config.d_lf, &heads.penalties, params)?;
        let clamp = |u: [f64; 2]| {
            if options.use_bounds {
                Control::new(params.a_bounds.clamp(u[0]), params.omega_bounds.clamp(u[1]))
            } else {
                Control::new(u[0], u[1])
            }
        };
        if !options.use_cbf {
            return Ok(Decision { control: clamp(heads.u_ref), heads, terms, status: None, fallback: Fallback::None });
        }
        let bounds = options.use_bounds.then_some(params);
        let problem = build_qp(&heads, &terms, bounds);
        let sol = qp_solve(&problem, &options.qp)?;
        if sol.status == QpStatus::Optimal {
            let u = Control::new(sol.u_star[0], sol.u_star[1]);
            return Ok(Decision { control: u, heads, terms, status: Some(sol.status), fallback: Fallback::None });
        }
        if options.use_bounds {
            let unbounded = build_qp(&heads, &terms, None);
            let retry = qp_solve(&unbounded, &options.qp)?;
            if retry.status == QpStatus::Optimal {
                log::debug!("bounded QP {:?}; using the unbounded solution", sol.status);
                let u = clamp([retry.u_star[0], retry.u_star[1]]);
                return Ok(Decision { control: u, heads, terms, status: Some(sol.status), fallback: Fallback::Unbounded });
            }
        }
        log::debug!("QP {:?}; holding the previous control", sol.status);
        Ok(Decision { control: previous, heads, terms, status: Some(sol.status), fallback: Fallback::HoldPrevious })
    }

    /// Flat parameter indices of the output-layer rows feeding the penalty head.
    pub fn penalty_param_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let (off, n_in, n_out) = self.mlp.layer(self.mlp.n_layers() - 1);
        let p0 = self.config.penalty_offset();
        let mut out: Vec<_> = (p0..n_out).map(|o| off + o * n_in..off + (o + 1) * n_in).collect();
        out.push(off + n_in * n_out + p0..off + n_in * n_out + n_out);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let layers = (0..self.mlp.n_layers())
            .map(|l| {
                let (off, n_in, n_out) = self.mlp.layer(l);
                LayerDump {
                    inputs: n_in,
                    outputs: n_out,
                    weights: self.mlp.params[off..off + n_in * n_out].to_vec(),
                    bias: self.mlp.params[off + n_in * n_out..off + n_in * n_out + n_out].to_vec(),
                }
            })
            .collect();
        let ck = Checkpoint { schema_version: CHECKPOINT_SCHEMA_VERSION, config: self.config.clone(), layers };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint schema_version {}", ck.schema_version)));
        }
        ck.config.validate()?;
        let mut sizes = vec![observation_dim(ck.config.n_slots)];
        sizes.extend(&ck.config.hidden);
        sizes.push(ck.config.n_outputs());
        if ck.layers.len() + 1 != sizes.len() {
            return Err(Error::Format("checkpoint layer count does not match its config".into()));
        }
        let mut params: Vec<f64> = Vec::new();
        for (l, layer) in ck.layers.iter().enumerate() {
            if layer.inputs != sizes[l]
                || layer.outputs != sizes[l + 1]
                || layer.weights.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(Error::Format(format!("checkpoint layer {l} has inconsistent shape")));
            }
            params.extend(&layer.weights);
            params.extend(&layer.bias);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("checkpoint contains non-finite weights".into()));
        }
        Ok(Self { config: ck.config, mlp: Mlp { sizes, params } })
    }
}

#[derive(Serialize, Deserialize)]
struct LayerDump {
    inputs: usize,
    outputs: usize,
    /// row-major `outputs × inputs`
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    config: NetworkConfig,
    layers: Vec<LayerDump>,
}

/// `min ½ uᵀHu - (H u_ref)ᵀu` subject to one row per constraint
/// (`-coeff · u ≤ constant`) and optional control bounds.
pub fn build_qp(heads: &Heads, terms: &[HocbfTerms<f64>], bounds: Option<&VehicleParams<f64>>) -> QpProblem<f64> {
    let h = heads.h_diag;
    let f = vec![-h[0] * heads.u_ref[0], -h[1] * heads.u_ref[1]];
    let rows: Vec<Vec<f64>> = terms.iter().map(|t| vec![-t.constraint.coeff[0], -t.constraint.coeff[1]]).collect();
    let rhs = terms.iter().map(|t| t.constraint.constant).collect();
    let g = if rows.is_empty() { Matrix::zeros(0, 2) } else { Matrix::from_rows(&rows) };
    let p = QpProblem::new(Matrix::diagonal(&h), f, g, rhs);
    match bounds {
        Some(params) => p.with_bounds(
            vec![params.a_bounds.min, params.omega_bounds.min],
            vec![params.a_bounds.max, params.omega_bounds.max],
        ),
        None => p,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub v: f64,
    pub delta: f64,
    pub d: f64,
    pub dobs: f64,
    pub mu: f64,
    pub ds: f64,
    pub a: f64,
    pub omega: f64,
}

impl Labels {
    pub fn to_array(&self) -> [f64; 8] {
        [self.v, self.delta, self.d, self.dobs, self.mu, self.ds, self.a, self.omega]
    }

    pub fn from_array(x: [f64; 8]) -> Self {
        let [v, delta, d, dobs, mu, ds, a, omega] = x;
        Self { v, delta, d, dobs, mu, ds, a, omega }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub episode: usize,
    pub step: usize,
    pub observation: Observation,
    pub labels: Labels,
    pub mask: u8,
}

impl TrainingSample {
    pub fn valid(&self, field: usize) -> bool {
        self.mask >> field & 1 == 1
    }

    /// Constraints during training use the labelled (true) state.
    pub fn teacher_scene(&self) -> LocalScene {
        let mut scene = LocalScene::from_observation(&self.observation);
        let l = &self.labels;
        scene.state = CurvilinearState::new(0.0, l.d, l.mu, l.v, l.delta);
        if self.valid(FIELD_DS) && self.valid(FIELD_DOBS) {
            if let Some(d0) = scene.disks.first_mut() {
                d0.s_obs = l.ds;
                d0.d_obs = l.dobs;
            }
        }
        scene
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// per-field weights in [`LABEL_FIELDS`] order
    pub weights: [f64; 8],
    /// per-field error normalisers
    pub scales: [f64; 8],
    /// cap on the normalised squared error of `Δs` and `d_obs`
    pub obstacle_cap: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: [1.0; 8],
            scales: [1.0, 0.05, 0.2, 0.5, 0.05, 1.0, 1.0, 0.1],
            obstacle_cap: 25.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub terms: [f64; 8],
    pub total: f64,
}

/// Loss of one sample and, optionally, its parameter gradient. Returns
/// `None` when the training QP is infeasible (the sample is skipped).
pub struct SampleEval {
    pub loss: LossBreakdown,
    pub grad: Option<Vec<f64>>,
    /// some constraint is active at the QP solution
    pub active: bool,
}

pub fn evaluate_sample(
    net: &PolicyNetwork,
    sample: &TrainingSample,
    loss_cfg: &LossConfig,
    params: &VehicleParams<f64>,
    qp: &QpSettings,
    want_grad: bool,
) -> Result<Option<SampleEval>> {
    let obs = &sample.observation;
    net.check_obs(obs)?;
    let trace = net.mlp.trace(&obs.scaled());
    let out = Mlp::output(&trace);
    let heads = net.decode(obs, out);
    let scene = sample.teacher_scene();
    let terms = scene.terms(net.config.d_lf, &heads.penalties, params)?;
    let problem = build_qp(&heads, &terms, None);
    let sol: QpSolution<f64> = qp_solve(&problem, qp)?;
    if sol.status != QpStatus::Optimal {
        return Ok(None);
    }
    let preds = [heads.v, heads.delta, heads.d, heads.dobs, heads.mu, heads.ds, sol.u_star[0], sol.u_star[1]];
    let labels = sample.labels.to_array();
    let mut loss = LossBreakdown::default();
    let mut d_pred = [0.0; 8];
    for i in 0..8 {
        if !sample.valid(i) {
            continue;
        }
        let e = (preds[i] - labels[i]) / loss_cfg.scales[i];
        let sq = e * e;
        let capped = (i == FIELD_DS || i == FIELD_DOBS) && sq > loss_cfg.obstacle_cap;
        loss.terms[i] = loss_cfg.weights[i] * if capped { loss_cfg.obstacle_cap } else { sq };
        if !capped {
            d_pred[i] = loss_cfg.weights[i] * 2.0 * e / loss_cfg.scales[i];
        }
    }
    loss.total = loss.terms.iter().sum();
    let active = sol.duals.iter().any(|l| *l > 0.0);
    if !want_grad {
        return Ok(Some(SampleEval { loss, grad: None, active }));
    }

    let c = &net.config;
    let mut d_out = vec![0.0; out.len()];
    d_out[0] = d_pred[FIELD_D] * RESIDUAL_SCALE[0];
    d_out[1] = d_pred[FIELD_MU] * RESIDUAL_SCALE[1];
    d_out[2] = d_pred[FIELD_DS] * RESIDUAL_SCALE[2];
    d_out[3] = d_pred[FIELD_DOBS] * RESIDUAL_SCALE[3];
    d_out[4] = d_pred[FIELD_V] * RESIDUAL_SCALE[4];
    d_out[5] = d_pred[FIELD_DELTA] * RESIDUAL_SCALE[5];
    let grad_u = [d_pred[FIELD_A], d_pred[FIELD_OMEGA]];
    if grad_u != [0.0, 0.0] {
        let g = qp_backward(&problem, &sol, &grad_u, qp)?;
        // F = -H u_ref
        let bounds = [c.a_ref_bound, c.omega_ref_bound];
        for i in 0..2 {
            let du_ref = -heads.h_diag[i] * g.d_f[i];
            let t = out[6 + i].tanh();
            d_out[6 + i] = du_ref * bounds[i] * (1.0 - t * t);
        }
        if c.train_h {
            for i in 0..2 {
                let dh = g.d_h_mat[(i, i)] - g.d_f[i] * heads.u_ref[i];
                let raw = out[c.h_offset() + i];
                d_out[c.h_offset() + i] = dh * c.h_diag[i] * positive_map_derivative(raw);
            }
        }
        let p0 = c.penalty_offset();
        for (k, t) in terms.iter().enumerate() {
            let dh = g.d_h[k];
            d_out[p0 + 2 * k] = dh * t.dconst_dp1 * positive_map_derivative(out[p0 + 2 * k]);
            d_out[p0 + 2 * k + 1] = dh * t.dconst_dp2 * positive_map_derivative(out[p0 + 2 * k + 1]);
        }
    }
    let mut grad = vec![0.0; net.n_params()];
    net.mlp.backward(&trace, &d_out, &mut grad);
    Ok(Some(SampleEval { loss, grad: Some(grad), active }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// global gradient-norm clip
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub qp: QpSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 32,
            clip_norm: 10.0,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            loss: LossConfig::default(),
            qp: QpSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.batch_size >= 1
            && self.clip_norm > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.loss.scales.iter().all(|s| *s > 0.0)
            && self.loss.weights.iter().all(|w| *w >= 0.0)
            && self.loss.obstacle_cap > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub total: f64,
    pub terms: [f64; 8],
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// one record per minibatch (batch means)
    pub records: Vec<LossRecord>,
    /// mean sample loss over the dataset before any update
    pub initial_mean: f64,
    /// mean sample loss during each epoch
    pub epoch_means: Vec<f64>,
    /// mean sample loss over the dataset after training
    pub final_mean: f64,
    /// sample evaluations skipped for infeasible QPs
    pub skipped: usize,
    /// samples with an active constraint seen in the last epoch
    pub active_samples: usize,
    /// of those, how many sent a nonzero gradient into the penalty head
    pub active_with_penalty_grad: usize,
}

/// Mean sample loss over a dataset (infeasible samples skipped).
pub fn dataset_loss(
    net: &PolicyNetwork,
    data: &[TrainingSample],
    loss_cfg: &LossConfig,
    params: &VehicleParams<f64>,
    qp: &QpSettings,
) -> Result<f64> {
    let evals: Vec<Result<Option<SampleEval>>> =
        data.par_iter().map(|s| evaluate_sample(net, s, loss_cfg, params, qp, false)).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for e in evals {
        if let Some(e) = e? {
            sum += e.loss.total;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Minibatch Adam on the sample losses. Gradient accumulation is data
/// parallel but reduced in sample order, so results do not depend on the
/// number of threads.
pub fn train(
    data: &[TrainingSample],
    net: &mut PolicyNetwork,
    config: &TrainConfig,
    params: &VehicleParams<f64>,
) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let mut report = TrainReport {
        initial_mean: dataset_loss(net, data, &config.loss, params, &config.qp)?,
        ..TrainReport::default()
    };
    let n = net.n_params();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut t = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let penalty_ranges = net.penalty_param_ranges();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut epoch_sum, mut epoch_n) = (0.0, 0usize);
        let last_epoch = epoch + 1 == config.epochs;
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let evals: Vec<Result<Option<SampleEval>>> = idx
                .par_iter()
                .map(|&i| evaluate_sample(net, &data[i], &config.loss, params, &config.qp, true))
                .collect();
            let mut grad = vec![0.0; n];
            let mut rec = LossRecord { epoch, batch, total: 0.0, terms: [0.0; 8] };
            let mut used = 0usize;
            for e in evals {
                let Some(e) = e? else {
                    report.skipped += 1;
                    continue;
                };
                if !e.loss.total.is_finite() {
                    return Err(Error::Diverged { epoch, batch, detail: format!("non-finite loss {:?}", e.loss) });
                }
                let g = e.grad.expect("gradient requested");
                if last_epoch && e.active {
                    report.active_samples += 1;
                    let pn: f64 = penalty_ranges.iter().flat_map(|r| g[r.clone()].iter()).map(|x| x * x).sum();
                    if pn > 0.0 {
                        report.active_with_penalty_grad += 1;
                    }
                }
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
                rec.total += e.loss.total;
                for k in 0..8 {
                    rec.terms[k] += e.loss.terms[k];
                }
                used += 1;
            }
            if used == 0 {
                continue;
            }
            let inv = 1.0 / used as f64;
            rec.total *= inv;
            for k in 0..8 {
                rec.terms[k] *= inv;
            }
            epoch_sum += rec.total * used as f64;
            epoch_n += used;
            report.records.push(rec);
            for g in grad.iter_mut() {
                *g *= inv;
            }
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged { epoch, batch, detail: "non-finite gradient".into() });
            }
            if norm > config.clip_norm {
                let s = config.clip_norm / norm;
                for g in grad.iter_mut() {
                    *g *= s;
                }
            }
            t += 1;
            let (b1, b2) = (config.beta1, config.beta2);
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            let p = net.mlp.params_mut();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                p[i] -= config.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
            }
        }
        let mean = if epoch_n == 0 { 0.0 } else { epoch_sum / epoch_n as f64 };
        log::info!("epoch {epoch}: mean loss {mean:.5}");
        report.epoch_means.push(mean);
    }
    report.final_mean = dataset_loss(net, data, &config.loss, params, &config.qp)?;
    Ok(report)
}

/// Loss history as CSV: `epoch,batch,total_loss,loss_v,...,loss_omega`,
/// with a `.meta.json` sidecar carrying the schema version.
pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string(), "batch".into(), "total_loss".into()];
    header.extend(LABEL_FIELDS.iter().map(|f| format!("loss_{f}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.epoch.to_string(), r.batch.to_string(), r.total.to_string()];
        row.extend(r.terms.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    crate::io::write_sidecar(path, "loss_history", LOSS_SCHEMA_VERSION, serde_json::json!({}))?;
    Ok(())
}
