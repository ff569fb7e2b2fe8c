//! Expert controller and dataset pipeline.
//!
//! The expert is a single-shooting NMPC over the 7-state model: decision
//! variables are jerk and steering acceleration over the horizon, gradients
//! come from an adjoint sweep over exact step Jacobians, and the problem is
//! solved by BFGS with backtracking. Its first-step `(a, omega)` are the labels.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::barriernet::{
    observation_dim, Labels, LocalScene, NoiseConfig, NoiseProcess, Observation, TrainingSample, FIELD_DOBS, FIELD_DS,
    LABEL_FIELDS, MASK_ALL,
};
use crate::diffqp::{qp_solve, QpProblem, QpSettings, QpStatus};
use crate::dynamics::{
    curvature_at, step_rk4, step_rk4_mpc, Control, CurvilinearState, MpcControl, ReferencePath, VehicleParams,
};
use crate::error::{Error, Result};
use crate::hocbf::{barrier_value, hocbf_terms_at, BarrierKind, BarrierSpec, Penalties};
use crate::linalg::Matrix;
use crate::scalar::{Dual, Scalar};
use crate::scenario::{sort_and_slot, CoverConfig, ObstacleDisk, Scenario, ScenarioDistribution, SlotConfig};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub w_lateral: f64,
    pub w_heading: f64,
    pub w_speed: f64,
    pub target_speed: f64,
    pub w_jerk: f64,
    pub w_steer: f64,
    /// soft penalty on entering `margin` of a covering disk
    pub w_obstacle: f64,
    pub obstacle_margin: f64,
    /// soft penalty on leaving `d_lf - lane_margin`
    pub w_lane: f64,
    pub lane_margin: f64,
    pub w_bounds: f64,
    /// soft penalty on HOCBF slack (unit penalties) falling below `cbf_margin`
    pub w_cbf: f64,
    pub cbf_margin: f64,
    /// lane barrier bound shared with the policy
    pub d_lf: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.1,
            w_lateral: 10.0,
            w_heading: 5.0,
            w_speed: 1.0,
            target_speed: 8.0,
            w_jerk: 0.1,
            w_steer: 0.1,
            w_obstacle: 100.0,
            obstacle_margin: 0.5,
            w_lane: 100.0,
            lane_margin: 0.2,
            w_bounds: 100.0,
            w_cbf: 50.0,
            cbf_margin: 0.3,
            d_lf: 1.8,
            max_iter: 60,
            grad_tol: 1e-6,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.w_lateral,
            self.w_heading,
            self.w_speed,
            self.w_jerk,
            self.w_steer,
            self.w_obstacle,
            self.w_lane,
            self.w_bounds,
            self.w_cbf,
        ];
        let ok = self.horizon >= 1
            && self.dt > 0.0
            && weights.iter().all(|w| *w >= 0.0)
            && self.obstacle_margin > 0.0
            && self.lane_margin >= 0.0
            && self.cbf_margin >= 0.0
            && self.d_lf > 0.0
            && self.grad_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid MPC config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcSolution {
    pub controls: Vec<MpcControl<f64>>,
    /// predicted 7-state trajectory, `horizon + 1` entries
    pub states: Vec<CurvilinearState<f64>>,
    /// `(a, omega)` after the first step
    pub labels: Control<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn pos2<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x * x
    } else {
        T::zero()
    }
}

/// The shooting problem for one initial state.
pub struct Shooting<'a> {
    x0: CurvilinearState<f64>,
    path: &'a ReferencePath<f64>,
    disks: &'a [ObstacleDisk<f64>],
    config: &'a MpcConfig,
    params: &'a VehicleParams<f64>,
    path7: ReferencePath<Dual<7>>,
    path9: ReferencePath<Dual<9>>,
    params7: VehicleParams<Dual<7>>,
    params9: VehicleParams<Dual<9>>,
}

impl<'a> Shooting<'a> {
    pub fn new(
        x0: &CurvilinearState<f64>,
        path: &'a ReferencePath<f64>,
        disks: &'a [ObstacleDisk<f64>],
        config: &'a MpcConfig,
        params: &'a VehicleParams<f64>,
    ) -> Self {
        Self {
            x0: *x0,
            path,
            disks,
            config,
            params,
            path7: path.cast(),
            path9: path.cast(),
            params7: params.cast(),
            params9: params.cast(),
        }
    }

    pub fn n_vars(&self) -> usize {
        2 * self.config.horizon
    }

    fn state_cost<T: Scalar>(&self, x: &CurvilinearState<T>, path: &ReferencePath<T>, params: &VehicleParams<T>) -> Result<T> {
        let c = self.config;
        let l = T::lit;
        let mut cost = l(c.w_lateral) * x.d * x.d
            + l(c.w_heading) * x.mu * x.mu
            + l(c.w_speed) * (x.v - l(c.target_speed)) * (x.v - l(c.target_speed));
        let lim = l(c.d_lf - c.lane_margin);
        cost = cost + l(c.w_lane) * (pos2(x.d - lim) + pos2(-x.d - lim));
        let p = self.params;
        cost = cost
            + l(c.w_bounds)
                * (pos2(x.a - l(p.a_bounds.max))
                    + pos2(l(p.a_bounds.min) - x.a)
                    + pos2(x.omega - l(p.omega_bounds.max))
                    + pos2(l(p.omega_bounds.min) - x.omega)
                    + pos2(-x.v));
        for disk in self.disks {
            let ds = x.s - l(disk.s_obs);
            let dd = x.d - l(disk.d_obs);
            let dist = (ds * ds + dd * dd).sqrt();
            cost = cost + l(c.w_obstacle) * pos2(l(c.obstacle_margin) - (dist - l(disk.r_d)));
        }
        if c.w_cbf > 0.0 {
            let kappa = curvature_at(path, x.s)?;
            let u = [x.a, x.omega];
            let unit = Penalties { p1: T::one(), p2: T::one() };
            let specs = std::iter::once(BarrierSpec::lane_left(c.d_lf))
                .chain(std::iter::once(BarrierSpec::lane_right(c.d_lf)))
                .chain(self.disks.iter().map(|d| d.barrier()));
            for spec in specs {
                let norm = if spec.kind == BarrierKind::ObstacleDisk { 2.0 * spec.r_d } else { 1.0 };
                let terms = hocbf_terms_at(&spec.cast::<T>(), x, kappa, &unit, params)?;
                let slack = terms.constraint.slack(&u) / l(norm);
                cost = cost + l(c.w_cbf) * pos2(l(c.cbf_margin) - slack);
            }
        }
        Ok(cost)
    }

    fn control_cost(&self, u: [f64; 2]) -> (f64, [f64; 2]) {
        let c = self.config;
        let p = self.params;
        let wb = c.w_bounds;
        let mut cost = c.w_jerk * u[0] * u[0] + c.w_steer * u[1] * u[1];
        let mut g = [2.0 * c.w_jerk * u[0], 2.0 * c.w_steer * u[1]];
        for (i, b) in [p.jerk_bounds, p.steer_acc_bounds].iter().enumerate() {
            if u[i] > b.max {
                cost += wb * (u[i] - b.max).powi(2);
                g[i] += 2.0 * wb * (u[i] - b.max);
            } else if u[i] < b.min {
                cost += wb * (b.min - u[i]).powi(2);
                g[i] -= 2.0 * wb * (b.min - u[i]);
            }
        }
        (cost, g)
    }

    fn control(u: &[f64], k: usize) -> MpcControl<f64> {
        MpcControl { jerk: u[2 * k], steer_acc: u[2 * k + 1] }
    }

    /// Predicted states under the decision vector.
    pub fn rollout(&self, u: &[f64]) -> Result<Vec<CurvilinearState<f64>>> {
        let mut xs = Vec::with_capacity(self.config.horizon + 1);
        xs.push(self.x0);
        for k in 0..self.config.horizon {
            let x = step_rk4_mpc(&xs[k], &Self::control(u, k), self.path, self.params, self.config.dt)?;
            xs.push(x);
        }
        Ok(xs)
    }

    pub fn cost(&self, u: &[f64]) -> Result<f64> {
        let xs = self.rollout(u)?;
        let mut j = 0.0;
        for k in 0..self.config.horizon {
            j += self.control_cost([u[2 * k], u[2 * k + 1]]).0;
            j += self.state_cost(&xs[k + 1], self.path, self.params)?;
        }
        Ok(j)
    }

    pub fn cost_and_gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let h = self.config.horizon;
        let mut xs = vec![self.x0];
        let mut jac_x = Vec::with_capacity(h);
        let mut jac_u = Vec::with_capacity(h);
        for k in 0..h {
            let x = xs[k].to_array7();
            let xd: [Dual<9>; 7] = std::array::from_fn(|i| Dual::variable(x[i], i));
            let uc = MpcControl { jerk: Dual::variable(u[2 * k], 7), steer_acc: Dual::variable(u[2 * k + 1], 8) };
            let next = step_rk4_mpc(&CurvilinearState::from_array7(xd), &uc, &self.path9, &self.params9, Dual::constant(self.config.dt))?;
            let n = next.to_array7();
            let ax: [[f64; 7]; 7] = std::array::from_fn(|r| std::array::from_fn(|c| n[r].eps[c]));
            let bu: [[f64; 2]; 7] = std::array::from_fn(|r| [n[r].eps[7], n[r].eps[8]]);
            jac_x.push(ax);
            jac_u.push(bu);
            xs.push(CurvilinearState::from_array7(std::array::from_fn(|i| n[i].re)));
        }
        let mut j = 0.0;
        let mut grad = vec![0.0; 2 * h];
        let mut lam = [0.0; 7];
        for k in (0..h).rev() {
            // lam holds dJ/dx_{k+1} from later stages
            let x = xs[k + 1].to_array7();
            let xd: [Dual<7>; 7] = std::array::from_fn(|i| Dual::variable(x[i], i));
            let c = self.state_cost(&CurvilinearState::from_array7(xd), &self.path7, &self.params7)?;
            j += c.re;
            for i in 0..7 {
                lam[i] += c.eps[i];
            }
            let (cu, gu) = self.control_cost([u[2 * k], u[2 * k + 1]]);
            j += cu;
            for i in 0..2 {
                grad[2 * k + i] = gu[i] + (0..7).map(|r| jac_u[k][r][i] * lam[r]).sum::<f64>();
            }
            let prev: [f64; 7] = std::array::from_fn(|col| (0..7).map(|r| jac_x[k][r][col] * lam[r]).sum());
            lam = prev;
        }
        Ok((j, grad))
    }
}

fn checked_cost(problem: &Shooting<'_>, u: &[f64]) -> f64 {
    match problem.cost(u) {
        Ok(c) if c.is_finite() => c,
        _ => f64::INFINITY,
    }
}

/// BFGS with Armijo backtracking. Returns `(u, cost, iterations, grad_norm)`.
fn bfgs(problem: &Shooting<'_>, mut u: Vec<f64>, max_iter: usize, tol: f64) -> Result<(Vec<f64>, f64, usize, f64)> {
    let n = u.len();
    let (mut f, mut g) = problem.cost_and_gradient(&u)?;
    let mut hinv = Matrix::<f64>::identity(n);
    let mut iters = 0;
    let norm = |g: &[f64]| g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    while iters < max_iter && norm(&g) > tol {
        iters += 1;
        let mut p: Vec<f64> = hinv.mul_vec(&g).iter().map(|x| -x).collect();
        let mut slope: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            hinv = Matrix::identity(n);
            p = g.iter().map(|x| -x).collect();
            slope = -g.iter().map(|x| x * x).sum::<f64>();
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = u.iter().zip(&p).map(|(a, b)| a + t * b).collect();
            let ft = checked_cost(problem, &trial);
            if ft <= f + 1e-4 * t * slope {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((un, _)) = accepted else { break };
        let (fn_, gn) = problem.cost_and_gradient(&un)?;
        let s: Vec<f64> = un.iter().zip(&u).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            if iters == 1 {
                let yy: f64 = y.iter().map(|x| x * x).sum();
                hinv = Matrix::diagonal(&vec![sy / yy; n]);
            }
            // H+ = (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let rho = 1.0 / sy;
            let hy = hinv.mul_vec(&y);
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for r in 0..n {
                for c in 0..n {
                    hinv[(r, c)] += -rho * (hy[r] * s[c] + s[r] * hy[c]) + (rho * rho * yhy + rho) * s[r] * s[c];
                }
            }
        }
        u = un;
        f = fn_;
        g = gn;
    }
    let gn = norm(&g);
    Ok((u, f, iters, gn))
}

/// Solves the NMPC problem from `state` (a 7-state: `a`, `omega` are the
/// currently applied controls). Fails with [`Error::NoSafeSolution`] when the
/// predicted trajectory leaves the lane barrier or enters a disk.
pub fn nmpc_solve(
    state: &CurvilinearState<f64>,
    path: &ReferencePath<f64>,
    obstacles: &[ObstacleDisk<f64>],
    config: &MpcConfig,
    params: &VehicleParams<f64>,
    warm_start: Option<&[MpcControl<f64>]>,
) -> Result<MpcSolution> {
    config.validate()?;
    let problem = Shooting::new(state, path, obstacles, config, params);
    let mut u0 = vec![0.0; problem.n_vars()];
    if let Some(w) = warm_start {
        for (k, c) in w.iter().take(config.horizon).enumerate() {
            u0[2 * k] = c.jerk;
            u0[2 * k + 1] = c.steer_acc;
        }
    }
    let (u, cost, iterations, grad_norm) = bfgs(&problem, u0, config.max_iter, config.grad_tol)?;
    let states = problem.rollout(&u)?;
    for (k, x) in states.iter().enumerate() {
        let lane_ok = x.d.abs() < config.d_lf;
        let disk_ok = obstacles.iter().all(|d| barrier_value(&d.barrier(), x) > 0.0);
        if !lane_ok || !disk_ok {
            return Err(Error::NoSafeSolution(format!("predicted state {k} violates a barrier: {x:?}")));
        }
    }
    let controls = (0..config.horizon).map(|k| Shooting::control(&u, k)).collect();
    let labels = Control::new(states[1].a, states[1].omega);
    Ok(MpcSolution { controls, states, labels, cost, iterations, grad_norm })
}

/// Slacks of all HOCBF constraints (unit penalties) for a label applied at
/// `state`, in the policy's constraint order.
pub fn label_slacks(
    state: &CurvilinearState<f64>,
    disks: &[ObstacleDisk<f64>],
    kappa: f64,
    label: &Control<f64>,
    d_lf: f64,
    params: &VehicleParams<f64>,
) -> Result<Vec<f64>> {
    let scene = LocalScene::exact(state, disks, kappa);
    let terms = scene.terms(d_lf, &vec![Penalties::unit(); disks.len() + 2], params)?;
    Ok(terms.iter().map(|t| t.constraint.slack(&label.to_array())).collect())
}

/// Minimal change to `label` so every constraint holds with `margin` to spare.
fn filter_label(
    state: &CurvilinearState<f64>,
    disks: &[ObstacleDisk<f64>],
    kappa: f64,
    label: &Control<f64>,
    d_lf: f64,
    margin: f64,
    params: &VehicleParams<f64>,
) -> Result<Option<Control<f64>>> {
    let scene = LocalScene::exact(state, disks, kappa);
    let terms = scene.terms(d_lf, &vec![Penalties::unit(); disks.len() + 2], params)?;
    let rows: Vec<Vec<f64>> = terms.iter().map(|t| vec![-t.constraint.coeff[0], -t.constraint.coeff[1]]).collect();
    let h = terms.iter().map(|t| t.constraint.constant - margin).collect();
    let qp = QpProblem::new(Matrix::identity(2), vec![-label.a, -label.omega], Matrix::from_rows(&rows), h).with_bounds(
        vec![params.a_bounds.min, params.omega_bounds.min],
        vec![params.a_bounds.max, params.omega_bounds.max],
    );
    let sol = qp_solve(&qp, &QpSettings::default())?;
    Ok((sol.status == QpStatus::Optimal).then(|| Control::new(sol.u_star[0], sol.u_star[1])))
}

pub fn label_is_safe(slacks: &[f64], label: &Control<f64>, params: &VehicleParams<f64>) -> bool {
    slacks.iter().all(|s| *s >= 0.0) && params.a_bounds.contains(label.a) && params.omega_bounds.contains(label.omega)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub episodes: usize,
    pub steps_per_episode: usize,
    /// share of episodes drawn from the obstacle distribution
    pub obstacle_fraction: f64,
    pub obstacle: ScenarioDistribution,
    pub lane_keeping: ScenarioDistribution,
    pub cover: CoverConfig,
    pub noise: NoiseConfig,
    pub seed: u64,
    /// scenario draws per episode before giving up
    pub max_attempts: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            episodes: 70,
            steps_per_episode: 150,
            obstacle_fraction: 0.7,
            obstacle: ScenarioDistribution::obstacle_avoidance(),
            lane_keeping: ScenarioDistribution::lane_keeping(),
            cover: CoverConfig::default(),
            noise: NoiseConfig::default(),
            seed: 0,
            max_attempts: 5,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.obstacle.validate()?;
        self.lane_keeping.validate()?;
        self.cover.validate()?;
        self.noise.validate()?;
        if self.obstacle.slots != self.lane_keeping.slots {
            return Err(Error::InvalidInput("both distributions must use the same slot count".into()));
        }
        if !(0.0..=1.0).contains(&self.obstacle_fraction) || self.steps_per_episode == 0 || self.max_attempts == 0 {
            return Err(Error::InvalidInput(format!("invalid dataset spec {self:?}")));
        }
        Ok(())
    }

    pub fn n_slots(&self) -> usize {
        self.obstacle.slots
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub episodes: usize,
    pub attempts: usize,
    pub rejected: usize,
    /// labels that needed the CBF filter to become safe
    pub filtered_labels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<TrainingSample>,
    pub n_slots: usize,
    pub noise: NoiseConfig,
    pub stats: DatasetStats,
}

/// Per-episode RNG streams: scenario draws and observation noise.
pub fn episode_rngs(seed: u64, episode: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut scen = ChaCha8Rng::seed_from_u64(seed);
    scen.set_stream(2 * episode as u64);
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(2 * episode as u64 + 1);
    (scen, noise)
}

struct EpisodeOutcome {
    samples: Vec<TrainingSample>,
    attempts: usize,
    rejected: usize,
    filtered: usize,
}

/// Runs the expert in closed loop on one scenario and records samples.
pub fn expert_episode<R: Rng + ?Sized>(
    episode: usize,
    scenario: &Scenario,
    spec: &DatasetSpec,
    config: &MpcConfig,
    params: &VehicleParams<f64>,
    noise_rng: &mut R,
) -> Result<(Vec<TrainingSample>, usize)> {
    let path = &scenario.path;
    let slots = SlotConfig { n_slots: scenario.n_slots, ..SlotConfig::default() };
    let mut noise = NoiseProcess::new(spec.noise, scenario.n_slots);
    let mut x = scenario.ego_init;
    x.a = 0.0;
    x.omega = 0.0;
    let mut warm: Option<Vec<MpcControl<f64>>> = None;
    let mut samples = Vec::with_capacity(spec.steps_per_episode);
    let mut filtered = 0;
    for step in 0..spec.steps_per_episode {
        let disks = sort_and_slot(&x, &scenario.obstacles, path, &spec.cover, &slots)?;
        let kappa = curvature_at(path, x.s)?;
        let offsets = noise.sample(noise_rng);
        let obs = Observation::new(&x, &disks, kappa, offsets, spec.noise.sigma);
        let real: Vec<ObstacleDisk<f64>> = disks.iter().filter(|d| !d.parked).copied().collect();
        let sol = nmpc_solve(&x, path, &real, config, params, warm.as_deref())?;
        let mut label = sol.labels;
        let slacks = label_slacks(&x, &disks, kappa, &label, config.d_lf, params)?;
        if !label_is_safe(&slacks, &label, params) {
            let fixed = filter_label(&x, &disks, kappa, &label, config.d_lf, 1e-6, params)?
                .filter(|u| label_is_safe(&label_slacks(&x, &disks, kappa, u, config.d_lf, params).unwrap_or_default(), u, params));
            match fixed {
                Some(u) => {
                    label = u;
                    filtered += 1;
                }
                None => return Err(Error::NoSafeSolution(format!("no safe label at step {step}"))),
            }
        }
        let mut mask = MASK_ALL;
        let (ds, dobs) = match disks.first() {
            Some(d0) if !d0.parked => (path.signed_gap(x.s, d0.s_obs), d0.d_obs),
            _ => {
                mask &= !(1 << FIELD_DS) & !(1 << FIELD_DOBS);
                (0.0, 0.0)
            }
        };
        let labels = Labels { v: x.v, delta: x.delta, d: x.d, dobs, mu: x.mu, ds, a: label.a, omega: label.omega };
        samples.push(TrainingSample { episode, step, observation: obs, labels, mask });

        let mut next = step_rk4(&x, &label, path, params, params.dt)?;
        next.v = next.v.max(0.0);
        next.a = label.a;
        next.omega = label.omega;
        if next.d.abs() >= path.lane_half_width() {
            return Err(Error::NoSafeSolution(format!("expert left the road at step {step}")));
        }
        x = next;
        let mut shifted: Vec<MpcControl<f64>> = sol.controls[1..].to_vec();
        shifted.push(*sol.controls.last().expect("horizon >= 1"));
        warm = Some(shifted);
    }
    Ok((samples, filtered))
}

fn run_episode(
    episode: usize,
    spec: &DatasetSpec,
    paths: &(ReferencePath<f64>, ReferencePath<f64>),
    config: &MpcConfig,
    params: &VehicleParams<f64>,
) -> Result<EpisodeOutcome> {
    let (mut scen_rng, mut noise_rng) = episode_rngs(spec.seed, episode);
    let mut rejected = 0;
    for attempt in 0..spec.max_attempts {
        let use_obstacles = scen_rng.random::<f64>() < spec.obstacle_fraction;
        let (dist, path) = if use_obstacles { (&spec.obstacle, &paths.0) } else { (&spec.lane_keeping, &paths.1) };
        let scenario = dist.sample(path, &mut scen_rng)?;
        match expert_episode(episode, &scenario, spec, config, params, &mut noise_rng) {
            Ok((samples, filtered)) => {
                return Ok(EpisodeOutcome { samples, attempts: attempt + 1, rejected, filtered });
            }
            Err(e @ (Error::NoSafeSolution(_) | Error::Singular { .. } | Error::SteeringDomain(_))) => {
                log::debug!("episode {episode} attempt {attempt} rejected: {e}");
                rejected += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(EpisodeOutcome { samples: Vec::new(), attempts: spec.max_attempts, rejected, filtered: 0 })
}

/// Generates the dataset. Episodes run in parallel on independent RNG
/// streams and are concatenated in episode order.
pub fn generate_dataset(spec: &DatasetSpec, config: &MpcConfig, params: &VehicleParams<f64>) -> Result<Dataset> {
    spec.validate()?;
    config.validate()?;
    let paths = (spec.obstacle.path.build(None)?, spec.lane_keeping.path.build(None)?);
    let outcomes: Vec<Result<EpisodeOutcome>> =
        (0..spec.episodes).into_par_iter().map(|e| run_episode(e, spec, &paths, config, params)).collect();
    let mut stats = DatasetStats { episodes: spec.episodes, ..DatasetStats::default() };
    let mut samples = Vec::new();
    for o in outcomes {
        let o = o?;
        stats.attempts += o.attempts;
        stats.rejected += o.rejected;
        stats.filtered_labels += o.filtered;
        samples.extend(o.samples);
    }
    if stats.rejected * 2 > stats.attempts {
        return Err(Error::RejectionRate { rejected: stats.rejected, attempted: stats.attempts });
    }
    if stats.rejected > 0 {
        log::info!("rejected {} of {} expert episodes", stats.rejected, stats.attempts);
    }
    Ok(Dataset { samples, n_slots: spec.n_slots(), noise: spec.noise, stats })
}

pub fn dataset_header(n_slots: usize) -> Vec<String> {
    let mut h = vec!["episode".to_string(), "step".into()];
    h.extend((0..observation_dim(n_slots)).map(|i| format!("obs_{i}")));
    h.extend(LABEL_FIELDS.iter().map(|f| format!("label_{f}")));
    h.push("mask_bits".into());
    h
}

/// Writes the dataset CSV plus a `.meta.json` sidecar (schema version, slot
/// count, noise parameters, generation statistics).
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(dataset_header(data.n_slots))?;
    for s in &data.samples {
        let mut row = vec![s.episode.to_string(), s.step.to_string()];
        row.extend(s.observation.z.iter().map(|v| v.to_string()));
        row.extend(s.labels.to_array().iter().map(|v| v.to_string()));
        row.push(s.mask.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    crate::io::write_sidecar(
        path,
        "dataset",
        DATASET_SCHEMA_VERSION,
        serde_json::json!({ "n_slots": data.n_slots, "noise": data.noise, "stats": data.stats }),
    )
}

pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let meta = crate::io::read_sidecar(path, "dataset", DATASET_SCHEMA_VERSION)?;
    let n_slots = meta["n_slots"].as_u64().ok_or_else(|| Error::Format("dataset meta lacks n_slots".into()))? as usize;
    let noise: NoiseConfig = serde_json::from_value(meta["noise"].clone()).unwrap_or_default();
    let stats: DatasetStats = serde_json::from_value(meta["stats"].clone()).unwrap_or_default();
    let mut r = csv::Reader::from_path(path)?;
    let expected = dataset_header(n_slots);
    if r.headers()?.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Format(format!("{}: unexpected dataset header", path.display())));
    }
    let dim = observation_dim(n_slots);
    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| Error::Format(format!("column {}: {e}", expected[i])))
        };
        let int = |i: usize| -> Result<usize> {
            rec[i].parse::<usize>().map_err(|e| Error::Format(format!("column {}: {e}", expected[i])))
        };
        let z = (0..dim).map(|i| num(2 + i)).collect::<Result<Vec<_>>>()?;
        let mut lab = [0.0; 8];
        for (k, l) in lab.iter_mut().enumerate() {
            *l = num(2 + dim + k)?;
        }
        let mask = u8::try_from(int(2 + dim + 8)?).map_err(|e| Error::Format(format!("mask_bits: {e}")))?;
        samples.push(TrainingSample {
            episode: int(0)?,
            step: int(1)?,
            observation: Observation { z, n_slots, sigma: noise.sigma },
            labels: Labels::from_array(lab),
            mask,
        });
    }
    Ok(Dataset { samples, n_slots, noise, stats })
}

/// Cross-entropy-method minimiser of the same shooting cost; an independent
/// check on the gradient-based solver.
pub fn cem_oracle(problem: &Shooting<'_>, samples: usize, iterations: usize, seed: u64) -> (Vec<f64>, f64) {
    use rand_distr::{Distribution, Normal};
    let n = problem.n_vars();
    let p = problem.params;
    let mut mean = vec![0.0; n];
    let mut std: Vec<f64> = (0..n)
        .map(|i| if i % 2 == 0 { 0.5 * p.jerk_bounds.max } else { 0.5 * p.steer_acc_bounds.max })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = (mean.clone(), checked_cost(problem, &mean));
    let n_elite = (samples / 10).max(1);
    for _ in 0..iterations {
        let mut pop: Vec<(f64, Vec<f64>)> = (0..samples)
            .map(|_| {
                let u: Vec<f64> = (0..n)
                    .map(|i| mean[i] + std[i] * Normal::new(0.0, 1.0).expect("unit normal").sample(&mut rng))
                    .collect();
                (checked_cost(problem, &u), u)
            })
            .collect();
        pop.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pop[0].0 < best.1 {
            best = (pop[0].1.clone(), pop[0].0);
        }
        for i in 0..n {
            let m = pop[..n_elite].iter().map(|e| e.1[i]).sum::<f64>() / n_elite as f64;
            let v = pop[..n_elite].iter().map(|e| (e.1[i] - m).powi(2)).sum::<f64>() / n_elite as f64;
            mean[i] = m;
            std[i] = v.sqrt().max(1e-6);
        }
    }
    let m = checked_cost(problem, &mean);
    if m < best.1 {
        best = (mean, m);
    }
    best
}
