//! Kinematic bicycle model in curvilinear (Frenet) coordinates.
//!
//! Sign convention used throughout the crate: the lateral offset `d` and the
//! path normal point to the LEFT of the direction of travel.
//!
//! Two models share the geometry:
//! * the 5-state model `(s, d, mu, v, delta)` driven by `(a, omega)`, used by
//!   the barrier functions and the closed-loop simulator;
//! * the 7-state model `(s, d, mu, v, a, delta, omega)` driven by
//!   `(jerk, steering acceleration)`, used by the NMPC expert.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds<T> {
    pub min: T,
    pub max: T,
}

impl<T: Scalar> Bounds<T> {
    pub fn new(min: T, max: T) -> Self {
        Self { min, max }
    }

    pub fn clamp(&self, x: T) -> T {
        x.max(self.min).min(self.max)
    }

    pub fn contains(&self, x: T) -> bool {
        x >= self.min && x <= self.max
    }

    fn cast<U: Scalar>(self) -> Bounds<U> {
        Bounds { min: U::lit(self.min.value()), max: U::lit(self.max.value()) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams<T> {
    /// rear axle to centre of gravity (m)
    pub l_r: T,
    /// front axle to centre of gravity (m)
    pub l_f: T,
    pub a_bounds: Bounds<T>,
    pub omega_bounds: Bounds<T>,
    pub jerk_bounds: Bounds<T>,
    pub steer_acc_bounds: Bounds<T>,
    /// integration step (s)
    pub dt: T,
}

impl Default for VehicleParams<f64> {
    fn default() -> Self {
        Self {
            l_r: 1.395,
            l_f: 1.395,
            a_bounds: Bounds::new(-5.0, 3.0),
            omega_bounds: Bounds::new(-0.6, 0.6),
            jerk_bounds: Bounds::new(-8.0, 8.0),
            steer_acc_bounds: Bounds::new(-3.0, 3.0),
            dt: 0.1,
        }
    }
}

impl<T: Scalar> VehicleParams<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.to_string()));
        if !(self.l_r > T::zero()) || !(self.l_f > T::zero()) {
            return bad("axle distances must be positive");
        }
        for (name, b) in [
            ("a_bounds", self.a_bounds),
            ("omega_bounds", self.omega_bounds),
            ("jerk_bounds", self.jerk_bounds),
            ("steer_acc_bounds", self.steer_acc_bounds),
        ] {
            if !(b.min < b.max) {
                return bad(&format!("{name} requires min < max"));
            }
        }
        if !(self.dt > T::zero()) {
            return bad("dt must be positive");
        }
        Ok(())
    }

    /// `l_r / (l_r + l_f)`
    pub fn rear_ratio(&self) -> T {
        self.l_r / (self.l_r + self.l_f)
    }

    pub fn cast<U: Scalar>(&self) -> VehicleParams<U> {
        VehicleParams {
            l_r: U::lit(self.l_r.value()),
            l_f: U::lit(self.l_f.value()),
            a_bounds: self.a_bounds.cast(),
            omega_bounds: self.omega_bounds.cast(),
            jerk_bounds: self.jerk_bounds.cast(),
            steer_acc_bounds: self.steer_acc_bounds.cast(),
            dt: U::lit(self.dt.value()),
        }
    }
}

/// Vehicle state relative to a reference path. `a` and `omega` are only
/// dynamic in the 7-state NMPC model and stay untouched by the 5-state model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurvilinearState<T> {
    pub s: T,
    pub d: T,
    pub mu: T,
    pub v: T,
    pub delta: T,
    #[serde(default)]
    pub a: T,
    #[serde(default)]
    pub omega: T,
}

impl<T: Scalar> CurvilinearState<T> {
    pub fn new(s: T, d: T, mu: T, v: T, delta: T) -> Self {
        Self { s, d, mu, v, delta, a: T::zero(), omega: T::zero() }
    }

    pub fn to_array5(&self) -> [T; 5] {
        [self.s, self.d, self.mu, self.v, self.delta]
    }

    /// Order: `(s, d, mu, v, a, delta, omega)`.
    pub fn to_array7(&self) -> [T; 7] {
        [self.s, self.d, self.mu, self.v, self.a, self.delta, self.omega]
    }

    /// Replaces the 5-state part, keeping `a`, `omega`.
    pub fn with_array5(&self, x: [T; 5]) -> Self {
        Self { s: x[0], d: x[1], mu: x[2], v: x[3], delta: x[4], a: self.a, omega: self.omega }
    }

    pub fn from_array7(x: [T; 7]) -> Self {
        Self { s: x[0], d: x[1], mu: x[2], v: x[3], a: x[4], delta: x[5], omega: x[6] }
    }

    pub fn cast<U: Scalar>(&self) -> CurvilinearState<U> {
        CurvilinearState::from_array7(self.to_array7().map(|x| U::lit(x.value())))
    }
}

/// Control of the 5-state model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Control<T> {
    /// acceleration (m/s²)
    pub a: T,
    /// steering rate (rad/s)
    pub omega: T,
}

impl<T: Scalar> Control<T> {
    pub fn new(a: T, omega: T) -> Self {
        Self { a, omega }
    }

    pub fn to_array(&self) -> [T; 2] {
        [self.a, self.omega]
    }
}

/// Control of the 7-state NMPC model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MpcControl<T> {
    /// jerk (m/s³)
    pub jerk: T,
    /// steering acceleration (rad/s²)
    pub steer_acc: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment<T> {
    pub length: T,
    pub curvature: T,
}

/// Pose of a point in the global frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    pub x: T,
    pub y: T,
    pub theta: T,
}

/// Chain of constant-curvature segments starting at the origin heading +x.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePath<T> {
    segments: Vec<Segment<T>>,
    lane_half_width: T,
    closed: bool,
    /// arc length at the start of each segment, plus the total at the end
    starts: Vec<T>,
    /// pose of the path at each segment start
    start_poses: Vec<Pose<T>>,
}

/// On-disk layout of a path file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathFile {
    #[serde(default = "path_schema_version")]
    pub schema_version: u32,
    /// `[length_m, curvature_per_m]` pairs
    pub segments: Vec<[f64; 2]>,
    pub lane_half_width: f64,
    #[serde(default)]
    pub closed: bool,
}

pub const PATH_SCHEMA_VERSION: u32 = 1;

fn path_schema_version() -> u32 {
    PATH_SCHEMA_VERSION
}

impl<T: Scalar> ReferencePath<T> {
    pub fn new(segments: Vec<Segment<T>>, lane_half_width: T, closed: bool) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidPath("no segments".into()));
        }
        if !(lane_half_width > T::zero()) {
            return Err(Error::InvalidPath("lane half width must be positive".into()));
        }
        let mut starts = Vec::with_capacity(segments.len() + 1);
        let mut start_poses = Vec::with_capacity(segments.len());
        let mut acc = T::zero();
        let mut pose = Pose { x: T::zero(), y: T::zero(), theta: T::zero() };
        for (i, seg) in segments.iter().enumerate() {
            if !(seg.length > T::zero()) {
                return Err(Error::InvalidPath(format!("segment {i} has non-positive length")));
            }
            if !(seg.curvature.abs() * lane_half_width < T::one()) {
                return Err(Error::InvalidPath(format!(
                    "segment {i}: |kappa| * lane half width must be < 1"
                )));
            }
            starts.push(acc);
            start_poses.push(pose);
            pose = advance(pose, seg.curvature, seg.length);
            acc = acc + seg.length;
        }
        starts.push(acc);
        Ok(Self { segments, lane_half_width, closed, starts, start_poses })
    }

    /// Single straight segment.
    pub fn straight(length: T, lane_half_width: T) -> Result<Self> {
        Self::new(vec![Segment { length, curvature: T::zero() }], lane_half_width, false)
    }

    pub fn segments(&self) -> &[Segment<T>] {
        &self.segments
    }

    pub fn lane_half_width(&self) -> T {
        self.lane_half_width
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn length(&self) -> T {
        self.starts[self.segments.len()]
    }

    /// Maps `s` into `[0, length)` on closed paths; range-checks open paths.
    pub fn wrap(&self, s: T) -> Result<T> {
        let len = self.length();
        if self.closed {
            let mut w = s % len;
            if w < T::zero() {
                w = w + len;
            }
            if w >= len {
                w = w - len;
            }
            Ok(w)
        } else if s < T::zero() || s > len {
            Err(Error::OutOfRange { s: s.value(), length: len.value() })
        } else {
            Ok(s)
        }
    }

    /// Index of the segment containing the (already wrapped) arc length.
    fn segment_index(&self, s: T) -> usize {
        let n = self.segments.len();
        // starts is sorted; find last start <= s
        let mut lo = 0;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.starts[mid] <= s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Signed difference `to - from` along the path; on closed paths the
    /// shortest representative in `[-L/2, L/2)`.
    pub fn signed_gap(&self, from: T, to: T) -> T {
        let diff = to - from;
        if !self.closed {
            return diff;
        }
        let len = self.length();
        let half = len * T::lit(0.5);
        let mut w = (diff + half) % len;
        if w < T::zero() {
            w = w + len;
        }
        w - half
    }

    pub fn cast<U: Scalar>(&self) -> ReferencePath<U> {
        let c = |x: T| U::lit(x.value());
        ReferencePath {
            segments: self
                .segments
                .iter()
                .map(|s| Segment { length: c(s.length), curvature: c(s.curvature) })
                .collect(),
            lane_half_width: c(self.lane_half_width),
            closed: self.closed,
            starts: self.starts.iter().map(|x| c(*x)).collect(),
            start_poses: self
                .start_poses
                .iter()
                .map(|p| Pose { x: c(p.x), y: c(p.y), theta: c(p.theta) })
                .collect(),
        }
    }
}

impl ReferencePath<f64> {
    pub fn from_file(file: &PathFile) -> Result<Self> {
        if file.schema_version != PATH_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported path schema_version {}", file.schema_version)));
        }
        let segments = file
            .segments
            .iter()
            .map(|[length, curvature]| Segment { length: *length, curvature: *curvature })
            .collect();
        Self::new(segments, file.lane_half_width, file.closed)
    }

    pub fn to_file(&self) -> PathFile {
        PathFile {
            schema_version: PATH_SCHEMA_VERSION,
            segments: self.segments.iter().map(|s| [s.length, s.curvature]).collect(),
            lane_half_width: self.lane_half_width,
            closed: self.closed,
        }
    }

    /// Reads a path file (JSON when the extension is `.json`, TOML otherwise).
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: PathFile = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        Self::from_file(&file)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = self.to_file();
        let text = if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_string_pretty(&file)?
        } else {
            toml::to_string(&file).map_err(|e| Error::Format(e.to_string()))?
        };
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Oval track: two straights joined by half-circles of radius `radius`.
    pub fn oval(straight: f64, radius: f64, lane_half_width: f64) -> Result<Self> {
        let arc = std::f64::consts::PI * radius;
        let k = 1.0 / radius;
        Self::new(
            vec![
                Segment { length: straight, curvature: 0.0 },
                Segment { length: arc, curvature: k },
                Segment { length: straight, curvature: 0.0 },
                Segment { length: arc, curvature: k },
            ],
            lane_half_width,
            true,
        )
    }

    /// Closest-point projection of a global position onto the path,
    /// returning `(s, d)`.
    pub fn project(&self, x: f64, y: f64) -> (f64, f64) {
        use std::f64::consts::TAU;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for (i, seg) in self.segments.iter().enumerate() {
            let p0 = self.start_poses[i];
            let (t, d) = if seg.curvature == 0.0 {
                let (sn, cs) = p0.theta.sin_cos();
                let (dx, dy) = (x - p0.x, y - p0.y);
                ((dx * cs + dy * sn).clamp(0.0, seg.length), -dx * sn + dy * cs)
            } else {
                let k = seg.curvature;
                let r = 1.0 / k;
                // centre of curvature sits on the left normal at signed distance 1/k
                let cx = p0.x - r * p0.theta.sin();
                let cy = p0.y + r * p0.theta.cos();
                // the radius vector turns at rate k per unit arc length
                let phi0 = (p0.y - cy).atan2(p0.x - cx);
                let dphi = (y - cy).atan2(x - cx) - phi0;
                let dphi = if k > 0.0 { dphi.rem_euclid(TAU) } else { -(-dphi).rem_euclid(TAU) };
                let mut t = dphi / k;
                if t > seg.length {
                    let full = TAU / k.abs();
                    t = if t - seg.length < full - t { seg.length } else { 0.0 };
                }
                let dist = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                (t, k.signum() * (r.abs() - dist))
            };
            let pose = self.pose_at(self.starts[i] + t, d).expect("in range");
            let err = ((x - pose.x).powi(2) + (y - pose.y).powi(2)).sqrt();
            // prefer the exact foot point, then the smallest |d|
            let score = err * 1e6 + d.abs();
            if score < best.0 {
                best = (score, self.starts[i] + t, d);
            }
        }
        (best.1, best.2)
    }
}

/// Moves a pose along a constant-curvature arc.
fn advance<T: Scalar>(p: Pose<T>, kappa: T, len: T) -> Pose<T> {
    let th1 = p.theta + kappa * len;
    if kappa.abs() < T::lit(1e-12) {
        Pose { x: p.x + len * p.theta.cos(), y: p.y + len * p.theta.sin(), theta: th1 }
    } else {
        Pose {
            x: p.x + (th1.sin() - p.theta.sin()) / kappa,
            y: p.y + (p.theta.cos() - th1.cos()) / kappa,
            theta: th1,
        }
    }
}

/// Curvature of the segment containing arc length `s`.
pub fn curvature_at<T: Scalar>(path: &ReferencePath<T>, s: T) -> Result<T> {
    let w = path.wrap(s)?;
    Ok(path.segments[path.segment_index(w)].curvature)
}

impl<T: Scalar> ReferencePath<T> {
    /// Global pose of the point at arc length `s` offset by `d` along the left
    /// normal; heading is the path tangent.
    pub fn pose_at(&self, s: T, d: T) -> Result<Pose<T>> {
        let w = self.wrap(s)?;
        let i = self.segment_index(w);
        let p = advance(self.start_poses[i], self.segments[i].curvature, w - self.starts[i]);
        let (sn, cs) = p.theta.sin_cos();
        Ok(Pose { x: p.x - d * sn, y: p.y + d * cs, theta: p.theta })
    }
}

/// Cartesian pose of the centre of gravity; heading `theta = phi + mu`.
pub fn global_pose<T: Scalar>(path: &ReferencePath<T>, state: &CurvilinearState<T>) -> Result<Pose<T>> {
    let p = path.pose_at(state.s, state.d)?;
    Ok(Pose { theta: p.theta + state.mu, ..p })
}

/// Kinematic slip angle `beta = atan(l_r / (l_r + l_f) * tan(delta))`.
pub fn slip_angle<T: Scalar>(delta: T, params: &VehicleParams<T>) -> Result<T> {
    if !(delta.abs() < T::FRAC_PI_2()) {
        return Err(Error::SteeringDomain(delta.value()));
    }
    Ok(slip(delta, params.rear_ratio()))
}

#[inline]
pub(crate) fn slip<T: Scalar>(delta: T, k: T) -> T {
    (k * delta.tan()).atan()
}

/// `d beta / d delta = k sec² delta / (1 + k² tan² delta)`
#[inline]
pub(crate) fn slip_derivative<T: Scalar>(delta: T, k: T) -> T {
    let t = delta.tan();
    k * (T::one() + t * t) / (T::one() + k * k * t * t)
}

/// Shared kinematic terms of both models.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Kinematics<T> {
    /// `cos(mu + beta)`
    pub cos_h: T,
    /// `sin(mu + beta)`
    pub sin_h: T,
    /// `1 - d kappa`
    pub proj: T,
    pub kappa: T,
    pub s_dot: T,
    pub d_dot: T,
    pub mu_dot: T,
}

pub(crate) fn kinematics<T: Scalar>(
    s: T,
    d: T,
    mu: T,
    v: T,
    delta: T,
    kappa: T,
    params: &VehicleParams<T>,
) -> Result<Kinematics<T>> {
    let proj = T::one() - d * kappa;
    if !(proj > T::zero()) {
        return Err(Error::Singular { margin: proj.value(), state: vec![s.value(), d.value(), mu.value(), v.value(), delta.value()] });
    }
    if !(delta.abs() < T::FRAC_PI_2()) {
        return Err(Error::SteeringDomain(delta.value()));
    }
    let beta = slip(delta, params.rear_ratio());
    let (sin_h, cos_h) = (mu + beta).sin_cos();
    let s_dot = v * cos_h / proj;
    let d_dot = v * sin_h;
    let mu_dot = v / params.l_r * beta.sin() - kappa * s_dot;
    Ok(Kinematics { cos_h, sin_h, proj, kappa, s_dot, d_dot, mu_dot })
}

/// Drift `f(x)` of the 5-state model, order `(s, d, mu, v, delta)`. The
/// control matrix is constant: `a` drives `v`, `omega` drives `delta`.
pub fn drift_bn<T: Scalar>(
    state: &CurvilinearState<T>,
    path: &ReferencePath<T>,
    params: &VehicleParams<T>,
) -> Result<[T; 5]> {
    let kappa = curvature_at(path, state.s)?;
    let k = kinematics(state.s, state.d, state.mu, state.v, state.delta, kappa, params)?;
    Ok([k.s_dot, k.d_dot, k.mu_dot, T::zero(), T::zero()])
}

/// Control matrix of the 5-state model (rows `s, d, mu, v, delta`; columns `a, omega`).
pub fn control_matrix_bn<T: Scalar>() -> [[T; 2]; 5] {
    let (z, o) = (T::zero(), T::one());
    [[z, z], [z, z], [z, z], [o, z], [z, o]]
}

/// `f(x) + g u` of the 5-state model.
pub fn dynamics_bn<T: Scalar>(
    state: &CurvilinearState<T>,
    control: &Control<T>,
    path: &ReferencePath<T>,
    params: &VehicleParams<T>,
) -> Result<[T; 5]> {
    let mut f = drift_bn(state, path, params)?;
    f[3] = control.a;
    f[4] = control.omega;
    Ok(f)
}

/// Full 7-state model, order `(s, d, mu, v, a, delta, omega)`.
pub fn dynamics_mpc<T: Scalar>(
    state: &CurvilinearState<T>,
    u_jerk: T,
    u_steer: T,
    path: &ReferencePath<T>,
    params: &VehicleParams<T>,
) -> Result<[T; 7]> {
    let kappa = curvature_at(path, state.s)?;
    let k = kinematics(state.s, state.d, state.mu, state.v, state.delta, kappa, params)?;
    Ok([k.s_dot, k.d_dot, k.mu_dot, state.a, u_jerk, state.omega, u_steer])
}

fn rk4<T: Scalar, const N: usize>(
    x: [T; N],
    dt: T,
    mut f: impl FnMut(&[T; N]) -> Result<[T; N]>,
) -> Result<[T; N]> {
    let half = dt * T::lit(0.5);
    let axpy = |a: &[T; N], h: T, k: &[T; N]| {
        let mut o = *a;
        for i in 0..N {
            o[i] = a[i] + h * k[i];
        }
        o
    };
    let k1 = f(&x)?;
    let k2 = f(&axpy(&x, half, &k1))?;
    let k3 = f(&axpy(&x, half, &k2))?;
    let k4 = f(&axpy(&x, dt, &k3))?;
    let sixth = dt / T::lit(6.0);
    let two = T::lit(2.0);
    let mut out = x;
    for i in 0..N {
        out[i] = x[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
    }
    Ok(out)
}

/// One classical Runge-Kutta step of the 5-state model under a held control.
/// `s` is wrapped on closed paths.
pub fn step_rk4<T: Scalar>(
    state: &CurvilinearState<T>,
    control: &Control<T>,
    path: &ReferencePath<T>,
    params: &VehicleParams<T>,
    dt: T,
) -> Result<CurvilinearState<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidInput("dt must be positive".into()));
    }
    let x = rk4(state.to_array5(), dt, |x| {
        let st = state.with_array5(*x);
        dynamics_bn(&st, control, path, params)
    })?;
    let mut next = state.with_array5(x);
    if path.is_closed() {
        next.s = path.wrap(next.s)?;
    }
    Ok(next)
}

/// One Runge-Kutta step of the 7-state model.
pub fn step_rk4_mpc<T: Scalar>(
    state: &CurvilinearState<T>,
    control: &MpcControl<T>,
    path: &ReferencePath<T>,
    params: &VehicleParams<T>,
    dt: T,
) -> Result<CurvilinearState<T>> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidInput("dt must be positive".into()));
    }
    let x = rk4(state.to_array7(), dt, |x| {
        let st = CurvilinearState::from_array7(*x);
        dynamics_mpc(&st, control.jerk, control.steer_acc, path, params)
    })?;
    let mut next = CurvilinearState::from_array7(x);
    if path.is_closed() {
        next.s = path.wrap(next.s)?;
    }
    Ok(next)
}
