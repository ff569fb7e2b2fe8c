//! High-order control barrier functions for the 5-state model.
//!
//! Each barrier `b(x) >= 0` has relative degree two with respect to the
//! controls `(a, omega)`. With penalty multipliers `p1, p2` (held constant over
//! a control step) the sequence is
//!
//! ```text
//! psi0 = b
//! psi1 = Lf b + p1 * alpha1(b)
//! psi2 = Lf² b + LgLf b · u + p1 * alpha1'(b) * Lf b + p2 * alpha2(psi1)  >= 0
//! ```
//!
//! and `psi2 >= 0` is emitted as a linear constraint on `u`.

use serde::{Deserialize, Serialize};

use crate::dynamics::{
    curvature_at, dynamics_bn, kinematics, slip_derivative, Control, CurvilinearState, Kinematics,
    ReferencePath, VehicleParams,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Class-K function. The power kind is extended oddly to negative arguments
/// so it stays strictly increasing on the whole real line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassK<T> {
    Linear { gain: T },
    Power { gain: T, power: T },
}

impl<T: Scalar> Default for ClassK<T> {
    fn default() -> Self {
        ClassK::Linear { gain: T::one() }
    }
}

impl<T: Scalar> ClassK<T> {
    pub fn linear(gain: T) -> Self {
        ClassK::Linear { gain }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ClassK::Linear { gain } => gain > T::zero(),
            ClassK::Power { gain, power } => gain > T::zero() && power > T::zero(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("class-K parameters must be positive: {self:?}")))
        }
    }

    pub fn eval(&self, x: T) -> T {
        match *self {
            ClassK::Linear { gain } => gain * x,
            ClassK::Power { gain, power } => {
                if x == T::zero() {
                    T::zero()
                } else {
                    gain * x.signum() * x.abs().powf(power)
                }
            }
        }
    }

    pub fn derivative(&self, x: T) -> T {
        match *self {
            ClassK::Linear { gain } => gain,
            ClassK::Power { gain, power } => gain * power * x.abs().powf(power - T::one()),
        }
    }

    fn cast<U: Scalar>(&self) -> ClassK<U> {
        match *self {
            ClassK::Linear { gain } => ClassK::Linear { gain: U::lit(gain.value()) },
            ClassK::Power { gain, power } => {
                ClassK::Power { gain: U::lit(gain.value()), power: U::lit(power.value()) }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierKind {
    /// `b = d_lf - d`
    LaneLeft,
    /// `b = d_lf + d`
    LaneRight,
    /// `b = (s_obs - s)² + (d - d_obs)² - r_D²`
    ObstacleDisk,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec<T> {
    pub kind: BarrierKind,
    /// lateral bound (lane kinds)
    pub d_lf: T,
    /// obstacle progress (obstacle kind)
    pub s_obs: T,
    /// obstacle (disk centre) lateral offset
    pub d_obs: T,
    /// disk radius
    pub r_d: T,
    pub alpha1: ClassK<T>,
    pub alpha2: ClassK<T>,
}

impl<T: Scalar> BarrierSpec<T> {
    pub fn lane_left(d_lf: T) -> Self {
        Self::lane(BarrierKind::LaneLeft, d_lf)
    }

    pub fn lane_right(d_lf: T) -> Self {
        Self::lane(BarrierKind::LaneRight, d_lf)
    }

    fn lane(kind: BarrierKind, d_lf: T) -> Self {
        Self {
            kind,
            d_lf,
            s_obs: T::zero(),
            d_obs: T::zero(),
            r_d: T::zero(),
            alpha1: ClassK::default(),
            alpha2: ClassK::default(),
        }
    }

    pub fn obstacle(s_obs: T, d_obs: T, r_d: T) -> Self {
        Self {
            kind: BarrierKind::ObstacleDisk,
            d_lf: T::zero(),
            s_obs,
            d_obs,
            r_d,
            alpha1: ClassK::default(),
            alpha2: ClassK::default(),
        }
    }

    /// Relative degree of every supported barrier with respect to `(a, omega)`.
    pub fn rel_degree(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha1.validate()?;
        self.alpha2.validate()?;
        match self.kind {
            BarrierKind::LaneLeft | BarrierKind::LaneRight if !(self.d_lf > T::zero()) => {
                Err(Error::InvalidInput("lane barrier needs d_lf > 0".into()))
            }
            BarrierKind::ObstacleDisk if !(self.r_d > T::zero()) => {
                Err(Error::InvalidInput("obstacle barrier needs r_D > 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> BarrierSpec<U> {
        let c = |x: T| U::lit(x.value());
        BarrierSpec {
            kind: self.kind,
            d_lf: c(self.d_lf),
            s_obs: c(self.s_obs),
            d_obs: c(self.d_obs),
            r_d: c(self.r_d),
            alpha1: self.alpha1.cast(),
            alpha2: self.alpha2.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Penalties<T> {
    pub p1: T,
    pub p2: T,
}

impl<T: Scalar> Penalties<T> {
    pub fn new(p1: T, p2: T) -> Result<Self> {
        if p1 > T::zero() && p2 > T::zero() {
            Ok(Self { p1, p2 })
        } else {
            Err(Error::InvalidInput("penalties must be positive".into()))
        }
    }

    pub fn unit() -> Self {
        Self { p1: T::one(), p2: T::one() }
    }
}

/// `coeff · u + constant >= 0`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearControlConstraint<T, const Q: usize = 2> {
    #[serde(with = "serde_arrays")]
    pub coeff: [T; Q],
    pub constant: T,
}

mod serde_arrays {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, T: Serialize, const Q: usize>(a: &[T; Q], s: S) -> Result<S::Ok, S::Error> {
        a.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: Deserialize<'de>, const Q: usize>(
        d: D,
    ) -> Result<[T; Q], D::Error> {
        let v = Vec::<T>::deserialize(d)?;
        v.try_into().map_err(|_| serde::de::Error::custom("wrong control dimension"))
    }
}

impl<T: Scalar, const Q: usize> LinearControlConstraint<T, Q> {
    pub fn slack(&self, u: &[T; Q]) -> T {
        self.coeff.iter().zip(u).fold(self.constant, |acc, (c, x)| acc + *c * *x)
    }

    pub fn is_finite(&self) -> bool {
        self.constant.is_finite() && self.coeff.iter().all(|c| c.is_finite())
    }
}

/// Lie derivatives of a relative-degree-two barrier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LieDerivatives<T> {
    pub lf_b: T,
    pub lf2_b: T,
    /// `LgLf b`, columns `(a, omega)`
    pub lglf_b: [T; 2],
}

/// Barrier value; positive means safe. `Δs = s_obs - s`.
pub fn barrier_value<T: Scalar>(spec: &BarrierSpec<T>, state: &CurvilinearState<T>) -> T {
    match spec.kind {
        BarrierKind::LaneLeft => spec.d_lf - state.d,
        BarrierKind::LaneRight => spec.d_lf + state.d,
        BarrierKind::ObstacleDisk => {
            let ds = spec.s_obs - state.s;
            let e = state.d - spec.d_obs;
            ds * ds + e * e - spec.r_d * spec.r_d
        }
    }
}

/// Closed-form Lie derivatives along the 5-state model.
///
/// With `c = cos(mu+beta)`, `sn = sin(mu+beta)`, `m = 1 - d kappa` and `kappa`
/// locally constant:
///
/// ```text
/// s' = v c / m            d' = v sn          mu' = v/l_r sin(beta) - kappa s'
/// d'' = a sn + v c (mu' + beta'(delta) omega)
/// s'' = a c / m - v sn (mu' + beta' omega) / m + v c kappa d' / m²
/// ```
///
/// Lane barriers are linear in `d`, so `b'' = ∓ d''`. For the disk,
/// `b'' = 2 s'² - 2 Δs s'' + 2 d'² + 2 (d - d_obs) d''`.
/// The drift parts (a = omega = 0) give `Lf² b`; the `a` and `omega`
/// coefficients give `LgLf b`.
pub fn lie_derivatives<T: Scalar>(
    spec: &BarrierSpec<T>,
    state: &CurvilinearState<T>,
    path: &ReferencePath<T>,
    params: &VehicleParams<T>,
) -> Result<LieDerivatives<T>> {
    let kappa = curvature_at(path, state.s)?;
    let k = kinematics(state.s, state.d, state.mu, state.v, state.delta, kappa, params)?;
    Ok(lie_from_kinematics(spec, state, &k, params))
}

/// [`lie_derivatives`] with the local curvature given directly instead of a path.
pub fn lie_derivatives_at<T: Scalar>(
    spec: &BarrierSpec<T>,
    state: &CurvilinearState<T>,
    kappa: T,
    params: &VehicleParams<T>,
) -> Result<LieDerivatives<T>> {
    let k = kinematics(state.s, state.d, state.mu, state.v, state.delta, kappa, params)?;
    Ok(lie_from_kinematics(spec, state, &k, params))
}

pub(crate) fn lie_from_kinematics<T: Scalar>(
    spec: &BarrierSpec<T>,
    state: &CurvilinearState<T>,
    k: &Kinematics<T>,
    params: &VehicleParams<T>,
) -> LieDerivatives<T> {
    let v = state.v;
    let db = slip_derivative(state.delta, params.rear_ratio());
    // drift part of d'' and its (a, omega) coefficients
    let d_dd = v * k.cos_h * k.mu_dot;
    let d_dd_u = [k.sin_h, v * k.cos_h * db];
    match spec.kind {
        BarrierKind::LaneLeft => LieDerivatives {
            lf_b: -k.d_dot,
            lf2_b: -d_dd,
            lglf_b: [-d_dd_u[0], -d_dd_u[1]],
        },
        BarrierKind::LaneRight => LieDerivatives { lf_b: k.d_dot, lf2_b: d_dd, lglf_b: d_dd_u },
        BarrierKind::ObstacleDisk => {
            let two = T::lit(2.0);
            let ds = spec.s_obs - state.s;
            let e = state.d - spec.d_obs;
            let m = k.proj;
            let s_dd = -v * k.sin_h * k.mu_dot / m + v * k.cos_h * k.kappa * k.d_dot / (m * m);
            let s_dd_u = [k.cos_h / m, -v * k.sin_h * db / m];
            let lf_b = -two * ds * k.s_dot + two * e * k.d_dot;
            let lf2_b = two * k.s_dot * k.s_dot + two * k.d_dot * k.d_dot - two * ds * s_dd + two * e * d_dd;
            let lglf_b = [
                -two * ds * s_dd_u[0] + two * e * d_dd_u[0],
                -two * ds * s_dd_u[1] + two * e * d_dd_u[1],
            ];
            LieDerivatives { lf_b, lf2_b, lglf_b }
        }
    }
}

/// Finite-difference oracle for [`lie_derivatives`], independent of the
/// closed-form expressions: it integrates the model forward and backward in
/// time by `step` (with and without unit controls) and differentiates the
/// barrier along those flows with Richardson-extrapolated central
/// differences. `b'' = Lf² b + LgLf b · u` exactly under a held control, so
/// the unit-control second derivatives minus the drift one give `LgLf b`.
///
/// `step` is a flow time; around `1e-2` balances truncation and round-off.
pub fn numeric_lie_oracle(
    spec: &BarrierSpec<f64>,
    state: &CurvilinearState<f64>,
    path: &ReferencePath<f64>,
    params: &VehicleParams<f64>,
    step: f64,
) -> Result<LieDerivatives<f64>> {
    let b_at = |u: Control<f64>, t: f64| -> Result<f64> {
        Ok(barrier_value(spec, &flow(state, &u, path, params, t)?))
    };
    let derivs = |u: Control<f64>| -> Result<(f64, f64)> {
        let b0 = barrier_value(spec, state);
        let d = |h: f64| -> Result<(f64, f64)> {
            let (bp, bm) = (b_at(u, h)?, b_at(u, -h)?);
            Ok(((bp - bm) / (2.0 * h), (bp - 2.0 * b0 + bm) / (h * h)))
        };
        // two rounds of Richardson extrapolation on h, h/2, h/4
        let (a1, a2) = d(step)?;
        let (b1, b2) = d(step / 2.0)?;
        let (c1, c2) = d(step / 4.0)?;
        let r = |x: f64, y: f64, z: f64| {
            let (xy, yz) = ((4.0 * y - x) / 3.0, (4.0 * z - y) / 3.0);
            (16.0 * yz - xy) / 15.0
        };
        Ok((r(a1, b1, c1), r(a2, b2, c2)))
    };
    let (lf_b, lf2_b) = derivs(Control::new(0.0, 0.0))?;
    let (_, b_dd_a) = derivs(Control::new(1.0, 0.0))?;
    let (_, b_dd_w) = derivs(Control::new(0.0, 1.0))?;
    Ok(LieDerivatives { lf_b, lf2_b, lglf_b: [b_dd_a - lf2_b, b_dd_w - lf2_b] })
}

/// Integrates the 5-state model for time `t` (either sign) without wrapping.
fn flow(
    state: &CurvilinearState<f64>,
    u: &Control<f64>,
    path: &ReferencePath<f64>,
    params: &VehicleParams<f64>,
    t: f64,
) -> Result<CurvilinearState<f64>> {
    const SUBSTEPS: usize = 16;
    let h = t / SUBSTEPS as f64;
    let mut x = state.to_array5();
    let f = |x: &[f64; 5]| dynamics_bn(&state.with_array5(*x), u, path, params);
    let add = |a: &[f64; 5], s: f64, k: &[f64; 5]| std::array::from_fn::<f64, 5, _>(|i| a[i] + s * k[i]);
    for _ in 0..SUBSTEPS {
        let k1 = f(&x)?;
        let k2 = f(&add(&x, h / 2.0, &k1))?;
        let k3 = f(&add(&x, h / 2.0, &k2))?;
        let k4 = f(&add(&x, h, &k3))?;
        x = std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
    Ok(state.with_array5(x))
}

/// `psi1 = Lf b + p1 alpha1(b)`
pub fn psi1<T: Scalar>(
    spec: &BarrierSpec<T>,
    state: &CurvilinearState<T>,
    penalties: &Penalties<T>,
    path: &ReferencePath<T>,
    params: &VehicleParams<T>,
) -> Result<T> {
    let lie = lie_derivatives(spec, state, path, params)?;
    Ok(lie.lf_b + penalties.p1 * spec.alpha1.eval(barrier_value(spec, state)))
}

/// Everything the QP layer needs from one barrier at one state, including
/// the sensitivities of the constraint constant to the penalties.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HocbfTerms<T> {
    pub b: T,
    pub lie: LieDerivatives<T>,
    pub psi1: T,
    pub constraint: LinearControlConstraint<T>,
    /// ∂constant/∂p1
    pub dconst_dp1: T,
    /// ∂constant/∂p2
    pub dconst_dp2: T,
}

pub fn hocbf_terms<T: Scalar>(
    spec: &BarrierSpec<T>,
    state: &CurvilinearState<T>,
    penalties: &Penalties<T>,
    path: &ReferencePath<T>,
    params: &VehicleParams<T>,
) -> Result<HocbfTerms<T>> {
    let lie = lie_derivatives(spec, state, path, params)?;
    Ok(terms_from_lie(spec, state, penalties, lie))
}

/// [`hocbf_terms`] with the local curvature given directly instead of a path.
pub fn hocbf_terms_at<T: Scalar>(
    spec: &BarrierSpec<T>,
    state: &CurvilinearState<T>,
    kappa: T,
    penalties: &Penalties<T>,
    params: &VehicleParams<T>,
) -> Result<HocbfTerms<T>> {
    let lie = lie_derivatives_at(spec, state, kappa, params)?;
    Ok(terms_from_lie(spec, state, penalties, lie))
}

pub(crate) fn terms_from_lie<T: Scalar>(
    spec: &BarrierSpec<T>,
    state: &CurvilinearState<T>,
    penalties: &Penalties<T>,
    lie: LieDerivatives<T>,
) -> HocbfTerms<T> {
    let b = barrier_value(spec, state);
    let a1 = spec.alpha1.eval(b);
    let a1p = spec.alpha1.derivative(b);
    let psi1 = lie.lf_b + penalties.p1 * a1;
    let a2 = spec.alpha2.eval(psi1);
    let a2p = spec.alpha2.derivative(psi1);
    // d/dt [p1 alpha1(b)] = p1 alpha1'(b) Lf b  (p1 held constant over the step)
    let constant = lie.lf2_b + penalties.p1 * a1p * lie.lf_b + penalties.p2 * a2;
    HocbfTerms {
        b,
        lie,
        psi1,
        constraint: LinearControlConstraint { coeff: lie.lglf_b, constant },
        dconst_dp1: a1p * lie.lf_b + penalties.p2 * a2p * a1,
        dconst_dp2: a2,
    }
}

/// Linear control constraint `LgLf b · u + Lf² b + p1 alpha1'(b) Lf b + p2 alpha2(psi1) >= 0`.
pub fn hocbf_constraint<T: Scalar>(
    spec: &BarrierSpec<T>,
    state: &CurvilinearState<T>,
    penalties: &Penalties<T>,
    path: &ReferencePath<T>,
    params: &VehicleParams<T>,
) -> Result<LinearControlConstraint<T>> {
    Ok(hocbf_terms(spec, state, penalties, path, params)?.constraint)
}

/// Relative-degree-one constraint `Lf b + Lg b · u + alpha(b) >= 0`.
pub fn cbf_constraint_m1<T: Scalar, const Q: usize>(
    b: T,
    lf_b: T,
    lg_b: [T; Q],
    alpha: &ClassK<T>,
) -> LinearControlConstraint<T, Q> {
    LinearControlConstraint { coeff: lg_b, constant: lf_b + alpha.eval(b) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{step_rk4, Segment};
    use crate::scalar::Dual;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> VehicleParams<f64> {
        VehicleParams::default()
    }

    fn curved(k: f64) -> ReferencePath<f64> {
        ReferencePath::new(vec![Segment { length: 1000.0, curvature: k }], 2.5, false).unwrap()
    }

    #[test]
    fn barrier_values() {
        let st = CurvilinearState::new(10.0f64, 0.5, 0.0, 5.0, 0.0);
        assert!((barrier_value(&BarrierSpec::lane_left(1.8), &st) - 1.3).abs() < 1e-15);
        assert!((barrier_value(&BarrierSpec::lane_right(1.8), &st) - 2.3).abs() < 1e-15);
        let centre = BarrierSpec::obstacle(10.0, 0.5, 2.0);
        assert_eq!(barrier_value(&centre, &st), -4.0);
        let ahead = BarrierSpec::obstacle(13.0, 0.5, 2.0);
        assert_eq!(barrier_value(&ahead, &st), 5.0);
    }

    #[test]
    fn lane_left_closed_form_examples() {
        let path = curved(0.0);
        let st = CurvilinearState::new(10.0, 0.5, 0.0, 10.0, 0.0);
        let lie = lie_derivatives(&BarrierSpec::lane_left(1.8), &st, &path, &params()).unwrap();
        assert_eq!(lie.lf_b, 0.0);
        assert!((lie.lglf_b[1] + 5.0).abs() < 1e-12);
        assert_eq!(lie.lglf_b[0], 0.0);

        let st = CurvilinearState::new(10.0, 0.5, 0.1, 8.0, 0.0);
        let lie = lie_derivatives(&BarrierSpec::lane_left(1.8), &st, &path, &params()).unwrap();
        assert!((lie.lf_b + 0.79867).abs() < 1e-5);
        let num = numeric_lie_oracle(&BarrierSpec::lane_left(1.8), &st, &path, &params(), 1e-2).unwrap();
        assert!((num.lf_b + 8.0 * 0.1f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn oracle_is_zero_for_stationary_state() {
        let path = curved(0.0);
        let st = CurvilinearState::new(10.0, 0.0, 0.0, 0.0, 0.0);
        let far = BarrierSpec::obstacle(500.0, 1.0, 3.0);
        let lie = numeric_lie_oracle(&far, &st, &path, &params(), 1e-2).unwrap();
        assert!(lie.lf_b.abs() < 1e-9 && lie.lf2_b.abs() < 1e-6);
        // at v = 0 only the acceleration enters b''
        assert!(lie.lglf_b[1].abs() < 1e-6);
    }

    #[test]
    fn hocbf_constraint_example() {
        let path = curved(0.0);
        let st = CurvilinearState::new(10.0, 0.5, 0.0, 10.0, 0.0);
        let c = hocbf_constraint(&BarrierSpec::lane_left(1.8), &st, &Penalties::unit(), &path, &params()).unwrap();
        assert_eq!(c.coeff[0], 0.0);
        assert!((c.coeff[1] + 5.0).abs() < 1e-12);
        assert!((c.constant - 1.3).abs() < 1e-12);
        // omega <= 0.26
        assert!(c.slack(&[0.0, 0.26]).abs() < 1e-12);
        assert!(c.slack(&[0.0, 0.27]) < 0.0);
    }

    #[test]
    fn psi1_examples() {
        let path = curved(0.0);
        let st = CurvilinearState::new(10.0, 0.5, 0.0, 10.0, 0.0);
        let p = Penalties::unit();
        assert!((psi1(&BarrierSpec::lane_left(1.8), &st, &p, &path, &params()).unwrap() - 1.3).abs() < 1e-12);
        // b = 0 and db/dt = 0
        let on_edge = CurvilinearState::new(10.0, 1.8, 0.0, 10.0, 0.0);
        assert_eq!(psi1(&BarrierSpec::lane_left(1.8), &on_edge, &p, &path, &params()).unwrap(), 0.0);
    }

    #[test]
    fn vacuous_at_rest_deep_inside() {
        let path = curved(0.0);
        let st = CurvilinearState::new(10.0, 0.0, 0.0, 0.0, 0.0);
        let p = Penalties::new(2.0, 3.0).unwrap();
        let spec = BarrierSpec::lane_left(1.8);
        let c = hocbf_constraint(&spec, &st, &p, &path, &params()).unwrap();
        // b'' still sees acceleration through sin(mu+beta) = 0, so both vanish
        assert_eq!(c.coeff, [0.0, 0.0]);
        assert!((c.constant - 3.0 * 2.0 * 1.8).abs() < 1e-12);
    }

    fn random_state(rng: &mut ChaCha8Rng) -> CurvilinearState<f64> {
        CurvilinearState::new(
            rng.random_range(100.0..900.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-0.6..0.6),
            rng.random_range(0.0..15.0),
            rng.random_range(-0.5..0.5),
        )
    }

    fn random_spec(rng: &mut ChaCha8Rng, st: &CurvilinearState<f64>, kind: usize) -> BarrierSpec<f64> {
        match kind {
            0 => BarrierSpec::lane_left(rng.random_range(1.0..2.5)),
            1 => BarrierSpec::lane_right(rng.random_range(1.0..2.5)),
            _ => BarrierSpec::obstacle(
                st.s + rng.random_range(-20.0..30.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.5..6.0),
            ),
        }
    }

    #[test]
    fn closed_form_matches_oracle_on_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = params();
        for i in 0..300 {
            let path = curved([0.0, 0.03, -0.05][i % 3]);
            let st = random_state(&mut rng);
            for kind in 0..3 {
                let spec = random_spec(&mut rng, &st, kind);
                let cf = lie_derivatives(&spec, &st, &path, &p).unwrap();
                let num = numeric_lie_oracle(&spec, &st, &path, &p, 1e-2).unwrap();
                let close = |a: f64, b: f64| (a - b).abs() < 1e-5;
                assert!(close(cf.lf_b, num.lf_b), "{kind} lf {cf:?} {num:?}");
                assert!(close(cf.lf2_b, num.lf2_b), "{kind} lf2 {cf:?} {num:?}");
                assert!(close(cf.lglf_b[0], num.lglf_b[0]) && close(cf.lglf_b[1], num.lglf_b[1]), "{kind} lglf {cf:?} {num:?}");
            }
        }
    }

    #[test]
    fn closed_form_matches_forward_mode_second_derivative() {
        // b'' along the controlled flow computed with nested dual numbers:
        // differentiate x -> b(x) with x' = f(x) + g u twice via the chain rule
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = params();
        let path = curved(0.04);
        for _ in 0..50 {
            let st = random_state(&mut rng);
            let spec = random_spec(&mut rng, &st, 2);
            let u = Control::new(rng.random_range(-2.0..2.0), rng.random_range(-0.5..0.5));
            // gradient of b and of (grad b · xdot) via Dual<5>
            let xdot = |x: [Dual<5>; 5]| {
                let s5 = st.cast::<Dual<5>>().with_array5(x);
                dynamics_bn(&s5, &Control::new(Dual::constant(u.a), Dual::constant(u.omega)), &path.cast(), &p.cast()).unwrap()
            };
            let seed: [Dual<5>; 5] = std::array::from_fn(|i| Dual::variable(st.to_array5()[i], i));
            let bd = barrier_value(&spec.cast::<Dual<5>>(), &st.cast::<Dual<5>>().with_array5(seed));
            let f = xdot(seed);
            let b_dot_re: f64 = (0..5).map(|i| bd.eps[i] * f[i].re).sum();
            // d/dx (grad b · f) = hess b · f + J_f^T grad b; hess b is diagonal for these barriers
            let mut hess_diag = [0.0; 5];
            hess_diag[0] = 2.0;
            hess_diag[1] = 2.0;
            let mut grad_bdot = [0.0; 5];
            for j in 0..5 {
                grad_bdot[j] = hess_diag[j] * f[j].re + (0..5).map(|i| bd.eps[i] * f[i].eps[j]).sum::<f64>();
            }
            let b_ddot: f64 = (0..5).map(|j| grad_bdot[j] * f[j].re).sum();
            let lie = lie_derivatives(&spec, &st, &path, &p).unwrap();
            assert!((lie.lf_b - b_dot_re).abs() < 1e-9 * (1.0 + b_dot_re.abs()));
            let cf = lie.lf2_b + lie.lglf_b[0] * u.a + lie.lglf_b[1] * u.omega;
            assert!((cf - b_ddot).abs() < 1e-9 * (1.0 + b_ddot.abs()), "{cf} vs {b_ddot}");
        }
    }

    #[test]
    fn class_k_properties() {
        let fs = [ClassK::linear(1.0), ClassK::linear(2.5), ClassK::Power { gain: 1.0, power: 3.0 }, ClassK::Power { gain: 0.5, power: 0.5 }];
        for f in fs {
            assert_eq!(f.eval(0.0), 0.0);
            let grid: Vec<f64> = (-100..=100).map(|i| i as f64 * 0.05).collect();
            for w in grid.windows(2) {
                assert!(f.eval(w[0]) < f.eval(w[1]), "{f:?} at {:?}", w);
            }
        }
        assert!(ClassK::linear(-1.0).validate().is_err());
        assert!(ClassK::Power { gain: 1.0, power: 0.0 }.validate().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(BarrierSpec::obstacle(1.0, 0.0, 0.0).validate().is_err());
        assert!(BarrierSpec::lane_left(-1.0).validate().is_err());
        assert!(BarrierSpec::lane_right(1.0).validate().is_ok());
        assert!(Penalties::new(0.0, 1.0).is_err());
        assert_eq!(BarrierSpec::lane_left(1.0).rel_degree(), 2);
    }

    proptest! {
        #[test]
        fn larger_penalties_never_shrink_feasible_set(
            d in -1.5f64..1.5, mu in -0.3f64..0.3, v in 0.0f64..12.0, delta in -0.3f64..0.3,
            p1 in 0.1f64..5.0, p2 in 0.1f64..5.0, scale in 1.0f64..4.0, kind in 0usize..3,
        ) {
            let path = curved(0.02);
            let st = CurvilinearState::new(100.0, d, mu, v, delta);
            let spec = match kind {
                0 => BarrierSpec::lane_left(1.8),
                1 => BarrierSpec::lane_right(1.8),
                _ => BarrierSpec::obstacle(115.0, -1.0, 3.0),
            };
            let base = Penalties::new(p1, p2).unwrap();
            let t0 = hocbf_terms(&spec, &st, &base, &path, &params()).unwrap();
            prop_assume!(t0.b > 0.0 && t0.psi1 > 0.0);
            // raising p2 only loosens the constant
            let t = hocbf_terms(&spec, &st, &Penalties::new(p1, p2 * scale).unwrap(), &path, &params()).unwrap();
            prop_assert!(t.constraint.constant >= t0.constraint.constant - 1e-12);
            prop_assert_eq!(t.constraint.coeff, t0.constraint.coeff);
            // with p1 = p2 = p the constant is Lf² b + 2 p Lf b + p² b, whose slope is 2 p psi1
            let eq = hocbf_terms(&spec, &st, &Penalties::new(p1, p1).unwrap(), &path, &params()).unwrap();
            if eq.psi1 > 0.0 {
                let t = hocbf_terms(&spec, &st, &Penalties::new(p1 * scale, p1 * scale).unwrap(), &path, &params()).unwrap();
                prop_assert!(t.constraint.constant >= eq.constraint.constant - 1e-12);
            }
            // along p1 alone the slope is alpha1'(b) Lf b + p2 alpha2'(psi1) alpha1(b)
            prop_assert!(t0.dconst_dp1 >= 0.0 || t0.lie.lf_b < 0.0);
        }

        #[test]
        fn penalty_sensitivities_match_finite_differences(
            d in -1.5f64..1.5, mu in -0.3f64..0.3, v in 0.5f64..12.0,
            p1 in 0.2f64..3.0, p2 in 0.2f64..3.0,
        ) {
            let path = curved(0.0);
            let st = CurvilinearState::new(100.0, d, mu, v, 0.05);
            let spec = BarrierSpec::obstacle(112.0, 0.5, 2.5);
            let t = hocbf_terms(&spec, &st, &Penalties::new(p1, p2).unwrap(), &path, &params()).unwrap();
            let h = 1e-6;
            let c = |a: f64, b: f64| hocbf_terms(&spec, &st, &Penalties::new(a, b).unwrap(), &path, &params()).unwrap().constraint.constant;
            let fd1 = (c(p1 + h, p2) - c(p1 - h, p2)) / (2.0 * h);
            let fd2 = (c(p1, p2 + h) - c(p1, p2 - h)) / (2.0 * h);
            prop_assert!((fd1 - t.dconst_dp1).abs() <= 1e-5 * (1.0 + fd1.abs()));
            prop_assert!((fd2 - t.dconst_dp2).abs() <= 1e-5 * (1.0 + fd2.abs()));
        }
    }

    #[test]
    fn raising_p1_alone_can_tighten_when_barrier_is_closing() {
        // b = 1, Lf b = -0.5: d constant / d p1 = -0.5 + p2 < 0 for small p2
        let path = curved(0.0);
        let spec = BarrierSpec::lane_right(1.8);
        let st = CurvilinearState::new(100.0, -0.8, -0.5f64.asin(), 1.0, 0.0);
        let c = |p1: f64| hocbf_terms(&spec, &st, &Penalties::new(p1, 0.1).unwrap(), &path, &params()).unwrap();
        let (lo, hi) = (c(4.0), c(5.0));
        assert!(lo.b > 0.0 && lo.psi1 > 0.0);
        assert!((lo.lie.lf_b + 0.5).abs() < 1e-12);
        assert!(hi.constraint.constant < lo.constraint.constant);
    }

    #[test]
    fn m1_constraint_cases() {
        let c = cbf_constraint_m1(0.0, 0.0, [0.7, -0.2], &ClassK::linear(1.0));
        assert_eq!(c.constant, 0.0);
        assert_eq!(c.coeff, [0.7, -0.2]);
        // x' = u, b = x, alpha(x) = x at x = 2  ->  u + 2 >= 0
        let c = cbf_constraint_m1(2.0, 0.0, [1.0], &ClassK::linear(1.0));
        assert_eq!((c.coeff, c.constant), ([1.0], 2.0));
    }

    #[test]
    fn m1_constraint_on_double_integrator_matches_grid_search() {
        // velocity limit on a double integrator: x = (p, v), v' = u, b = v_max - v
        let (v_max, v) = (3.0, 2.4);
        let alpha = ClassK::linear(1.5);
        let b = v_max - v;
        let c = cbf_constraint_m1(b, 0.0, [-1.0], &alpha);
        // minimise (u - u_ref)² subject to the constraint; the closed form is
        // the projection onto the half space
        for u_ref in [-2.0, 0.0, 0.5, 0.9, 2.0] {
            let proj = if c.slack(&[u_ref]) >= 0.0 { u_ref } else { c.constant };
            let grid = (0..=40000)
                .map(|i| -5.0 + i as f64 * 2.5e-4)
                // constraint evaluated directly from the definition b' + alpha(b) >= 0
                .filter(|u| -u + 1.5 * (v_max - v) >= 0.0)
                .min_by(|a, b| (a - u_ref).abs().total_cmp(&(b - u_ref).abs()))
                .unwrap();
            assert!((proj - grid).abs() <= 3e-4, "{u_ref}: {proj} vs {grid}");
        }
    }

    #[test]
    fn forward_invariance_under_projected_control() {
        // single-constraint safety filter via closed-form half-space projection
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params();
        let path = curved(0.0);
        let pen = Penalties::new(1.0, 1.0).unwrap();
        for trial in 0..20 {
            let kind = trial % 3;
            let mut st = CurvilinearState::new(200.0, rng.random_range(-0.5..0.5), 0.0, rng.random_range(4.0..10.0), 0.0);
            let spec = match kind {
                0 => BarrierSpec::lane_left(1.8),
                1 => BarrierSpec::lane_right(1.8),
                _ => BarrierSpec::obstacle(230.0, st.d + rng.random_range(-0.3..0.3), 2.0),
            };
            let t0 = hocbf_terms(&spec, &st, &pen, &path, &p).unwrap();
            assert!(t0.b > 0.0 && t0.psi1 > 0.0);
            let u_ref = match kind {
                0 => [0.0, 0.3],
                1 => [0.0, -0.3],
                _ => [2.0, 0.0],
            };
            let mut min_b = f64::INFINITY;
            for _ in 0..200 {
                let t = hocbf_terms(&spec, &st, &pen, &path, &p).unwrap();
                let c = t.constraint;
                let n2 = c.coeff[0] * c.coeff[0] + c.coeff[1] * c.coeff[1];
                let viol = c.slack(&u_ref);
                let u = if viol >= 0.0 || n2 == 0.0 {
                    u_ref
                } else {
                    [u_ref[0] - viol * c.coeff[0] / n2, u_ref[1] - viol * c.coeff[1] / n2]
                };
                st = step_rk4(&st, &Control::new(u[0], u[1]), &path, &p, 0.1).unwrap();
                st.v = st.v.max(0.0);
                min_b = min_b.min(barrier_value(&spec, &st));
            }
            assert!(min_b >= -1e-3, "trial {trial}: min b {min_b}");
        }
    }
}
