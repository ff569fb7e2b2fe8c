//! Obstacle covering, slot assignment and scenario descriptions.
//!
//! Each rectangular obstacle footprint is grown by the ego half-dimensions
//! plus a margin (so the barrier can act on the ego centre point) and then
//! covered by one disk whose centre is pushed away from the lane centre.
//! A fixed number of slots is filled nearest-first; unused slots get parked
//! disks that ride along off the road next to the ego.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{CurvilinearState, PathFile, ReferencePath};
use crate::error::{Error, Result};
use crate::hocbf::BarrierSpec;
use crate::scalar::Scalar;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Rectangle aligned with the path frame at `(s, d)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Footprint<T> {
    pub s: T,
    pub d: T,
    pub length: T,
    pub width: T,
}

impl<T: Scalar> Footprint<T> {
    pub fn new(s: T, d: T, length: T, width: T) -> Self {
        Self { s, d, length, width }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.length >= T::zero()
            && self.width >= T::zero()
            && [self.s, self.d, self.length, self.width].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid footprint {self:?}")))
        }
    }

    pub fn corners(&self) -> [(T, T); 4] {
        let (hl, hw) = (self.length * T::lit(0.5), self.width * T::lit(0.5));
        [
            (self.s - hl, self.d - hw),
            (self.s - hl, self.d + hw),
            (self.s + hl, self.d - hw),
            (self.s + hl, self.d + hw),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstacleDisk<T> {
    pub s_obs: T,
    pub d_obs: T,
    pub r_d: T,
    pub slot: usize,
    /// off-road placeholder filling an unused slot
    pub parked: bool,
}

impl<T: Scalar> ObstacleDisk<T> {
    pub fn barrier(&self) -> BarrierSpec<T> {
        BarrierSpec::obstacle(self.s_obs, self.d_obs, self.r_d)
    }

    pub fn contains(&self, s: T, d: T) -> bool {
        let (ds, dd) = (s - self.s_obs, d - self.d_obs);
        ds * ds + dd * dd < self.r_d * self.r_d
    }
}

/// How far the disk centre is pushed away from the lane centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffsetRule {
    /// offset = max(ratio · grown half-width, min)
    Fraction { ratio: f64, min: f64 },
    /// choose the offset so the disk reaches exactly `extra` metres past the
    /// grown rectangle's inner edge
    MaxIntrusion { extra: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverConfig {
    pub ego_length: f64,
    pub ego_width: f64,
    /// added to the ego half-dimensions when growing the footprint
    pub margin: f64,
    pub rule: OffsetRule,
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for CoverConfig {
    fn default() -> Self {
        Self {
            ego_length: 4.5,
            ego_width: 1.8,
            margin: 0.3,
            rule: OffsetRule::MaxIntrusion { extra: 0.4 },
            min_radius: 0.5,
            max_radius: 200.0,
        }
    }
}

impl CoverConfig {
    pub fn validate(&self) -> Result<()> {
        let rule_ok = match self.rule {
            OffsetRule::Fraction { ratio, min } => ratio >= 0.0 && min >= 0.0,
            OffsetRule::MaxIntrusion { extra } => extra > 0.0,
        };
        if rule_ok
            && self.ego_length >= 0.0
            && self.ego_width >= 0.0
            && self.margin >= 0.0
            && self.min_radius > 0.0
            && self.max_radius >= self.min_radius
        {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid cover config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlotConfig {
    pub n_slots: usize,
    pub parked_radius: f64,
    /// extra lateral distance between a parked disk and the road edge
    pub parked_gap: f64,
}

impl Default for SlotConfig {
    fn default() -> Self {
        Self { n_slots: 3, parked_radius: 1.0, parked_gap: 0.1 }
    }
}

/// Covers a footprint with one off-centre disk (slot 0, not parked).
///
/// With grown half-dimensions `(A_s, A_d)` and centre offset `e` away from the
/// lane centre, the farthest corners sit at `sqrt(A_s² + (A_d + e)²)`, which is
/// the radius. The inner edge of the disk then reaches `r - e` past the
/// obstacle centre toward the road. A disk may close the road entirely when
/// the obstacle sits near the centre; that is a property of the scenario.
pub fn cover_obstacle<T: Scalar>(
    footprint: &Footprint<T>,
    lane_half_width: T,
    config: &CoverConfig,
) -> Result<ObstacleDisk<T>> {
    footprint.validate()?;
    config.validate()?;
    if footprint.width > T::lit(2.0) * lane_half_width {
        return Err(Error::Uncoverable(format!(
            "footprint width {} exceeds the road width",
            footprint.width.value()
        )));
    }
    let half = T::lit(0.5);
    let a_s = footprint.length * half + T::lit(0.5 * config.ego_length + config.margin);
    let a_d = footprint.width * half + T::lit(0.5 * config.ego_width + config.margin);
    let e = match config.rule {
        OffsetRule::Fraction { ratio, min } => (T::lit(ratio) * a_d).max(T::lit(min)),
        OffsetRule::MaxIntrusion { extra } => {
            let x = T::lit(extra);
            ((a_s * a_s - T::lit(2.0) * a_d * x - x * x) / (T::lit(2.0) * x)).max(T::zero())
        }
    };
    // keeps the grown corners on the boundary and the footprint strictly inside
    let r = ((a_s * a_s + (a_d + e) * (a_d + e)).sqrt() * T::lit(1.0 + 1e-9)).max(T::lit(config.min_radius));
    if r > T::lit(config.max_radius) {
        return Err(Error::Uncoverable(format!("cover radius {} exceeds {}", r.value(), config.max_radius)));
    }
    let side = if footprint.d < T::zero() { -T::one() } else { T::one() };
    let d_obs = footprint.d + side * e;
    Ok(ObstacleDisk { s_obs: footprint.s, d_obs, r_d: r, slot: 0, parked: false })
}

/// Covers and sorts obstacles into exactly `slots.n_slots` disks. Obstacle
/// progress is re-expressed relative to the ego (closed paths wrap), so
/// `s_obs - ego.s` is the signed gap.
pub fn sort_and_slot<T: Scalar>(
    ego: &CurvilinearState<T>,
    obstacles: &[Footprint<T>],
    path: &ReferencePath<T>,
    cover: &CoverConfig,
    slots: &SlotConfig,
) -> Result<Vec<ObstacleDisk<T>>> {
    let n = slots.n_slots;
    if obstacles.len() > n {
        return Err(Error::TooManyObstacles { count: obstacles.len(), slots: n });
    }
    let lhw = path.lane_half_width();
    let mut keyed = Vec::with_capacity(obstacles.len());
    for (idx, fp) in obstacles.iter().enumerate() {
        let gap = path.signed_gap(ego.s, fp.s);
        let local = Footprint { s: ego.s + gap, ..*fp };
        let disk = cover_obstacle(&local, lhw, cover)?;
        let dd = fp.d - ego.d;
        keyed.push(((gap * gap + dd * dd).sqrt(), fp.d.abs(), idx, disk));
    }
    keyed.sort_by(|a, b| a.0.total_cmp_t(&b.0).then(a.1.total_cmp_t(&b.1)).then(a.2.cmp(&b.2)));
    let mut out: Vec<ObstacleDisk<T>> = keyed
        .into_iter()
        .enumerate()
        .map(|(slot, (_, _, _, disk))| ObstacleDisk { slot, ..disk })
        .collect();
    let r = T::lit(slots.parked_radius);
    let off = lhw + r + T::lit(slots.parked_gap);
    for slot in out.len()..n {
        let side = if slot % 2 == 0 { T::one() } else { -T::one() };
        out.push(ObstacleDisk { s_obs: ego.s, d_obs: side * off, r_d: r, slot, parked: true });
    }
    Ok(out)
}

trait TotalCmp {
    fn total_cmp_t(&self, other: &Self) -> std::cmp::Ordering;
}

impl<T: Scalar> TotalCmp for T {
    fn total_cmp_t(&self, other: &Self) -> std::cmp::Ordering {
        self.value().total_cmp(&other.value())
    }
}

/// Path description inside a scenario file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PathSpec {
    Straight { length: f64, lane_half_width: f64 },
    Oval { straight: f64, radius: f64, lane_half_width: f64 },
    Segments(PathFile),
    /// path file relative to the scenario file
    File { file: String },
}

impl PathSpec {
    pub fn build(&self, base: Option<&Path>) -> Result<ReferencePath<f64>> {
        match self {
            PathSpec::Straight { length, lane_half_width } => ReferencePath::straight(*length, *lane_half_width),
            PathSpec::Oval { straight, radius, lane_half_width } => {
                ReferencePath::oval(*straight, *radius, *lane_half_width)
            }
            PathSpec::Segments(pf) => ReferencePath::from_file(pf),
            PathSpec::File { file } => {
                let p = base.map_or_else(|| Path::new(file).to_path_buf(), |b| b.join(file));
                ReferencePath::load(&p)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoInit {
    pub s: f64,
    pub d: f64,
    pub mu: f64,
    pub v: f64,
    #[serde(default)]
    pub delta: f64,
}

impl EgoInit {
    pub fn state(&self) -> CurvilinearState<f64> {
        CurvilinearState::new(self.s, self.d, self.mu, self.v, self.delta)
    }
}

/// On-disk scenario (TOML or JSON by extension).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub path: PathSpec,
    pub ego: EgoInit,
    #[serde(default)]
    pub obstacles: Vec<Footprint<f64>>,
    #[serde(default = "default_slots")]
    pub slots: usize,
}

fn default_slots() -> usize {
    SlotConfig::default().n_slots
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub path: ReferencePath<f64>,
    pub ego_init: CurvilinearState<f64>,
    pub obstacles: Vec<Footprint<f64>>,
    pub n_slots: usize,
}

impl Scenario {
    pub fn new(
        path: ReferencePath<f64>,
        ego_init: CurvilinearState<f64>,
        obstacles: Vec<Footprint<f64>>,
        n_slots: usize,
    ) -> Result<Self> {
        let sc = Self { path, ego_init, obstacles, n_slots };
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.obstacles.len() > self.n_slots {
            return Err(Error::TooManyObstacles { count: self.obstacles.len(), slots: self.n_slots });
        }
        for fp in &self.obstacles {
            fp.validate()?;
            let lhw = self.path.lane_half_width();
            if fp.d.abs() - 0.5 * fp.width > lhw + 1.0 {
                return Err(Error::InvalidInput(format!("obstacle at d={} is far off the road", fp.d)));
            }
            if !self.path.is_closed() && !(0.0..=self.path.length()).contains(&fp.s) {
                return Err(Error::OutOfRange { s: fp.s, length: self.path.length() });
            }
        }
        let e = &self.ego_init;
        if ![e.s, e.d, e.mu, e.v, e.delta].iter().all(|v| v.is_finite()) || e.v < 0.0 {
            return Err(Error::InvalidInput("invalid ego state".into()));
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ScenarioFile = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        Self::from_scenario_file(&file, path.parent())
    }

    pub fn from_scenario_file(file: &ScenarioFile, base: Option<&Path>) -> Result<Self> {
        if file.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported scenario schema_version {}", file.schema_version)));
        }
        Self::new(file.path.build(base)?, file.ego.state(), file.obstacles.clone(), file.slots)
    }

    pub fn to_scenario_file(&self) -> ScenarioFile {
        let e = &self.ego_init;
        ScenarioFile {
            schema_version: SCENARIO_SCHEMA_VERSION,
            path: PathSpec::Segments(self.path.to_file()),
            ego: EgoInit { s: e.s, d: e.d, mu: e.mu, v: e.v, delta: e.delta },
            obstacles: self.obstacles.clone(),
            slots: self.n_slots,
        }
    }
}

/// Closed interval sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.min.is_finite() && self.max.is_finite() && self.min <= self.max {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid range for {what}: {self:?}")))
        }
    }
}

/// Random scenario generator used for data generation and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioDistribution {
    pub path: PathSpec,
    pub ego_s: Range,
    pub ego_d: Range,
    pub ego_mu: Range,
    pub ego_v: Range,
    /// probability that any obstacle is placed at all
    pub obstacle_presence: f64,
    pub obstacle_count: [usize; 2],
    /// distance ahead of the ego to the first obstacle
    pub first_gap: Range,
    /// spacing between consecutive obstacles
    pub spacing: Range,
    /// absolute lateral offset; the side is random
    pub obstacle_abs_d: Range,
    pub obstacle_length: Range,
    pub obstacle_width: Range,
    pub slots: usize,
    /// initial steering matches the path curvature for this wheelbase;
    /// zero starts with straight wheels
    pub feedforward_wheelbase: f64,
}

impl Default for ScenarioDistribution {
    fn default() -> Self {
        Self::obstacle_avoidance()
    }
}

impl ScenarioDistribution {
    /// Straight road with one or two parked cars partly blocking a side.
    pub fn obstacle_avoidance() -> Self {
        Self {
            path: PathSpec::Straight { length: 400.0, lane_half_width: 2.0 },
            ego_s: Range::new(5.0, 15.0),
            ego_d: Range::new(-0.5, 0.5),
            ego_mu: Range::new(-0.05, 0.05),
            ego_v: Range::new(6.0, 10.0),
            obstacle_presence: 1.0,
            obstacle_count: [1, 2],
            first_gap: Range::new(35.0, 55.0),
            spacing: Range::new(50.0, 70.0),
            obstacle_abs_d: Range::new(1.4, 2.2),
            obstacle_length: Range::new(4.5, 4.5),
            obstacle_width: Range::new(1.8, 1.8),
            slots: SlotConfig::default().n_slots,
            feedforward_wheelbase: 2.79,
        }
    }

    /// Closed oval track without obstacles.
    pub fn lane_keeping() -> Self {
        Self {
            path: PathSpec::Oval { straight: 100.0, radius: 30.0, lane_half_width: 2.0 },
            ego_s: Range::new(0.0, 388.0),
            ego_d: Range::new(-1.0, 1.0),
            ego_mu: Range::new(-0.15, 0.15),
            ego_v: Range::new(6.0, 10.0),
            obstacle_presence: 0.0,
            obstacle_count: [0, 0],
            ..Self::obstacle_avoidance()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (r, what) in [
            (&self.ego_s, "ego_s"),
            (&self.ego_d, "ego_d"),
            (&self.ego_mu, "ego_mu"),
            (&self.ego_v, "ego_v"),
            (&self.first_gap, "first_gap"),
            (&self.spacing, "spacing"),
            (&self.obstacle_abs_d, "obstacle_abs_d"),
            (&self.obstacle_length, "obstacle_length"),
            (&self.obstacle_width, "obstacle_width"),
        ] {
            r.validate(what)?;
        }
        if !(0.0..=1.0).contains(&self.obstacle_presence) {
            return Err(Error::InvalidInput("obstacle_presence must lie in [0, 1]".into()));
        }
        if self.obstacle_count[0] > self.obstacle_count[1] || self.obstacle_count[1] > self.slots {
            return Err(Error::InvalidInput("obstacle_count must satisfy min <= max <= slots".into()));
        }
        if !(self.feedforward_wheelbase >= 0.0) {
            return Err(Error::InvalidInput("feedforward_wheelbase must be non-negative".into()));
        }
        if self.ego_v.min < 0.0 {
            return Err(Error::InvalidInput("ego speed must be non-negative".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, path: &ReferencePath<f64>, rng: &mut R) -> Result<Scenario> {
        let mut ego = CurvilinearState::new(
            path.wrap(self.ego_s.sample(rng)).unwrap_or(self.ego_s.min),
            self.ego_d.sample(rng),
            self.ego_mu.sample(rng),
            self.ego_v.sample(rng),
            0.0,
        );
        if self.feedforward_wheelbase > 0.0 {
            ego.delta = (self.feedforward_wheelbase * crate::dynamics::curvature_at(path, ego.s)?).atan();
        }
        let mut obstacles = Vec::new();
        // draw every variate regardless of presence so RNG consumption is fixed
        let present = rng.random::<f64>() < self.obstacle_presence;
        let count = rng.random_range(self.obstacle_count[0]..=self.obstacle_count[1]);
        let mut s = ego.s + self.first_gap.sample(rng);
        for i in 0..self.obstacle_count[1] {
            let abs_d = self.obstacle_abs_d.sample(rng);
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let fp = Footprint::new(s, side * abs_d, self.obstacle_length.sample(rng), self.obstacle_width.sample(rng));
            let gap = self.spacing.sample(rng);
            if present && i < count {
                let s_ok = path.is_closed() || fp.s <= path.length();
                if s_ok {
                    obstacles.push(Footprint { s: path.wrap(fp.s).unwrap_or(fp.s), ..fp });
                }
            }
            s += gap;
        }
        Scenario::new(path.clone(), ego, obstacles, self.slots)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::VehicleParams;
    use crate::hocbf::{hocbf_constraint, Penalties};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn road() -> ReferencePath<f64> {
        ReferencePath::straight(400.0, 2.0).unwrap()
    }

    #[test]
    fn covers_offset_footprint_away_from_centre() {
        let fp = Footprint::new(50.0f64, 0.5, 4.5, 1.8);
        let disk = cover_obstacle(&fp, 2.0, &CoverConfig::default()).unwrap();
        assert!(disk.d_obs > 0.5);
        for (s, d) in fp.corners() {
            assert!(disk.contains(s, d));
        }
        // grown corners (ego centre positions touching the obstacle) are covered too
        let grown = Footprint::new(50.0, 0.5, 4.5 + 4.5 + 0.6, 1.8 + 1.8 + 0.6);
        for (s, d) in grown.corners() {
            let (ds, dd) = (s - disk.s_obs, d - disk.d_obs);
            assert!(ds * ds + dd * dd <= disk.r_d * disk.r_d);
        }
        // inner edge stops `extra` past the grown rectangle
        assert!(((disk.r_d - (disk.d_obs - 0.5)) - (0.9 + 1.2 + 0.4)).abs() < 1e-6);
    }

    #[test]
    fn point_obstacle_uses_configured_offset() {
        let cfg = CoverConfig {
            ego_length: 0.0,
            ego_width: 0.0,
            margin: 0.0,
            rule: OffsetRule::Fraction { ratio: 0.5, min: 0.3 },
            min_radius: 0.5,
            max_radius: 100.0,
        };
        let disk = cover_obstacle(&Footprint::new(10.0f64, 0.0, 0.0, 0.0), 2.0, &cfg).unwrap();
        assert!((disk.d_obs - 0.3).abs() < 1e-12);
        assert!(disk.r_d >= 0.5);
    }

    #[test]
    fn mirror_symmetry() {
        for rule in [OffsetRule::MaxIntrusion { extra: 0.4 }, OffsetRule::Fraction { ratio: 0.5, min: 0.3 }] {
            let cfg = CoverConfig { rule, margin: 0.1, ..CoverConfig::default() };
            let a = cover_obstacle(&Footprint::new(30.0, 1.7, 4.0, 1.6), 2.0, &cfg).unwrap();
            let b = cover_obstacle(&Footprint::new(30.0, -1.7, 4.0, 1.6), 2.0, &cfg).unwrap();
            assert_eq!(a.d_obs, -b.d_obs);
            assert_eq!(a.r_d, b.r_d);
        }
    }

    #[test]
    fn uncoverable_footprints() {
        let wide = Footprint::new(50.0, 0.0, 4.5, 6.0);
        assert!(matches!(cover_obstacle(&wide, 2.0, &CoverConfig::default()), Err(Error::Uncoverable(_))));
        let long = Footprint::new(50.0, 1.5, 80.0, 1.8);
        assert!(matches!(cover_obstacle(&long, 2.0, &CoverConfig::default()), Err(Error::Uncoverable(_))));
    }

    #[test]
    fn fraction_rule_with_grown_footprint_closes_the_road() {
        let cfg = CoverConfig { rule: OffsetRule::Fraction { ratio: 0.5, min: 0.3 }, ..CoverConfig::default() };
        let disk = cover_obstacle(&Footprint::new(50.0, 0.5, 4.5, 1.8), 2.0, &cfg).unwrap();
        assert!(disk.d_obs - disk.r_d < -2.0);
        let max = cover_obstacle(&Footprint::new(50.0, 1.6, 4.5, 1.8), 2.0, &CoverConfig::default()).unwrap();
        assert!(max.d_obs - max.r_d > -2.0 + 0.5);
    }

    #[test]
    fn slots_are_sorted_and_filled() {
        let ego = CurvilinearState::new(100.0, 0.0, 0.0, 8.0, 0.0);
        let obs = [Footprint::new(110.0, 1.5, 4.5, 1.8), Footprint::new(105.0, -1.5, 4.5, 1.8)];
        let disks = sort_and_slot(&ego, &obs, &road(), &CoverConfig::default(), &SlotConfig::default()).unwrap();
        assert_eq!(disks.len(), 3);
        assert_eq!(disks[0].s_obs, 105.0);
        assert_eq!(disks[1].s_obs, 110.0);
        assert!(disks[2].parked);
        assert_eq!(disks.iter().map(|d| d.slot).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn empty_road_parks_every_slot() {
        let ego = CurvilinearState::new(10.0, 0.3, 0.0, 8.0, 0.0);
        let disks = sort_and_slot(&ego, &[], &road(), &CoverConfig::default(), &SlotConfig::default()).unwrap();
        assert_eq!(disks.len(), 3);
        for d in disks {
            assert!(d.parked);
            assert!(d.d_obs.abs() >= 2.0 + d.r_d);
            assert_eq!(d.s_obs, 10.0);
        }
    }

    #[test]
    fn ties_break_by_lateral_offset_then_order() {
        let ego = CurvilinearState::new(100.0, 0.0, 0.0, 8.0, 0.0);
        let obs = [
            Footprint::new(110.0, 1.6, 4.5, 1.8),
            Footprint::new(110.0, -1.6, 4.5, 1.8),
            Footprint::new(90.0, 1.4, 4.5, 1.8),
        ];
        let disks = sort_and_slot(&ego, &obs, &road(), &CoverConfig::default(), &SlotConfig::default()).unwrap();
        // distances: sqrt(100 + 1.96) < sqrt(100 + 2.56) twice; tie kept in input order
        assert_eq!(disks[0].s_obs, 90.0);
        assert!(disks[1].d_obs > 0.0 && disks[2].d_obs < 0.0);
    }

    #[test]
    fn too_many_obstacles() {
        let ego = CurvilinearState::new(0.0, 0.0, 0.0, 8.0, 0.0);
        let obs = vec![Footprint::new(50.0, 1.5, 4.5, 1.8); 4];
        assert!(matches!(
            sort_and_slot(&ego, &obs, &road(), &CoverConfig::default(), &SlotConfig::default()),
            Err(Error::TooManyObstacles { count: 4, slots: 3 })
        ));
    }

    #[test]
    fn closed_path_gap_wraps() {
        let path = ReferencePath::oval(100.0, 30.0, 2.0).unwrap();
        let len = path.length();
        let ego = CurvilinearState::new(len - 5.0, 0.0, 0.0, 8.0, 0.0);
        let obs = [Footprint::new(5.0, 1.5, 4.5, 1.8)];
        let disks = sort_and_slot(&ego, &obs, &path, &CoverConfig::default(), &SlotConfig::default()).unwrap();
        assert!((disks[0].s_obs - ego.s - 10.0).abs() < 1e-9);
    }

    #[test]
    fn parked_disks_never_activate() {
        // cruising envelope: moving, modest heading error and steering
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = VehicleParams::default();
        let path = road();
        for _ in 0..10_000 {
            let ego = CurvilinearState::new(
                rng.random_range(10.0..390.0),
                rng.random_range(-1.8..=1.8),
                rng.random_range(-0.1..=0.1),
                rng.random_range(1.0..=12.0),
                rng.random_range(-0.1..=0.1),
            );
            let disks = sort_and_slot(&ego, &[], &path, &CoverConfig::default(), &SlotConfig::default()).unwrap();
            for disk in disks {
                let c = hocbf_constraint(&disk.barrier(), &ego, &Penalties::unit(), &path, &params).unwrap();
                for a in [params.a_bounds.min, params.a_bounds.max] {
                    for w in [params.omega_bounds.min, params.omega_bounds.max] {
                        assert!(c.slack(&[a, w]) > 0.0, "{ego:?} {disk:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn parked_disk_can_bind_when_steering_hard_toward_it() {
        let params = VehicleParams::default();
        let ego = CurvilinearState::new(100.0, -0.6, 0.3, 2.1, 0.3);
        let disks = sort_and_slot(&ego, &[], &road(), &CoverConfig::default(), &SlotConfig::default()).unwrap();
        let left = disks.iter().find(|d| d.d_obs > 0.0).unwrap();
        let c = hocbf_constraint(&left.barrier(), &ego, &Penalties::unit(), &road(), &params).unwrap();
        assert!(c.slack(&[3.0, 0.6]) < 0.0);
        assert!(c.slack(&[0.0, 0.0]) > 0.0);
    }

    #[test]
    fn scenario_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"
schema_version = 1
slots = 3

[path]
kind = "straight"
length = 300.0
lane_half_width = 2.0

[ego]
s = 5.0
d = 0.2
mu = 0.0
v = 8.0

[[obstacles]]
s = 60.0
d = 1.6
length = 4.5
width = 1.8
"#;
        let p = dir.path().join("sc.toml");
        std::fs::write(&p, text).unwrap();
        let sc = Scenario::from_file(&p).unwrap();
        assert_eq!(sc.obstacles.len(), 1);
        assert_eq!(sc.path.length(), 300.0);
        let json = serde_json::to_string(&sc.to_scenario_file()).unwrap();
        let q = dir.path().join("sc.json");
        std::fs::write(&q, json).unwrap();
        assert_eq!(Scenario::from_file(&q).unwrap(), sc);
        let bad = text.replace("schema_version = 1", "schema_version = 9");
        std::fs::write(&p, bad).unwrap();
        assert!(Scenario::from_file(&p).is_err());
    }

    #[test]
    fn distribution_sampling_is_seeded_and_valid() {
        let dist = ScenarioDistribution::obstacle_avoidance();
        dist.validate().unwrap();
        let path = dist.path.build(None).unwrap();
        let a = dist.sample(&path, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = dist.sample(&path, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let sc = dist.sample(&path, &mut rng).unwrap();
            assert!(!sc.obstacles.is_empty() && sc.obstacles.len() <= 2);
            for fp in &sc.obstacles {
                assert!((1.4..=2.2).contains(&fp.d.abs()));
                cover_obstacle(fp, 2.0, &CoverConfig::default()).unwrap();
            }
        }
        let lk = ScenarioDistribution::lane_keeping();
        let path = lk.path.build(None).unwrap();
        assert!(lk.sample(&path, &mut rng).unwrap().obstacles.is_empty());
    }

    proptest! {
        #[test]
        fn footprint_strictly_inside_cover(
            s in 0.0f64..100.0, abs_d in 0.0f64..2.5, neg in any::<bool>(),
            length in 0.5f64..6.0, width in 0.5f64..2.5, extra in 0.2f64..1.5,
        ) {
            let d = if neg { -abs_d } else { abs_d };
            let cfg = CoverConfig { rule: OffsetRule::MaxIntrusion { extra }, ..CoverConfig::default() };
            let fp = Footprint::new(s, d, length, width);
            if let Ok(disk) = cover_obstacle(&fp, 2.0, &cfg) {
                for (cs, cd) in fp.corners() {
                    prop_assert!(disk.contains(cs, cd));
                }
                prop_assert!(disk.d_obs * d.signum() >= d.abs() - 1e-12 || d == 0.0);
            }
        }

        #[test]
        fn always_exactly_n_slots(n in 1usize..6, k in 0usize..6, seed in 0u64..1000) {
            prop_assume!(k <= n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obs: Vec<_> = (0..k).map(|_| Footprint::new(rng.random_range(0.0..300.0), rng.random_range(1.0..2.2) * if rng.random::<bool>() { 1.0 } else { -1.0 }, 4.5, 1.8)).collect();
            let ego = CurvilinearState::new(rng.random_range(0.0..300.0), 0.0, 0.0, 5.0, 0.0);
            let slots = SlotConfig { n_slots: n, ..SlotConfig::default() };
            let disks = sort_and_slot(&ego, &obs, &road(), &CoverConfig::default(), &slots).unwrap();
            prop_assert_eq!(disks.len(), n);
            prop_assert_eq!(disks.iter().filter(|d| !d.parked).count(), k);
        }
    }
}
