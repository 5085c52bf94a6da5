//! Gravity-model OD demand, survey mode split and temporal trip sampling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::ZoneId;
use crate::network::TrafficNetwork;

const SHARE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DemandError {
    #[error("activity weights must be ≥ 0 and not both zero (got pop {w_pop}, poi {w_poi})")]
    BadWeights { w_pop: f64, w_poi: f64 },
    #[error("every zone has zero activity")]
    AllZeroActivity,
    #[error("total_trips must be > 0 (got {0})")]
    BadTotal(f64),
    #[error("impedance {from}->{to} must be > 0 (got {value})")]
    BadImpedance { from: usize, to: usize, value: f64 },
    #[error("impedance table is {rows}x{cols}, expected {n}x{n}")]
    ImpedanceShape { rows: usize, cols: usize, n: usize },
    #[error("gravity normalizer is zero: no zone pair has positive activity")]
    DegenerateActivity,
    #[error("mode-split table has no row for category \"{0}\"")]
    UnknownCategory(String),
    #[error("mode-split row \"{category}\": {reason}")]
    BadShares { category: String, reason: String },
    #[error("temporal profile must hold 24 nonnegative weights, not all zero")]
    ZeroProfile,
    #[error("OD matrix has no per-mode split; call apply_mode_split first")]
    MissingModeSplit,
    #[error("cannot read {path}: {message}")]
    File { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Walk,
    Vehicle,
    Bus,
    Subway,
    Taxi,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Walk, Mode::Vehicle, Mode::Bus, Mode::Subway, Mode::Taxi];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Walk => "walk",
            Mode::Vehicle => "vehicle",
            Mode::Bus => "bus",
            Mode::Subway => "subway",
            Mode::Taxi => "taxi",
        })
    }
}

/// Per-zone activity intensity, indexed like `TrafficNetwork::zones`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityProfile {
    pub zones: Vec<ZoneId>,
    pub intensity: Vec<f64>,
}

/// Min-max normalizes each input over zones, then weights them.
///
/// A column whose values are all equal normalizes to 1 when positive and 0
/// otherwise, so identical zones keep identical (nonzero) activity.
pub fn compute_activity(net: &TrafficNetwork, w_pop: f64, w_poi: f64) -> Result<ActivityProfile, DemandError> {
    if !(w_pop >= 0.0 && w_poi >= 0.0) || (w_pop == 0.0 && w_poi == 0.0) {
        return Err(DemandError::BadWeights { w_pop, w_poi });
    }
    let pop: Vec<f64> = net.zones.iter().map(|z| z.population_density).collect();
    let poi: Vec<f64> = net.zones.iter().map(|z| z.poi_count as f64).collect();
    let (pop, poi) = (min_max(&pop), min_max(&poi));
    let intensity: Vec<f64> = pop.iter().zip(&poi).map(|(p, q)| w_pop * p + w_poi * q).collect();
    if intensity.iter().all(|&q| q == 0.0) {
        return Err(DemandError::AllZeroActivity);
    }
    Ok(ActivityProfile {
        zones: net.zones.iter().map(|z| z.id.clone()).collect(),
        intensity,
    })
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        vec![fill; values.len()]
    }
}

/// Origin-destination demand in trips/day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdMatrix {
    pub zones: Vec<ZoneId>,
    /// `total[i][j]` = D_ij.
    pub total: Vec<Vec<f64>>,
    /// `by_mode[i][j][m]` = D_ij^(m), indexed by `Mode::index`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by_mode: Option<Vec<Vec<[f64; 5]>>>,
    /// Category key used for each pair's split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<Vec<String>>>,
}

impl OdMatrix {
    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    pub fn grand_total(&self) -> f64 {
        self.total.iter().flatten().sum()
    }

    pub fn mode_total(&self, mode: Mode) -> Option<f64> {
        let by_mode = self.by_mode.as_ref()?;
        Some(by_mode.iter().flatten().map(|cell| cell[mode.index()]).sum())
    }
}

/// Unnormalized gravity weight `Q_i Q_j / e_ij`.
pub fn gravity_weight(q_i: f64, q_j: f64, impedance: f64) -> f64 {
    q_i * q_j / impedance
}

/// Scales the gravity weights so that all pairs sum to `total_trips`.
pub fn gravity_demand(
    activity: &ActivityProfile,
    impedance: &[Vec<f64>],
    total_trips: f64,
) -> Result<OdMatrix, DemandError> {
    if !(total_trips > 0.0) {
        return Err(DemandError::BadTotal(total_trips));
    }
    let n = activity.intensity.len();
    if impedance.len() != n || impedance.iter().any(|row| row.len() != n) {
        return Err(DemandError::ImpedanceShape {
            rows: impedance.len(),
            cols: impedance.first().map_or(0, Vec::len),
            n,
        });
    }
    for (i, row) in impedance.iter().enumerate() {
        for (j, &e) in row.iter().enumerate() {
            if !(e > 0.0) {
                return Err(DemandError::BadImpedance {
                    from: i,
                    to: j,
                    value: e,
                });
            }
        }
    }
    let q = &activity.intensity;
    let weights: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| gravity_weight(q[i], q[j], impedance[i][j])).collect())
        .collect();
    let norm: f64 = weights.iter().flatten().sum();
    if !(norm > 0.0) {
        return Err(DemandError::DegenerateActivity);
    }
    let total = weights
        .into_iter()
        .map(|row| row.into_iter().map(|w| total_trips * w / norm).collect())
        .collect();
    Ok(OdMatrix {
        zones: activity.zones.clone(),
        total,
        by_mode: None,
        categories: None,
    })
}

/// Probability of each mode within one purpose-distance category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeShares {
    pub walk: f64,
    pub vehicle: f64,
    pub bus: f64,
    pub subway: f64,
    pub taxi: f64,
}

impl ModeShares {
    pub fn as_array(&self) -> [f64; 5] {
        [self.walk, self.vehicle, self.bus, self.subway, self.taxi]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            walk: a[0],
            vehicle: a[1],
            bus: a[2],
            subway: a[3],
            taxi: a[4],
        }
    }

    pub fn get(&self, mode: Mode) -> f64 {
        self.as_array()[mode.index()]
    }
}

/// `p(m | c)` rows keyed by category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, ModeShares>", into = "BTreeMap<String, ModeShares>")]
pub struct ModeSplitTable {
    rows: BTreeMap<String, ModeShares>,
}

impl TryFrom<BTreeMap<String, ModeShares>> for ModeSplitTable {
    type Error = DemandError;

    fn try_from(rows: BTreeMap<String, ModeShares>) -> Result<Self, Self::Error> {
        Self::new(rows)
    }
}

impl From<ModeSplitTable> for BTreeMap<String, ModeShares> {
    fn from(t: ModeSplitTable) -> Self {
        t.rows
    }
}

impl ModeSplitTable {
    /// Validates each row; rows summing to 1 within 1e-9 are renormalized
    /// so that per-pair marginals hold to rounding error.
    pub fn new(rows: BTreeMap<String, ModeShares>) -> Result<Self, DemandError> {
        let mut out = BTreeMap::new();
        for (category, shares) in rows {
            let a = shares.as_array();
            if a.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(DemandError::BadShares {
                    category,
                    reason: "probabilities must lie in [0, 1]".into(),
                });
            }
            let sum: f64 = a.iter().sum();
            if (sum - 1.0).abs() > SHARE_TOLERANCE {
                return Err(DemandError::BadShares {
                    category,
                    reason: format!("row sums to {sum}, expected 1"),
                });
            }
            out.insert(category, ModeShares::from_array(a.map(|p| p / sum)));
        }
        Ok(Self { rows: out })
    }

    pub fn get(&self, category: &str) -> Option<&ModeShares> {
        self.rows.get(category)
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DemandError> {
        read_json(path.as_ref())
    }

    /// Illustrative survey shares for the eight purpose-distance categories.
    pub fn default_survey() -> Self {
        let mut rows = BTreeMap::new();
        let table: [(&str, [f64; 5]); 8] = [
            ("home_work:<1km", [0.55, 0.10, 0.15, 0.10, 0.10]),
            ("home_work:1-5km", [0.10, 0.20, 0.30, 0.30, 0.10]),
            ("home_work:5-15km", [0.00, 0.30, 0.20, 0.40, 0.10]),
            ("home_work:>15km", [0.00, 0.45, 0.10, 0.40, 0.05]),
            ("other:<1km", [0.65, 0.10, 0.10, 0.05, 0.10]),
            ("other:1-5km", [0.20, 0.25, 0.25, 0.15, 0.15]),
            ("other:5-15km", [0.00, 0.40, 0.20, 0.25, 0.15]),
            ("other:>15km", [0.00, 0.55, 0.10, 0.25, 0.10]),
        ];
        for (k, a) in table {
            rows.insert(k.to_owned(), ModeShares::from_array(a));
        }
        Self::new(rows).expect("default shares are valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    HomeWork,
    #[default]
    Other,
}

impl FromStr for Purpose {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "home_work" => Ok(Self::HomeWork),
            "other" => Ok(Self::Other),
            _ => Err(format!("unknown purpose \"{s}\"")),
        }
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Purpose::HomeWork => "home_work",
            Purpose::Other => "other",
        })
    }
}

/// Distance bin of a centroid-to-centroid distance.
pub fn distance_bin(meters: f64) -> &'static str {
    let km = meters / 1000.0;
    if km < 1.0 {
        "<1km"
    } else if km < 5.0 {
        "1-5km"
    } else if km < 15.0 {
        "5-15km"
    } else {
        ">15km"
    }
}

/// Assigns `purpose:distance-bin` categories to zone pairs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PairCategorizer {
    /// Purpose labels keyed by `"ORIGIN->DEST"`; unlisted pairs are `other`.
    #[serde(default)]
    pub purposes: BTreeMap<String, Purpose>,
}

impl PairCategorizer {
    pub fn categorize(&self, net: &TrafficNetwork, i: usize, j: usize) -> String {
        let (a, b) = (&net.zones[i], &net.zones[j]);
        let purpose = self
            .purposes
            .get(&format!("{}->{}", a.id, b.id))
            .copied()
            .unwrap_or_default();
        format!("{purpose}:{}", distance_bin(a.centroid.distance(&b.centroid)))
    }
}

/// `D_ij^(m) = D_ij · p(m | c_ij)`.
pub fn apply_mode_split(
    od: &OdMatrix,
    table: &ModeSplitTable,
    categorize: impl Fn(usize, usize) -> String,
) -> Result<OdMatrix, DemandError> {
    let n = od.len();
    let mut by_mode = vec![vec![[0.0; 5]; n]; n];
    let mut categories = vec![vec![String::new(); n]; n];
    for i in 0..n {
        for j in 0..n {
            let c = categorize(i, j);
            let shares = table.get(&c).ok_or_else(|| DemandError::UnknownCategory(c.clone()))?;
            by_mode[i][j] = shares.as_array().map(|p| od.total[i][j] * p);
            categories[i][j] = c;
        }
    }
    Ok(OdMatrix {
        zones: od.zones.clone(),
        total: od.total.clone(),
        by_mode: Some(by_mode),
        categories: Some(categories),
    })
}

/// Twenty-four hourly weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalProfile(pub [f64; 24]);

impl TemporalProfile {
    pub fn uniform() -> Self {
        Self([1.0; 24])
    }

    /// Weight 2 during 06:00–10:00 and 15:00–20:00, 1 elsewhere.
    pub fn rush_hours() -> Self {
        let mut w = [1.0; 24];
        for (h, v) in w.iter_mut().enumerate() {
            if (6..10).contains(&h) || (15..20).contains(&h) {
                *v = 2.0;
            }
        }
        Self(w)
    }

    pub fn single_hour(hour: usize) -> Self {
        let mut w = [0.0; 24];
        w[hour] = 1.0;
        Self(w)
    }

    pub fn validate(&self) -> Result<f64, DemandError> {
        let sum: f64 = self.0.iter().sum();
        if self.0.iter().any(|w| !(*w >= 0.0)) || !(sum > 0.0) {
            return Err(DemandError::ZeroProfile);
        }
        Ok(sum)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DemandError> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Shape {
            Bare([f64; 24]),
            Keyed { hourly: [f64; 24] },
        }
        let shape: Shape = read_json(path.as_ref())?;
        Ok(Self(match shape {
            Shape::Bare(w) | Shape::Keyed { hourly: w } => w,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trip {
    pub id: u64,
    pub origin: ZoneId,
    pub destination: ZoneId,
    pub mode: Mode,
    /// Seconds since midnight.
    pub departure_time: f64,
}

/// Poisson trip counts per `(origin, dest, mode, hour)` cell, uniform
/// departure times within the hour.
///
/// Each cell draws from its own ChaCha stream, so the result does not depend
/// on iteration order. Output is sorted by departure time; ids follow that
/// order.
pub fn sample_trips(od: &OdMatrix, profile: &TemporalProfile, seed: u64) -> Result<Vec<Trip>, DemandError> {
    let weight_sum = profile.validate()?;
    let by_mode = od.by_mode.as_ref().ok_or(DemandError::MissingModeSplit)?;
    let n = od.len();
    let mut trips = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for mode in Mode::ALL {
                let daily = by_mode[i][j][mode.index()];
                for (hour, w) in profile.0.iter().enumerate() {
                    let lambda = daily * w / weight_sum;
                    if !(lambda > 0.0) {
                        continue;
                    }
                    let cell = (((i * n + j) * 5 + mode.index()) * 24 + hour) as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(cell);
                    let count = Poisson::new(lambda)
                        .expect("lambda is positive and finite")
                        .sample(&mut rng) as u64;
                    let start = hour as f64 * 3600.0;
                    for _ in 0..count {
                        let offset: f64 = rng.random_range(0.0..3600.0);
                        trips.push(Trip {
                            id: 0,
                            origin: od.zones[i].clone(),
                            destination: od.zones[j].clone(),
                            mode,
                            departure_time: start + offset,
                        });
                    }
                }
            }
        }
    }
    trips.sort_by(|a, b| {
        a.departure_time
            .total_cmp(&b.departure_time)
            .then_with(|| a.origin.cmp(&b.origin))
            .then_with(|| a.destination.cmp(&b.destination))
            .then_with(|| a.mode.cmp(&b.mode))
    });
    for (k, t) in trips.iter_mut().enumerate() {
        t.id = k as u64;
    }
    Ok(trips)
}

/// Demand totals in the reporting shape (Taxi, Public Transit, Walk, Total)
/// with every mode also listed explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandStats {
    pub region: String,
    pub taxi: u64,
    pub public_transit: u64,
    pub walk: u64,
    pub vehicle: u64,
    pub bus: u64,
    pub subway: u64,
    pub total: u64,
}

impl DemandStats {
    pub const HEADERS: [&'static str; 8] = [
        "Region",
        "Taxi",
        "Public Transit",
        "Walk",
        "Vehicle",
        "Bus",
        "Subway",
        "Total",
    ];

    pub fn from_trips(region: impl Into<String>, trips: &[Trip]) -> Self {
        let mut counts = [0u64; 5];
        for t in trips {
            counts[t.mode.index()] += 1;
        }
        let count = |m: Mode| counts[m.index()];
        Self {
            region: region.into(),
            taxi: count(Mode::Taxi),
            public_transit: count(Mode::Bus) + count(Mode::Subway),
            walk: count(Mode::Walk),
            vehicle: count(Mode::Vehicle),
            bus: count(Mode::Bus),
            subway: count(Mode::Subway),
            total: trips.len() as u64,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::HEADERS).expect("in-memory write");
        w.write_record([
            self.region.clone(),
            self.taxi.to_string(),
            self.public_transit.to_string(),
            self.walk.to_string(),
            self.vehicle.to_string(),
            self.bus.to_string(),
            self.subway.to_string(),
            self.total.to_string(),
        ])
        .expect("in-memory write");
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DemandError> {
    let err = |message: String| DemandError::File {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}
