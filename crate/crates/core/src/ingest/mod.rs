//! Raw traces to trajectory pairs: staypoint extraction, 500 m gridding,
//! sliding-window pair construction and chronological splitting.

pub mod formats;
mod staypoints;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, GeoError, GeoPoint, MercatorPoint, NormStats};
use crate::poi::{PoiCatalog, PoiProfile};

pub use staypoints::{extract_staypoints, extract_staypoints_by_user, RawPing, Staypoint, StaypointOutput, StaypointParams};

pub type LocationId = u32;

const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: line {line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("{0}: missing `#nextloc-format v1` header")]
    MissingHeader(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("unknown location id {0}")]
    UnknownLocation(LocationId),
    #[error("duplicate location id {0}")]
    DuplicateLocation(LocationId),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("split `{0}` would be empty")]
    EmptySplit(&'static str),
    #[error("durations have no spread (min = max = {0} min)")]
    DegenerateDuration(f64),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// One stay at a location (arrival slot, stay length).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub location_id: LocationId,
    /// 0 = Monday .. 6 = Sunday; slot 7 is reserved.
    pub day_of_week: u8,
    pub hour: u8,
    pub duration_min: f64,
    pub arrive_ts: i64,
}

impl VisitRecord {
    /// Derives day-of-week and hour (UTC) from the arrival timestamp.
    pub fn from_stay(location_id: LocationId, arrive_ts: i64, duration_min: f64) -> Self {
        let days = arrive_ts.div_euclid(SECONDS_PER_DAY);
        let secs = arrive_ts.rem_euclid(SECONDS_PER_DAY);
        // 1970-01-01 was a Thursday (slot 3)
        let day_of_week = (days + 3).rem_euclid(7) as u8;
        let hour = (secs / 3600) as u8;
        Self { location_id, day_of_week, hour, duration_min, arrive_ts }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.hour > 23 {
            return Err(IngestError::Param(format!("hour {} outside 0..=23", self.hour)));
        }
        if self.day_of_week > 7 {
            return Err(IngestError::Param(format!("day {} outside 0..=7", self.day_of_week)));
        }
        if !(self.duration_min >= 0.0 && self.duration_min.is_finite()) {
            return Err(IngestError::Param(format!("duration {} must be finite and >= 0", self.duration_min)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: LocationId,
    pub center: MercatorPoint,
    pub grid_row: i64,
    pub grid_col: i64,
    pub poi: PoiProfile,
}

/// How a dataset's coordinates relate to the globe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordKind {
    /// Web Mercator meters of real lon/lat positions.
    Geographic,
    /// Planar meters of a virtual grid; distances are reported as planar.
    Virtual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTrajectory {
    pub user_id: String,
    pub visits: Vec<VisitRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair {
    /// Index into [`CityDataset::users`].
    pub user: usize,
    /// Index of the first history record in the user's visit sequence.
    pub start: usize,
    pub history: Vec<VisitRecord>,
    pub current: Vec<VisitRecord>,
    pub target: LocationId,
    pub target_ts: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub history_len: usize,
    pub current_len: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.history_len == 0 || self.current_len == 0 {
            return Err(IngestError::Param("history and current lengths must be >= 1".into()));
        }
        if self.current_len >= self.history_len {
            return Err(IngestError::Param(format!(
                "current length {} must be < history length {}",
                self.current_len, self.history_len
            )));
        }
        if self.stride == 0 {
            return Err(IngestError::Param("stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn span(&self) -> usize {
        self.history_len + self.current_len + 1
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { history_len: 30, current_len: 6, stride: 1 }
    }
}

/// Sliding windows over each user's time-ordered visits. Window `i` uses
/// records `[i, i+M)` as history, `[i+M, i+M+N)` as current and record
/// `i+M+N` as the target.
pub fn build_pairs(users: &[UserTrajectory], window: WindowSpec) -> Result<Vec<TrajectoryPair>, IngestError> {
    window.validate()?;
    let (m, n) = (window.history_len, window.current_len);
    let mut out = Vec::new();
    for (u, traj) in users.iter().enumerate() {
        let v = &traj.visits;
        if v.windows(2).any(|w| w[1].arrive_ts < w[0].arrive_ts) {
            return Err(IngestError::Param(format!("visits of user {} are not time-ordered", traj.user_id)));
        }
        if v.len() < window.span() {
            continue;
        }
        let mut i = 0;
        while i + window.span() <= v.len() {
            out.push(TrajectoryPair {
                user: u,
                start: i,
                history: v[i..i + m].to_vec(),
                current: v[i + m..i + m + n].to_vec(),
                target: v[i + m + n].location_id,
                target_ts: v[i + m + n].arrive_ts,
            });
            i += window.stride;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitPart {
    pub fn name(self) -> &'static str {
        match self {
            SplitPart::Train => "train",
            SplitPart::Val => "val",
            SplitPart::Test => "test",
        }
    }
}

/// Chronological split on target timestamps; the earliest pairs train.
pub fn split_dataset(pairs: &[TrajectoryPair], ratios: [f64; 3]) -> Result<Split, IngestError> {
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(IngestError::Param(format!("split ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].target_ts, pairs[i].user, pairs[i].start));
    let n = pairs.len();
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let split = Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    for part in [SplitPart::Train, SplitPart::Val, SplitPart::Test] {
        if split.get(part).is_empty() {
            return Err(IngestError::EmptySplit(part.name()));
        }
    }
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridCell {
    pub row: i64,
    pub col: i64,
}

/// Floor-convention grid assignment in Mercator meters.
pub fn assign_grid(p: GeoPoint, origin: MercatorPoint, cell_m: f64) -> Result<(GridCell, MercatorPoint), IngestError> {
    if !(cell_m > 0.0) {
        return Err(IngestError::Param(format!("cell size {cell_m} must be > 0")));
    }
    let m = geo::to_mercator(p)?;
    Ok(assign_grid_mercator(m, origin, cell_m))
}

pub fn assign_grid_mercator(m: MercatorPoint, origin: MercatorPoint, cell_m: f64) -> (GridCell, MercatorPoint) {
    let col = ((m.x - origin.x) / cell_m).floor() as i64;
    let row = ((m.y - origin.y) / cell_m).floor() as i64;
    (GridCell { row, col }, cell_center(origin, cell_m, GridCell { row, col }))
}

pub fn cell_center(origin: MercatorPoint, cell_m: f64, c: GridCell) -> MercatorPoint {
    MercatorPoint::new(origin.x + (c.col as f64 + 0.5) * cell_m, origin.y + (c.row as f64 + 0.5) * cell_m)
}

/// Aggregates staypoints into grid locations and per-user visit records.
/// Cells get ids `1..` in (row, col) order; without an explicit origin the
/// grid starts at the south-west corner of all staypoints. Profiles are
/// zero vectors of width `categories`.
pub fn grid_staypoints(
    by_user: &BTreeMap<String, StaypointOutput>,
    origin: Option<MercatorPoint>,
    cell_m: f64,
    categories: usize,
) -> Result<(Vec<Location>, Vec<UserTrajectory>), IngestError> {
    if !(cell_m > 0.0 && cell_m.is_finite()) {
        return Err(IngestError::Param(format!("cell size {cell_m} must be > 0")));
    }
    let mut projected: Vec<(&str, &Staypoint, MercatorPoint)> = Vec::new();
    for (user, out) in by_user {
        for sp in &out.staypoints {
            projected.push((user, sp, geo::to_mercator(sp.centroid)?));
        }
    }
    let origin = origin.unwrap_or_else(|| {
        let x = projected.iter().map(|p| p.2.x).fold(f64::INFINITY, f64::min);
        let y = projected.iter().map(|p| p.2.y).fold(f64::INFINITY, f64::min);
        MercatorPoint::new(x, y)
    });
    let mut cells: BTreeMap<(i64, i64), MercatorPoint> = BTreeMap::new();
    let assigned: Vec<(i64, i64)> = projected
        .iter()
        .map(|p| {
            let (c, center) = assign_grid_mercator(p.2, origin, cell_m);
            cells.insert((c.row, c.col), center);
            (c.row, c.col)
        })
        .collect();
    let ids: HashMap<(i64, i64), LocationId> =
        cells.keys().enumerate().map(|(i, k)| (*k, i as LocationId + 1)).collect();
    let locations = cells
        .iter()
        .map(|(k, center)| Location {
            id: ids[k],
            center: *center,
            grid_row: k.0,
            grid_col: k.1,
            poi: PoiProfile::zeros(categories),
        })
        .collect();
    let mut users: Vec<UserTrajectory> = Vec::new();
    for ((user, sp, _), cell) in projected.iter().zip(&assigned) {
        if users.last().is_none_or(|u| u.user_id != *user) {
            users.push(UserTrajectory { user_id: user.to_string(), visits: Vec::new() });
        }
        let visit = VisitRecord::from_stay(ids[cell], sp.arrive_ts, sp.duration_s as f64 / 60.0);
        users.last_mut().unwrap().visits.push(visit);
    }
    Ok((locations, users))
}

/// Centers of a `rows x cols` grid whose geometric center is the origin,
/// as `(row, col, center)` in row-major order.
pub fn virtual_coordinates(rows: usize, cols: usize, cell_m: f64) -> Result<Vec<(i64, i64, MercatorPoint)>, IngestError> {
    if rows == 0 || cols == 0 || !(cell_m > 0.0) {
        return Err(IngestError::Param("virtual grid needs positive dimensions".into()));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push((r as i64, c as i64, virtual_center(rows, cols, cell_m, r as i64, c as i64)));
        }
    }
    Ok(out)
}

pub fn virtual_center(rows: usize, cols: usize, cell_m: f64, r: i64, c: i64) -> MercatorPoint {
    MercatorPoint::new(
        (c as f64 - cols as f64 / 2.0 + 0.5) * cell_m,
        (r as f64 - rows as f64 / 2.0 + 0.5) * cell_m,
    )
}

/// Min-max bounds for stay durations, in minutes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurBounds {
    pub min: f64,
    pub max: f64,
}

impl DurBounds {
    pub fn scale(&self, duration_min: f64) -> f64 {
        ((duration_min - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub window: WindowSpec,
    pub ratios: [f64; 3],
    /// Durations are clipped here before min-max scaling.
    pub duration_ceiling_min: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { window: WindowSpec::default(), ratios: [0.7, 0.1, 0.2], duration_ceiling_min: 24.0 * 60.0 }
    }
}

/// A city's locations, trajectories, pairs and fitted statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityDataset {
    pub name: String,
    pub coord_kind: CoordKind,
    /// Sorted by id.
    pub locations: Vec<Location>,
    pub catalog: PoiCatalog,
    pub users: Vec<UserTrajectory>,
    pub options: DatasetOptions,
    pub pairs: Vec<TrajectoryPair>,
    pub split: Split,
    pub norm_stats: NormStats,
    /// Which records the normalization was fitted on.
    pub norm_source: String,
    pub dur_bounds: DurBounds,
}

impl CityDataset {
    /// Validates references, builds windows and splits, and fits the
    /// normalization and duration bounds on the training split.
    pub fn assemble(
        name: impl Into<String>,
        coord_kind: CoordKind,
        mut locations: Vec<Location>,
        catalog: PoiCatalog,
        mut users: Vec<UserTrajectory>,
        options: DatasetOptions,
    ) -> Result<Self, IngestError> {
        locations.sort_by_key(|l| l.id);
        for w in locations.windows(2) {
            if w[0].id == w[1].id {
                return Err(IngestError::DuplicateLocation(w[0].id));
            }
        }
        let mut cells = HashSet::new();
        for l in &locations {
            if !cells.insert((l.grid_row, l.grid_col)) {
                return Err(IngestError::Param(format!("grid cell ({}, {}) used twice", l.grid_row, l.grid_col)));
            }
            if l.poi.len() != catalog.len() {
                return Err(IngestError::Param(format!(
                    "location {} has a {}-entry POI profile, catalog has {} categories",
                    l.id,
                    l.poi.len(),
                    catalog.len()
                )));
            }
        }
        users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        let known: HashSet<LocationId> = locations.iter().map(|l| l.id).collect();
        for u in &users {
            for v in &u.visits {
                v.validate()?;
                if !known.contains(&v.location_id) {
                    return Err(IngestError::UnknownLocation(v.location_id));
                }
            }
        }
        let pairs = build_pairs(&users, options.window)?;
        let split = split_dataset(&pairs, options.ratios)?;
        let mut ds = CityDataset {
            name: name.into(),
            coord_kind,
            locations,
            catalog,
            users,
            options,
            pairs,
            split,
            norm_stats: NormStats { mean_x: 0.0, mean_y: 0.0, std_x: 1.0, std_y: 1.0 },
            norm_source: String::new(),
            dur_bounds: DurBounds { min: 0.0, max: 1.0 },
        };
        ds.refit_norm_stats(SplitPart::Train)?;
        ds.dur_bounds = ds.fit_dur_bounds(SplitPart::Train)?;
        Ok(ds)
    }

    pub fn location_index(&self) -> HashMap<LocationId, usize> {
        self.locations.iter().enumerate().map(|(i, l)| (l.id, i)).collect()
    }

    pub fn location(&self, id: LocationId) -> Option<&Location> {
        self.locations.binary_search_by_key(&id, |l| l.id).ok().map(|i| &self.locations[i])
    }

    /// Every distinct visit record referenced by the pairs of `part`
    /// (history, current and target), in user/time order.
    pub fn split_records(&self, part: SplitPart) -> Vec<&VisitRecord> {
        let span = self.options.window.span();
        let mut seen: BTreeMap<(usize, usize), ()> = BTreeMap::new();
        for &p in self.split.get(part) {
            let pair = &self.pairs[p];
            for i in pair.start..pair.start + span {
                seen.insert((pair.user, i), ());
            }
        }
        seen.keys().map(|&(u, i)| &self.users[u].visits[i]).collect()
    }

    pub fn split_coordinates(&self, part: SplitPart) -> Vec<MercatorPoint> {
        let idx = self.location_index();
        self.split_records(part)
            .into_iter()
            .map(|v| self.locations[idx[&v.location_id]].center)
            .collect()
    }

    pub fn refit_norm_stats(&mut self, part: SplitPart) -> Result<(), IngestError> {
        self.norm_stats = geo::fit_norm_stats(&self.split_coordinates(part))?;
        self.norm_source = format!("{}:{}", self.name, part.name());
        Ok(())
    }

    pub fn fit_dur_bounds(&self, part: SplitPart) -> Result<DurBounds, IngestError> {
        let ceiling = self.options.duration_ceiling_min;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in self.split_records(part) {
            let d = v.duration_min.min(ceiling);
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if !(hi > lo) {
            return Err(IngestError::DegenerateDuration(lo));
        }
        Ok(DurBounds { min: lo, max: hi })
    }

    /// Hex digest over location ids, cells and centers.
    pub fn locations_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for l in &self.locations {
            h.update(l.id.to_le_bytes());
            h.update(l.grid_row.to_le_bytes());
            h.update(l.grid_col.to_le_bytes());
            h.update(l.center.x.to_le_bytes());
            h.update(l.center.y.to_le_bytes());
        }
        crate::nn::params::hex(&h.finalize())
    }

    pub fn visit_count(&self) -> usize {
        self.users.iter().map(|u| u.visits.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn user(len: usize) -> UserTrajectory {
        UserTrajectory {
            user_id: format!("u{len}"),
            visits: (0..len)
                .map(|i| VisitRecord::from_stay(i as LocationId, 1_704_067_200 + i as i64 * 3600, 30.0))
                .collect(),
        }
    }

    #[test]
    fn day_and_hour_from_timestamp() {
        // 2024-01-01 00:00 UTC was a Monday.
        let v = VisitRecord::from_stay(1, 1_704_067_200, 10.0);
        assert_eq!((v.day_of_week, v.hour), (0, 0));
        let v = VisitRecord::from_stay(1, 1_704_067_200 + 6 * 86_400 + 23 * 3600 + 59, 10.0);
        assert_eq!((v.day_of_week, v.hour), (6, 23));
        let v = VisitRecord::from_stay(1, 0, 10.0);
        assert_eq!((v.day_of_week, v.hour), (3, 0));
    }

    #[test]
    fn pair_counts_at_the_boundary() {
        let w = WindowSpec { history_len: 4, current_len: 2, stride: 1 };
        assert_eq!(build_pairs(&[user(7)], w).unwrap().len(), 1);
        assert_eq!(build_pairs(&[user(6)], w).unwrap().len(), 0);
        let pairs = build_pairs(&[user(12)], w).unwrap();
        assert_eq!(pairs.len(), 6);
        // user(7 + 5): five extra records give five extra windows
        let five = build_pairs(&[user(7 + 4)], w).unwrap();
        assert_eq!(five.len(), 5);
        for (i, p) in five.iter().enumerate() {
            assert_eq!(p.target, (i + 6) as LocationId);
            assert_eq!(p.history[0].location_id, i as LocationId);
            assert_eq!(p.current[0].location_id, (i + 4) as LocationId);
        }
    }

    #[test]
    fn window_parameter_errors() {
        let bad = WindowSpec { history_len: 3, current_len: 3, stride: 1 };
        assert!(matches!(build_pairs(&[user(10)], bad), Err(IngestError::Param(_))));
        let bad = WindowSpec { history_len: 3, current_len: 1, stride: 0 };
        assert!(build_pairs(&[user(10)], bad).is_err());
    }

    proptest! {
        #[test]
        fn pair_count_formula(lens in proptest::collection::vec(0usize..40, 1..6), m in 2usize..8, n in 1usize..4, stride in 1usize..5) {
            prop_assume!(n < m);
            let users: Vec<_> = lens.iter().map(|&l| user(l)).collect();
            let w = WindowSpec { history_len: m, current_len: n, stride };
            let pairs = build_pairs(&users, w).unwrap();
            let expect: usize = lens.iter().map(|&l| if l >= m + n + 1 { (l - m - n - 1) / stride + 1 } else { 0 }).sum();
            prop_assert_eq!(pairs.len(), expect);
            for p in &pairs {
                let hmax = p.history.iter().map(|v| v.arrive_ts).max().unwrap();
                let cmin = p.current.iter().map(|v| v.arrive_ts).min().unwrap();
                let cmax = p.current.iter().map(|v| v.arrive_ts).max().unwrap();
                prop_assert!(hmax < cmin && cmax < p.target_ts);
            }
        }

        #[test]
        fn split_is_a_partition(n in 10usize..300) {
            let pairs = build_pairs(&[user(n + 3)], WindowSpec { history_len: 2, current_len: 1, stride: 1 }).unwrap();
            let s = split_dataset(&pairs, [0.7, 0.1, 0.2]).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..pairs.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn split_sizes_and_order() {
        let w = WindowSpec { history_len: 2, current_len: 1, stride: 1 };
        let ten = build_pairs(&[user(13)], w).unwrap();
        assert_eq!(ten.len(), 10);
        let s = split_dataset(&ten, [0.7, 0.1, 0.2]).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));

        let hundred = build_pairs(&[user(103)], w).unwrap();
        let s = split_dataset(&hundred, [0.7, 0.1, 0.2]).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        let last_train = s.train.iter().map(|&i| hundred[i].target_ts).max().unwrap();
        let first_test = s.test.iter().map(|&i| hundred[i].target_ts).min().unwrap();
        assert!(last_train < first_test);
        assert_eq!(split_dataset(&hundred, [0.7, 0.1, 0.2]).unwrap(), s);

        let three = build_pairs(&[user(6)], w).unwrap();
        assert!(matches!(split_dataset(&three, [0.7, 0.1, 0.2]), Err(IngestError::EmptySplit(_))));
        assert!(split_dataset(&ten, [0.7, 0.2, 0.2]).is_err());
    }

    #[test]
    fn grid_floor_convention() {
        let origin = MercatorPoint::new(1000.0, 2000.0);
        let (c, center) = assign_grid_mercator(origin, origin, 500.0);
        assert_eq!((c.row, c.col), (0, 0));
        assert_eq!(center, MercatorPoint::new(1250.0, 2250.0));
        let (c, _) = assign_grid_mercator(MercatorPoint::new(999.0, 1999.0), origin, 500.0);
        assert_eq!((c.row, c.col), (-1, -1));
        assert!(assign_grid(GeoPoint { lon: 0.0, lat: 0.0 }, origin, 0.0).is_err());
    }

    #[test]
    fn grid_centers_reassign_to_their_cell() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let origin = geo::to_mercator(GeoPoint { lon: 104.0, lat: 30.6 }).unwrap();
        for _ in 0..1000 {
            let p = GeoPoint { lon: rng.random_range(103.9..104.2), lat: rng.random_range(30.5..30.8) };
            let (cell, center) = assign_grid(p, origin, 500.0).unwrap();
            let m = geo::to_mercator(p).unwrap();
            assert_eq!(cell.col, ((m.x - origin.x) / 500.0).floor() as i64);
            assert_eq!(cell.row, ((m.y - origin.y) / 500.0).floor() as i64);
            let back = geo::from_mercator(center);
            let (again, _) = assign_grid(back, origin, 500.0).unwrap();
            assert_eq!(again, cell);
        }
    }

    #[test]
    fn virtual_grid_layout() {
        let g = virtual_coordinates(200, 200, 500.0).unwrap();
        let (_, _, c) = g[100 * 200 + 100];
        assert_eq!(c, MercatorPoint::new(250.0, 250.0));
        let one = virtual_coordinates(1, 1, 500.0).unwrap();
        assert_eq!(one[0].2, MercatorPoint::new(0.0, 0.0));
        let g = virtual_coordinates(4, 6, 100.0).unwrap();
        let first = g[0].2;
        let last = g[g.len() - 1].2;
        assert_eq!((first.x, first.y), (-last.x, -last.y));
        assert!(virtual_coordinates(0, 3, 1.0).is_err());
    }

    #[test]
    fn duration_scaling_clips() {
        let b = DurBounds { min: 10.0, max: 110.0 };
        assert_eq!(b.scale(10.0), 0.0);
        assert_eq!(b.scale(110.0), 1.0);
        assert_eq!(b.scale(60.0), 0.5);
        assert_eq!(b.scale(-5.0), 0.0);
        assert_eq!(b.scale(500.0), 1.0);
    }

    #[test]
    fn staypoints_become_grid_locations() {
        let sp = |lon: f64, lat: f64, t: i64| Staypoint {
            centroid: GeoPoint { lon, lat },
            arrive_ts: t,
            duration_s: 1800,
            n_pings: 3,
        };
        let mut by_user = BTreeMap::new();
        by_user.insert(
            "a".to_string(),
            StaypointOutput { staypoints: vec![sp(116.3, 39.9, 0), sp(116.33, 39.9, 7200)], rejected: 0 },
        );
        by_user.insert("b".to_string(), StaypointOutput { staypoints: vec![sp(116.3001, 39.9001, 100)], rejected: 0 });
        let (locs, users) = grid_staypoints(&by_user, None, 500.0, 5).unwrap();
        assert_eq!(locs.len(), 2);
        assert_eq!((locs[0].id, locs[0].grid_row, locs[0].grid_col), (1, 0, 0));
        assert_eq!(locs[1].grid_col, 6);
        assert_eq!(users.len(), 2);
        assert_eq!(users[0].visits.iter().map(|v| v.location_id).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(users[1].visits[0].location_id, 1);
        assert_eq!(users[0].visits[0].duration_min, 30.0);
    }
}
