//! Synthetic cities: grid locations with archetype POI profiles and agents
//! following noisy weekly routines.

use std::collections::HashMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geo::MercatorPoint;
use crate::ingest::{
    virtual_center, CityDataset, CoordKind, DatasetOptions, Location, LocationId, UserTrajectory, VisitRecord,
};
use crate::poi::{PoiCatalog, PoiProfile};

/// 2024-01-01 00:00 UTC, a Monday.
pub const DEFAULT_START_TS: i64 = 1_704_067_200;

/// Location archetypes, in the category order of the shipped five-category
/// catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Archetype {
    Entertainment,
    Commercial,
    Education,
    PublicService,
    Residential,
}

impl Archetype {
    pub const ALL: [Archetype; 5] =
        [Self::Entertainment, Self::Commercial, Self::Education, Self::PublicService, Self::Residential];

    pub fn category(self) -> usize {
        self as usize
    }

    fn is_workplace(self) -> bool {
        matches!(self, Self::Commercial | Self::Education | Self::PublicService)
    }

    fn is_leisure(self) -> bool {
        matches!(self, Self::Entertainment | Self::Commercial)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineTransform {
    pub scale_x: f64,
    pub scale_y: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl AffineTransform {
    pub const IDENTITY: Self = Self { scale_x: 1.0, scale_y: 1.0, shift_x: 0.0, shift_y: 0.0 };

    pub fn apply(&self, p: MercatorPoint) -> MercatorPoint {
        MercatorPoint::new(self.scale_x * p.x + self.shift_x, self.scale_y * p.y + self.shift_y)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let finite = [self.scale_x, self.scale_y, self.shift_x, self.shift_y].iter().all(|v| v.is_finite());
        if !finite || self.scale_x <= 0.0 || self.scale_y <= 0.0 {
            return Err(HarnessError::Config("transform scales must be finite and > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthCitySpec {
    pub name: String,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub cell_m: f64,
    /// `[row, col]` cells that hold locations; empty means every cell.
    pub cells: Vec<[usize; 2]>,
    pub n_agents: usize,
    pub n_days: usize,
    /// Relative weights of entertainment, commercial, education, public
    /// service and residential locations.
    pub archetype_mix: [f64; 5],
    /// Probability that a planned visit is replaced by a random activity;
    /// also scales the arrival jitter.
    pub noise: f64,
    pub seed: u64,
    pub start_ts: i64,
    pub transform: Option<AffineTransform>,
    /// Shuffle location ids with this seed.
    pub permutation_seed: Option<u64>,
}

impl Default for SynthCitySpec {
    fn default() -> Self {
        Self::toybench()
    }
}

impl SynthCitySpec {
    /// The default benchmark city.
    pub fn toybench() -> Self {
        Self {
            name: "toybench".into(),
            grid_rows: 10,
            grid_cols: 10,
            cell_m: 500.0,
            cells: Vec::new(),
            n_agents: 200,
            n_days: 28,
            archetype_mix: [0.15, 0.2, 0.1, 0.15, 0.4],
            noise: 0.1,
            seed: 7,
            start_ts: DEFAULT_START_TS,
            transform: None,
            permutation_seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(format!("synth: {m}")));
        if self.grid_rows == 0 || self.grid_cols == 0 || self.n_agents == 0 || self.n_days == 0 {
            return bad("grid, agent and day counts must be positive");
        }
        if !(self.cell_m > 0.0 && self.cell_m.is_finite()) {
            return bad("cell_m must be positive");
        }
        if self.archetype_mix.iter().any(|w| !(*w >= 0.0 && w.is_finite())) || self.archetype_mix.iter().sum::<f64>() <= 0.0 {
            return bad("archetype_mix must be non-negative with a positive sum");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1]");
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.cells {
            if c[0] >= self.grid_rows || c[1] >= self.grid_cols || !seen.insert(*c) {
                return bad("cells must be distinct and inside the grid");
            }
        }
        if let Some(t) = &self.transform {
            t.validate()?;
        }
        Ok(())
    }

    /// Location cells in row-major order.
    pub fn location_cells(&self) -> Vec<(usize, usize)> {
        let mut cells: Vec<(usize, usize)> = if self.cells.is_empty() {
            (0..self.grid_rows).flat_map(|r| (0..self.grid_cols).map(move |c| (r, c))).collect()
        } else {
            self.cells.iter().map(|c| (c[0], c[1])).collect()
        };
        cells.sort_unstable();
        cells
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activity {
    Home,
    Work,
    Leisure,
    Errand,
}

/// Activities a planned visit may be swapped for under noise.
const NOISE_ACTIVITIES: [Activity; 3] = [Activity::Home, Activity::Leisure, Activity::Errand];
const LEISURE_WEIGHTS: [f64; 3] = [0.6, 0.3, 0.1];

#[derive(Clone, Debug)]
pub struct Agent {
    pub home: usize,
    pub work: usize,
    /// Favorite first.
    pub leisure: Vec<usize>,
    pub errands: Vec<usize>,
    pub work_offset_min: i64,
    pub work_end_hour: i64,
    pub lunch_out: bool,
    /// Weekdays (0 = Monday) with an evening outing.
    pub evening_days: Vec<i64>,
    pub weekend_active: bool,
}

impl Agent {
    /// Location distribution of an activity, as `(location index, p)`.
    pub fn activity_locations(&self, a: Activity) -> Vec<(usize, f64)> {
        match a {
            Activity::Home => vec![(self.home, 1.0)],
            Activity::Work => vec![(self.work, 1.0)],
            Activity::Leisure => {
                let w = &LEISURE_WEIGHTS[..self.leisure.len()];
                let total: f64 = w.iter().sum();
                self.leisure.iter().zip(w).map(|(&l, &p)| (l, p / total)).collect()
            }
            Activity::Errand => {
                let p = 1.0 / self.errands.len() as f64;
                self.errands.iter().map(|&l| (l, p)).collect()
            }
        }
    }

    /// Planned `(minute of day, activity)` visits for a weekday slot.
    pub fn day_plan(&self, weekday: i64) -> Vec<(i64, Activity)> {
        let mut plan = Vec::new();
        let evening = self.evening_days.contains(&weekday);
        if weekday < 5 {
            plan.push((8 * 60 + 30 + self.work_offset_min, Activity::Work));
            if self.lunch_out {
                plan.push((12 * 60, Activity::Errand));
                plan.push((12 * 60 + 50, Activity::Work));
            }
            plan.push((self.work_end_hour * 60 + self.work_offset_min / 2, Activity::Home));
            if evening {
                plan.push((19 * 60 + 30, Activity::Leisure));
                plan.push((22 * 60, Activity::Home));
            }
        } else if self.weekend_active {
            plan.push((10 * 60 + 30, Activity::Leisure));
            plan.push((14 * 60 + 30, Activity::Errand));
            plan.push((17 * 60, Activity::Home));
            if weekday == 5 {
                plan.push((20 * 60, Activity::Leisure));
                plan.push((23 * 60, Activity::Home));
            }
        } else {
            plan.push((11 * 60, Activity::Errand));
            plan.push((12 * 60 + 30, Activity::Home));
        }
        plan
    }
}

/// One generated transition and the distribution it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthStep {
    pub agent: usize,
    /// `(location index, probability)`, summing to one.
    pub kernel: Vec<(usize, f64)>,
    pub chosen: usize,
}

#[derive(Clone, Debug)]
pub struct SynthTrace {
    pub dataset: CityDataset,
    pub archetypes: Vec<Archetype>,
    pub agents: Vec<Agent>,
    /// Every visit after each agent's initial home record, in generation
    /// order.
    pub steps: Vec<SynthStep>,
}

fn weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn travel_minutes(a: MercatorPoint, b: MercatorPoint) -> f64 {
    5.0 + a.distance(&b) / 400.0
}

/// Kernel of one planned visit: the planned activity with probability
/// `1 - noise`, otherwise a uniformly chosen noise activity.
fn visit_kernel(agent: &Agent, planned: Activity, noise: f64) -> Vec<(usize, f64)> {
    let mut acc: HashMap<usize, f64> = HashMap::new();
    for (l, p) in agent.activity_locations(planned) {
        *acc.entry(l).or_default() += (1.0 - noise) * p;
    }
    for a in NOISE_ACTIVITIES {
        for (l, p) in agent.activity_locations(a) {
            *acc.entry(l).or_default() += noise / NOISE_ACTIVITIES.len() as f64 * p;
        }
    }
    let mut out: Vec<(usize, f64)> = acc.into_iter().filter(|(_, p)| *p > 0.0).collect();
    out.sort_by_key(|e| e.0);
    out
}

pub fn synth_generate(spec: &SynthCitySpec, options: DatasetOptions) -> Result<CityDataset, HarnessError> {
    Ok(synth_trace(spec, options)?.dataset)
}

/// Generates the city and keeps the per-visit kernels for verification.
pub fn synth_trace(spec: &SynthCitySpec, options: DatasetOptions) -> Result<SynthTrace, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cells = spec.location_cells();
    let n = cells.len();
    let catalog = PoiCatalog::xian_chengdu();

    let mut archetypes: Vec<Archetype> =
        (0..n).map(|_| Archetype::ALL[weighted(&mut rng, &spec.archetype_mix)]).collect();
    if !archetypes.contains(&Archetype::Residential) {
        archetypes[0] = Archetype::Residential;
    }
    if n > 1 && archetypes.iter().all(|a| *a == Archetype::Residential) {
        archetypes[n - 1] = Archetype::Commercial;
    }
    let mut locations = Vec::with_capacity(n);
    for (i, arch) in archetypes.iter().enumerate() {
        let (r, c) = (cells[i].0 as i64, cells[i].1 as i64);
        let mut poi = PoiProfile::zeros(catalog.len());
        for (j, f) in poi.freq.iter_mut().enumerate() {
            *f = if j == arch.category() {
                rng.random_range(4..12) as f64
            } else if rng.random::<f64>() < 0.5 {
                rng.random_range(0..3) as f64
            } else {
                0.0
            };
        }
        locations.push(Location {
            id: i as LocationId + 1,
            center: virtual_center(spec.grid_rows, spec.grid_cols, spec.cell_m, r, c),
            grid_row: r,
            grid_col: c,
            poi,
        });
    }

    let of = |pred: &dyn Fn(Archetype) -> bool| -> Vec<usize> { (0..n).filter(|&i| pred(archetypes[i])).collect() };
    let residential = of(&|a| a == Archetype::Residential);
    let workplaces = of(&|a| a.is_workplace());
    let leisure_sites = of(&|a| a.is_leisure());
    let grid_dist = |a: usize, b: usize| -> usize {
        let ((ra, ca), (rb, cb)) = (cells[a], cells[b]);
        ra.abs_diff(rb) + ca.abs_diff(cb)
    };
    let mut agents = Vec::with_capacity(spec.n_agents);
    for _ in 0..spec.n_agents {
        let home = *residential.choose(&mut rng).expect("a residential location exists");
        let others: Vec<usize> = (0..n).filter(|&i| i != home).collect();
        let pick = |pool: &[usize], rng: &mut ChaCha8Rng| -> usize {
            let pool: Vec<usize> = pool.iter().copied().filter(|&i| i != home).collect();
            *pool.choose(rng).or_else(|| others.choose(rng)).unwrap_or(&home)
        };
        let work = pick(&workplaces, &mut rng);
        let leisure: Vec<usize> = (0..3).map(|_| pick(&leisure_sites, &mut rng)).collect();
        let mut near = others.clone();
        near.sort_by_key(|&i| (grid_dist(home, i), i));
        let mut errands: Vec<usize> = near.into_iter().take(3).collect();
        if errands.is_empty() {
            errands.push(home);
        }
        agents.push(Agent {
            home,
            work,
            leisure,
            errands,
            work_offset_min: rng.random_range(-60..=60),
            work_end_hour: rng.random_range(17..=18),
            lunch_out: rng.random::<f64>() < 0.5,
            evening_days: (0..5).filter(|_| rng.random::<f64>() < 0.3).collect(),
            weekend_active: rng.random::<f64>() < 0.7,
        });
    }

    let jitter = (spec.noise * 60.0).round() as i64;
    let mut steps = Vec::new();
    let mut users = Vec::with_capacity(spec.n_agents);
    for (ai, agent) in agents.iter().enumerate() {
        // (location index, arrival ts)
        let mut visits: Vec<(usize, i64)> = vec![(agent.home, spec.start_ts)];
        for day in 0..spec.n_days as i64 {
            let weekday = day % 7;
            for (minute, planned) in agent.day_plan(weekday) {
                let kernel = visit_kernel(agent, planned, spec.noise);
                let activity = if rng.random::<f64>() < spec.noise {
                    NOISE_ACTIVITIES[rng.random_range(0..NOISE_ACTIVITIES.len())]
                } else {
                    planned
                };
                let dist = agent.activity_locations(activity);
                let w: Vec<f64> = dist.iter().map(|e| e.1).collect();
                let loc = dist[weighted(&mut rng, &w)].0;
                let shift = if jitter > 0 { rng.random_range(-jitter..=jitter) } else { 0 };
                let prev = visits.last().unwrap().1;
                let ts = (spec.start_ts + day * 86_400 + (minute + shift) * 60).max(prev + 600);
                visits.push((loc, ts));
                steps.push(SynthStep { agent: ai, kernel, chosen: loc });
            }
        }
        let records = visits
            .iter()
            .enumerate()
            .map(|(k, &(loc, ts))| {
                let dur = match visits.get(k + 1) {
                    Some(&(next, nts)) => {
                        let gap = (nts - ts) as f64 / 60.0;
                        (gap - travel_minutes(locations[loc].center, locations[next].center)).max(5.0)
                    }
                    None => 600.0,
                };
                VisitRecord::from_stay(locations[loc].id, ts, dur.round())
            })
            .collect();
        users.push(UserTrajectory { user_id: format!("agent{ai:04}"), visits: records });
    }

    let mut dataset = CityDataset::assemble(spec.name.clone(), CoordKind::Virtual, locations, catalog, users, options)?;
    if spec.transform.is_some() || spec.permutation_seed.is_some() {
        let perm = match spec.permutation_seed {
            Some(s) => random_permutation(&dataset, s),
            None => dataset.locations.iter().map(|l| (l.id, l.id)).collect(),
        };
        dataset = clone_city(&dataset, &spec.transform.unwrap_or(AffineTransform::IDENTITY), &perm)?;
    }
    Ok(SynthTrace { dataset, archetypes, agents, steps })
}

/// A seeded shuffle of the dataset's location ids.
pub fn random_permutation(ds: &CityDataset, seed: u64) -> HashMap<LocationId, LocationId> {
    let ids: Vec<LocationId> = ds.locations.iter().map(|l| l.id).collect();
    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.into_iter().zip(shuffled).collect()
}

/// Same trajectories with transformed coordinates and renamed locations;
/// normalization and duration bounds are refit on the clone.
pub fn clone_city(
    ds: &CityDataset,
    transform: &AffineTransform,
    permutation: &HashMap<LocationId, LocationId>,
) -> Result<CityDataset, HarnessError> {
    transform.validate()?;
    let map = |id: LocationId| -> Result<LocationId, HarnessError> {
        permutation.get(&id).copied().ok_or_else(|| HarnessError::Config(format!("permutation misses location {id}")))
    };
    let mut seen = std::collections::HashSet::new();
    let locations = ds
        .locations
        .iter()
        .map(|l| {
            let id = map(l.id)?;
            if !seen.insert(id) {
                return Err(HarnessError::Config(format!("permutation maps two locations to {id}")));
            }
            Ok(Location { id, center: transform.apply(l.center), ..l.clone() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let users = ds
        .users
        .iter()
        .map(|u| {
            let visits = u
                .visits
                .iter()
                .map(|v| Ok(VisitRecord { location_id: map(v.location_id)?, ..*v }))
                .collect::<Result<_, HarnessError>>()?;
            Ok(UserTrajectory { user_id: u.user_id.clone(), visits })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(CityDataset::assemble(
        format!("{}-clone", ds.name),
        ds.coord_kind,
        locations,
        ds.catalog.clone(),
        users,
        ds.options.clone(),
    )?)
}

/// Pearson statistic of observed next-location counts against the counts
/// the kernels predict, with bins of expected count below 5 pooled.
/// Returns `(statistic, degrees of freedom)`.
pub fn kernel_chi_square(steps: &[SynthStep], n_locations: usize) -> (f64, usize) {
    let mut expected = vec![0.0; n_locations];
    let mut observed = vec![0.0; n_locations];
    for s in steps {
        for &(l, p) in &s.kernel {
            expected[l] += p;
        }
        observed[s.chosen] += 1.0;
    }
    let (mut stat, mut bins) = (0.0, 0usize);
    let (mut pool_e, mut pool_o) = (0.0, 0.0);
    for (e, o) in expected.iter().zip(&observed) {
        if *e >= 5.0 {
            stat += (o - e) * (o - e) / e;
            bins += 1;
        } else {
            pool_e += e;
            pool_o += o;
        }
    }
    if pool_e > 0.0 {
        stat += (pool_o - pool_e) * (pool_o - pool_e) / pool_e;
        bins += 1;
    }
    (stat, bins.saturating_sub(1))
}

/// Upper quantile of the chi-square distribution (Wilson-Hilferty), for a
/// standard normal quantile `z`.
pub fn chi_square_quantile(df: usize, z: f64) -> f64 {
    let k = df as f64;
    let c = 2.0 / (9.0 * k);
    k * (1.0 - c + z * c.sqrt()).powi(3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::WindowSpec;

    fn small_options() -> DatasetOptions {
        DatasetOptions { window: WindowSpec { history_len: 4, current_len: 2, stride: 1 }, ..Default::default() }
    }

    fn small_spec() -> SynthCitySpec {
        SynthCitySpec { grid_rows: 4, grid_cols: 4, n_agents: 12, n_days: 10, ..SynthCitySpec::toybench() }
    }

    #[test]
    fn noiseless_two_location_agent_is_periodic() {
        let spec = SynthCitySpec {
            grid_rows: 2,
            grid_cols: 2,
            cells: vec![[0, 0], [1, 1]],
            n_agents: 1, n_days: 21, noise: 0.0, ..SynthCitySpec::toybench() };
        let ds = synth_generate(&spec, small_options()).unwrap();
        let v = &ds.users[0].visits;
        let ids: std::collections::HashSet<_> = v.iter().map(|r| r.location_id).collect();
        assert_eq!(ids.len(), 2);
        // one week of visits repeats with a 7-day shift
        let week: Vec<_> = v.iter().skip(1).filter(|r| r.arrive_ts < spec.start_ts + 7 * 86_400).collect();
        let per_week = week.len();
        assert!(per_week > 5);
        for (k, r) in v.iter().enumerate().skip(1 + per_week).take(v.len() - 2 - per_week) {
            let prev = &v[k - per_week];
            assert_eq!(r.location_id, prev.location_id);
            assert_eq!(r.arrive_ts - prev.arrive_ts, 7 * 86_400);
            assert_eq!(r.duration_min, prev.duration_min);
        }
    }

    #[test]
    fn same_seed_same_city() {
        let a = synth_generate(&small_spec(), small_options()).unwrap();
        let b = synth_generate(&small_spec(), small_options()).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthCitySpec { seed: 8, ..small_spec() }, small_options()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn kernels_are_distributions() {
        let t = synth_trace(&small_spec(), small_options()).unwrap();
        for s in &t.steps {
            let total: f64 = s.kernel.iter().map(|e| e.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(s.kernel.iter().any(|e| e.0 == s.chosen && e.1 > 0.0));
        }
        assert_eq!(t.steps.len() + t.agents.len(), t.dataset.visit_count());
    }

    #[test]
    fn clone_identity_and_scale() {
        let ds = synth_generate(&small_spec(), small_options()).unwrap();
        let ident: HashMap<_, _> = ds.locations.iter().map(|l| (l.id, l.id)).collect();
        let same = clone_city(&ds, &AffineTransform::IDENTITY, &ident).unwrap();
        assert_eq!(same.locations, ds.locations);
        assert_eq!(same.users, ds.users);
        assert_eq!(same.pairs, ds.pairs);
        assert_eq!(same.norm_stats, ds.norm_stats);

        let t = AffineTransform { scale_x: 2.0, scale_y: 2.0, shift_x: 10.0, shift_y: -3.0 };
        let big = clone_city(&ds, &t, &ident).unwrap();
        for (a, b) in ds.locations.iter().zip(&big.locations) {
            for (c, d) in ds.locations.iter().zip(&big.locations).take(5) {
                assert!((d.center.distance(&b.center) - 2.0 * c.center.distance(&a.center)).abs() < 1e-9);
            }
        }
        assert!(clone_city(&ds, &AffineTransform { scale_x: 0.0, ..t }, &ident).is_err());
    }

    #[test]
    fn clone_normalizes_like_original() {
        let ds = synth_generate(&small_spec(), small_options()).unwrap();
        let perm = random_permutation(&ds, 3);
        let t = AffineTransform { scale_x: 3.7, scale_y: 0.4, shift_x: 1e6, shift_y: -5e5 };
        let cl = clone_city(&ds, &t, &perm).unwrap();
        assert_eq!(cl.split, ds.split);
        for l in &ds.locations {
            let c = cl.location(perm[&l.id]).unwrap();
            let a = ds.norm_stats.normalize(l.center);
            let b = cl.norm_stats.normalize(c.center);
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn frequencies_match_kernel() {
        let t = synth_trace(&SynthCitySpec::toybench(), DatasetOptions::default()).unwrap();
        assert!(t.steps.len() >= 10_000);
        let (stat, df) = kernel_chi_square(&t.steps[..10_000], t.dataset.locations.len());
        // standard normal quantile for p = 0.001
        let crit = chi_square_quantile(df, 3.090_232);
        assert!(df > 10);
        assert!(stat < crit, "chi-square {stat:.1} over {df} df exceeds {crit:.1}");
    }

    #[test]
    fn chi_square_quantile_reference() {
        // tabulated upper 0.1% points
        for (df, want) in [(10, 29.588_298), (100, 149.449_253)] {
            let got = chi_square_quantile(df, 3.090_232);
            assert!((got - want).abs() / want < 0.01, "{df}: {got} vs {want}");
        }
    }
}
