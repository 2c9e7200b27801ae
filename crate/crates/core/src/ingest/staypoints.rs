use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geo::{geodesic_distance, GeoPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawPing {
    pub user_id: String,
    pub timestamp: i64,
    pub position: GeoPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaypointParams {
    /// A silence longer than this closes the open staypoint.
    pub time_gap_max_s: i64,
    /// Moving farther than this from the running centroid closes it.
    pub dist_max_m: f64,
    /// Shorter clusters are dropped.
    pub min_stay_s: i64,
}

impl Default for StaypointParams {
    fn default() -> Self {
        Self { time_gap_max_s: 3600, dist_max_m: 300.0, min_stay_s: 20 * 60 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Staypoint {
    pub centroid: GeoPoint,
    pub arrive_ts: i64,
    pub duration_s: i64,
    pub n_pings: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StaypointOutput {
    pub staypoints: Vec<Staypoint>,
    /// Pings dropped for non-finite or out-of-band coordinates.
    pub rejected: usize,
}

struct Cluster {
    first_ts: i64,
    last_ts: i64,
    sum_lon: f64,
    sum_lat: f64,
    n: usize,
}

impl Cluster {
    fn start(p: &RawPing) -> Self {
        Self { first_ts: p.timestamp, last_ts: p.timestamp, sum_lon: p.position.lon, sum_lat: p.position.lat, n: 1 }
    }

    fn centroid(&self) -> GeoPoint {
        GeoPoint { lon: self.sum_lon / self.n as f64, lat: self.sum_lat / self.n as f64 }
    }

    fn push(&mut self, p: &RawPing) {
        self.last_ts = p.timestamp;
        self.sum_lon += p.position.lon;
        self.sum_lat += p.position.lat;
        self.n += 1;
    }

    fn close(self, params: &StaypointParams, out: &mut Vec<Staypoint>) {
        let duration_s = self.last_ts - self.first_ts;
        if duration_s >= params.min_stay_s {
            out.push(Staypoint { centroid: self.centroid(), arrive_ts: self.first_ts, duration_s, n_pings: self.n });
        }
    }
}

/// Single-user staypoint detection over time-sorted pings.
pub fn extract_staypoints(pings: &[RawPing], params: &StaypointParams) -> StaypointOutput {
    let mut out = StaypointOutput::default();
    let mut open: Option<Cluster> = None;
    for p in pings {
        if p.position.validate().is_err() {
            out.rejected += 1;
            continue;
        }
        open = Some(match open.take() {
            None => Cluster::start(p),
            Some(mut c) => {
                let gap = p.timestamp - c.last_ts;
                if gap > params.time_gap_max_s || geodesic_distance(c.centroid(), p.position) > params.dist_max_m {
                    c.close(params, &mut out.staypoints);
                    Cluster::start(p)
                } else {
                    c.push(p);
                    c
                }
            }
        });
    }
    if let Some(c) = open {
        c.close(params, &mut out.staypoints);
    }
    out
}

/// Groups pings by user (ordered by user id), sorts each user's pings by
/// time and runs [`extract_staypoints`] per user.
pub fn extract_staypoints_by_user(pings: Vec<RawPing>, params: &StaypointParams) -> BTreeMap<String, StaypointOutput> {
    let mut by_user: BTreeMap<String, Vec<RawPing>> = BTreeMap::new();
    for p in pings {
        by_user.entry(p.user_id.clone()).or_default().push(p);
    }
    by_user
        .into_iter()
        .map(|(u, mut ps)| {
            ps.sort_by_key(|p| p.timestamp);
            (u, extract_staypoints(&ps, params))
        })
        .collect()
}
