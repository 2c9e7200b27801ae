//! Per-record content embeddings: coordinates, hour, weekday and stay
//! duration, concatenated and projected to the backbone width.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{MercatorPoint, NormStats};
use crate::ingest::{DurBounds, LocationId, VisitRecord};
use crate::nn::layers::{gaussian, Linear, Mlp};
use crate::nn::{Graph, NodeId, ParamId, ParamStore, Tensor};

pub const HOUR_SLOTS: usize = 24;
pub const DAY_SLOTS: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("hour {0} outside 0..24")]
    Hour(u8),
    #[error("day {0} outside 0..8")]
    Day(u8),
    #[error("location {0} has no center")]
    UnknownLocation(LocationId),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid feature config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub d_t: usize,
    pub d_d: usize,
    pub d_dur: usize,
    pub d_xy: usize,
    pub d_model: usize,
    /// Hour and weekday segments.
    pub use_time: bool,
    pub use_duration: bool,
    /// Width of an extra segment appended after the duration segment
    /// (the linear POI mapping); 0 disables it.
    pub d_extra: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { d_t: 8, d_d: 8, d_dur: 4, d_xy: 16, d_model: 64, use_time: true, use_duration: true, d_extra: 0 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let widths = [self.d_t, self.d_d, self.d_dur, self.d_xy, self.d_model];
        if widths.contains(&0) {
            return Err(FeatureError::Config("embedding widths must be positive".into()));
        }
        Ok(())
    }

    pub fn concat_width(&self) -> usize {
        let mut w = self.d_xy + self.d_extra;
        if self.use_time {
            w += self.d_t + self.d_d;
        }
        if self.use_duration {
            w += self.d_dur;
        }
        w
    }
}

/// Model-ready inputs for a flat list of records.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordBatch {
    /// Normalized coordinates, one row per record.
    pub xy: Tensor,
    pub hours: Vec<usize>,
    pub days: Vec<usize>,
    /// Min-max scaled durations, clipped to `[0, 1]`.
    pub dur: Tensor,
}

impl RecordBatch {
    pub fn new<'a>(
        records: impl IntoIterator<Item = &'a VisitRecord>,
        center: impl Fn(LocationId) -> Option<MercatorPoint>,
        stats: &NormStats,
        bounds: &DurBounds,
    ) -> Result<Self, FeatureError> {
        let mut xy = Vec::new();
        let mut hours = Vec::new();
        let mut days = Vec::new();
        let mut dur = Vec::new();
        for r in records {
            if r.hour as usize >= HOUR_SLOTS {
                return Err(FeatureError::Hour(r.hour));
            }
            if r.day_of_week as usize >= DAY_SLOTS {
                return Err(FeatureError::Day(r.day_of_week));
            }
            let c = center(r.location_id).ok_or(FeatureError::UnknownLocation(r.location_id))?;
            xy.extend(stats.normalize(c));
            hours.push(r.hour as usize);
            days.push(r.day_of_week as usize);
            dur.push(bounds.scale(r.duration_min));
        }
        let n = hours.len();
        Ok(Self { xy: Tensor::from_vec(n, 2, xy), hours, days, dur: Tensor::from_vec(n, 1, dur) })
    }

    pub fn len(&self) -> usize {
        self.hours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hours.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    History,
    Current,
}

#[derive(Clone, Debug)]
pub struct FeatureTables {
    pub config: FeatureConfig,
    pub time_table: Option<ParamId>,
    pub day_table: Option<ParamId>,
    pub dur_map: Option<Linear>,
    pub xy_map: Linear,
    pub proj_history: Mlp,
    pub proj_current: Mlp,
}

impl FeatureTables {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: FeatureConfig) -> Result<Self, FeatureError> {
        config.validate()?;
        let (time_table, day_table) = if config.use_time {
            (
                Some(store.add("feat.time", gaussian(rng, HOUR_SLOTS, config.d_t, 1.0), true)),
                Some(store.add("feat.day", gaussian(rng, DAY_SLOTS, config.d_d, 1.0), true)),
            )
        } else {
            (None, None)
        };
        let dur_map = config.use_duration.then(|| Linear::new(store, rng, "feat.dur", 1, config.d_dur, true));
        let xy_map = Linear::new(store, rng, "feat.xy", 2, config.d_xy, true);
        let w = config.concat_width();
        let d = config.d_model;
        let proj_history = Mlp::new(store, rng, "feat.proj_h", w, 2 * d, d, true);
        let proj_current = Mlp::new(store, rng, "feat.proj_c", w, 2 * d, d, true);
        Ok(Self { config, time_table, day_table, dur_map, xy_map, proj_history, proj_current })
    }

    /// Concatenation `xy | hour | day | duration | extra` per record, with
    /// disabled segments left out.
    pub fn embed(&self, g: &mut Graph<'_>, batch: &RecordBatch, extra: Option<NodeId>) -> NodeId {
        let xy = g.constant(batch.xy.clone());
        let mut parts = vec![self.xy_map.forward(g, xy)];
        if let (Some(t), Some(d)) = (self.time_table, self.day_table) {
            parts.push(g.gather_param(t, &batch.hours));
            parts.push(g.gather_param(d, &batch.days));
        }
        if let Some(m) = &self.dur_map {
            let dur = g.constant(batch.dur.clone());
            parts.push(m.forward(g, dur));
        }
        parts.extend(extra);
        g.concat_cols(&parts)
    }

    pub fn project(&self, g: &mut Graph<'_>, x: NodeId, branch: Branch) -> NodeId {
        match branch {
            Branch::History => self.proj_history.forward(g, x),
            Branch::Current => self.proj_current.forward(g, x),
        }
    }

    /// Eager concatenated embeddings, one row per record.
    pub fn embed_records(&self, store: &ParamStore, batch: &RecordBatch) -> Tensor {
        let mut g = Graph::new(store);
        let out = self.embed(&mut g, batch, None);
        g.value(out).clone()
    }

    /// Eager per-branch projection to the model width.
    pub fn project_content(
        &self,
        store: &ParamStore,
        history: &Tensor,
        current: &Tensor,
    ) -> Result<(Tensor, Tensor), FeatureError> {
        let w = self.config.concat_width();
        for t in [history, current] {
            if t.cols() != w {
                return Err(FeatureError::Shape(format!("expected width {w}, got {}", t.cols())));
            }
        }
        let mut g = Graph::new(store);
        let h = g.constant(history.clone());
        let c = g.constant(current.clone());
        let h = self.project(&mut g, h, Branch::History);
        let c = self.project(&mut g, c, Branch::Current);
        Ok((g.value(h).clone(), g.value(c).clone()))
    }
}

/// Elementwise sum of content and POI rows for one branch.
pub fn compose_final(content: &Tensor, poi: &Tensor) -> Result<Tensor, FeatureError> {
    if content.shape() != poi.shape() {
        return Err(FeatureError::Shape(format!("{:?} vs {:?}", content.shape(), poi.shape())));
    }
    let mut out = content.clone();
    out.add_assign(poi);
    Ok(out)
}
