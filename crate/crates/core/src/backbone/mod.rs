//! Compact pre-norm transformer over prompt, history and current rows,
//! regressing the next visit's coordinates.

mod checkpoint;
mod train;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::{Branch, FeatureConfig, FeatureError, FeatureTables, RecordBatch};
use crate::geo::{MercatorPoint, NormStats};
use crate::ingest::{CityDataset, DurBounds, LocationId, TrajectoryPair};
use crate::nn::layers::{gaussian, orthogonal, LayerNormParams, Linear, Mlp};
use crate::nn::params::hex;
use crate::nn::{AttnLayout, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::poi::{encode, encode_unpadded, LinearPoi, PoiConfig, PoiEmbedder, TOKEN_ROWS};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use train::{
    grad_check, train, EpochMetrics, GradCheckConfig, GradCheckEntry, GradCheckReport, Schedule, TrainError,
    TrainOutcome,
};

pub const MAX_PROMPT_TOKENS: usize = 64;

pub const DEFAULT_PROMPT: &str = "Task: given a person's earlier visits and their most recent visits, \
estimate the planar coordinates of the next place they will go. \
Data: every visit is described by normalized map coordinates, the hour of arrival, \
the day of the week, how long the stay lasted, and the kinds of venues found nearby. \
Use the earlier visits for habits and routine, and the recent visits for the present intent.";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("sequence of {len} rows exceeds max_seq {max}")]
    SeqTooLong { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("location {0} is not in the city table")]
    UnknownLocation(LocationId),
    #[error("POI profile width {got} does not match model categories {want}")]
    PoiWidth { got: usize, want: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeMode {
    /// Attention, feed-forward and token table fixed.
    FrozenPartial,
    FullFinetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    RandomFrozen,
    SyntheticPretrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoiMode {
    /// Description embeddings added to the content rows.
    Semantic,
    /// Linear map of the raw profile appended to the content features.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branches {
    Both,
    HistoryOnly,
    CurrentOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub freeze_mode: FreezeMode,
    pub init_mode: InitMode,
    /// Steps of next-token pretraining for `synthetic-pretrain`.
    pub pretrain_steps: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            max_seq: 128,
            freeze_mode: FreezeMode::FrozenPartial,
            init_mode: InitMode::RandomFrozen,
            pretrain_steps: 200,
        }
    }
}

/// Everything needed to rebuild the parameter layout of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub history_len: usize,
    pub current_len: usize,
    pub poi_categories: usize,
    pub poi_mode: PoiMode,
    /// Width of the linear POI segment when `poi_mode = linear`.
    pub d_poi: usize,
    pub use_prompt: bool,
    pub prompt_text: String,
    pub branches: Branches,
    pub token_table_trainable: bool,
    pub features: FeatureConfig,
    pub backbone: BackboneConfig,
    pub poi: PoiConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history_len: 30,
            current_len: 6,
            poi_categories: 5,
            poi_mode: PoiMode::Semantic,
            d_poi: 8,
            use_prompt: true,
            prompt_text: DEFAULT_PROMPT.to_string(),
            branches: Branches::Both,
            token_table_trainable: false,
            features: FeatureConfig::default(),
            backbone: BackboneConfig::default(),
            poi: PoiConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Feature config with the model width and POI segment filled in.
    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            d_model: self.backbone.d_model,
            d_extra: if self.poi_mode == PoiMode::Linear { self.d_poi } else { 0 },
            ..self.features
        }
    }

    pub fn prompt(&self) -> PromptPrefix {
        if self.use_prompt {
            PromptPrefix::new(&self.prompt_text)
        } else {
            PromptPrefix::empty()
        }
    }

    pub fn history_rows(&self) -> usize {
        if self.branches == Branches::CurrentOnly {
            0
        } else {
            self.history_len
        }
    }

    pub fn current_rows(&self) -> usize {
        if self.branches == Branches::HistoryOnly {
            0
        } else {
            self.current_len
        }
    }

    pub fn seq_rows(&self) -> usize {
        self.prompt().len() + self.history_rows() + self.current_rows()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let b = &self.backbone;
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if b.layers == 0 || b.heads == 0 || b.d_model == 0 || b.d_ff == 0 {
            return bad("backbone sizes must be positive");
        }
        if b.d_model % b.heads != 0 {
            return bad("d_model must be divisible by heads");
        }
        if self.history_len == 0 || self.current_len == 0 {
            return bad("history_len and current_len must be positive");
        }
        if self.poi_categories == 0 {
            return bad("poi_categories must be positive");
        }
        if self.poi_mode == PoiMode::Linear && self.d_poi == 0 {
            return bad("d_poi must be positive for the linear POI mode");
        }
        if self.poi.desc_len == 0 {
            return bad("desc_len must be positive");
        }
        self.feature_config().validate()?;
        let len = self.seq_rows();
        if len > b.max_seq {
            return Err(ModelError::SeqTooLong { len, max: b.max_seq });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPrefix {
    pub text: String,
    pub token_ids: Vec<usize>,
}

impl PromptPrefix {
    pub fn new(text: &str) -> Self {
        Self { text: text.to_string(), token_ids: encode_unpadded(text, MAX_PROMPT_TOKENS) }
    }

    pub fn empty() -> Self {
        Self { text: String::new(), token_ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNormParams,
    pub ff: Mlp,
}

struct Layout {
    batch: usize,
    seq: usize,
    prompt: usize,
    heads: usize,
}

impl Block {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, i: usize, cfg: &BackboneConfig) -> Self {
        let d = cfg.d_model;
        let mut attn = |name: &str| {
            let w = orthogonal(rng, d, 1.0);
            Linear::from_weights(store, &format!("blk{i}.attn.{name}"), w, Tensor::zeros(1, d), true)
        };
        let (wq, wk, wv, wo) = (attn("q"), attn("k"), attn("v"), attn("o"));
        Self {
            ln1: LayerNormParams::new(store, &format!("blk{i}.ln1"), d, true),
            wq,
            wk,
            wv,
            wo,
            ln2: LayerNormParams::new(store, &format!("blk{i}.ln2"), d, true),
            ff: Mlp::new(store, rng, &format!("blk{i}.ff"), d, cfg.d_ff, d, true),
        }
    }

    fn attend(&self, g: &mut Graph<'_>, x: NodeId, prefix: Option<(NodeId, NodeId)>, layout: AttnLayout) -> NodeId {
        let h = self.ln1.forward(g, x);
        let q = self.wq.forward(g, h);
        let k = self.wk.forward(g, h);
        let v = self.wv.forward(g, h);
        let a = g.attention(q, k, v, prefix, layout);
        let a = self.wo.forward(g, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }

    /// Prefix rows are shared by every sequence of the batch; they attend
    /// causally among themselves and are visible to every trajectory row.
    fn forward(&self, g: &mut Graph<'_>, x: NodeId, xp: Option<NodeId>, l: &Layout) -> (NodeId, Option<NodeId>) {
        let (kv, xp_next) = match xp {
            Some(xp) => {
                let h = self.ln1.forward(g, xp);
                let k = self.wk.forward(g, h);
                let v = self.wv.forward(g, h);
                let next = self.attend(g, xp, None, AttnLayout { batch: 1, seq: l.prompt, heads: l.heads });
                (Some((k, v)), Some(next))
            }
            None => (None, None),
        };
        let x = self.attend(g, x, kv, AttnLayout { batch: l.batch, seq: l.seq, heads: l.heads });
        (x, xp_next)
    }
}

#[derive(Clone, Debug)]
pub enum PoiBranch {
    Semantic(PoiEmbedder),
    Linear(LinearPoi),
}

/// Trained or initialized model with its parameters and the statistics
/// needed at inference.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub token_table: ParamId,
    pub features: FeatureTables,
    pub poi: PoiBranch,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNormParams,
    pub head: Mlp,
    pub prompt: PromptPrefix,
    pub norm_stats: NormStats,
    pub dur_bounds: DurBounds,
}

/// Whether a parameter belongs to the fixed core in frozen-partial mode.
pub fn is_core_param(name: &str) -> bool {
    name == "tok.table" || (name.starts_with("blk") && (name.contains(".attn.") || name.contains(".ff.")))
}

impl ModelState {
    /// Parameter layout with seeded initial values; no pretraining and
    /// every tensor trainable.
    pub fn skeleton(config: ModelConfig, seed: u64, norm_stats: NormStats, dur_bounds: DurBounds) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.backbone.d_model;
        let token_table = store.add("tok.table", gaussian(&mut rng, TOKEN_ROWS, d, 1.0), true);
        let features = FeatureTables::new(&mut store, &mut rng, config.feature_config())?;
        let poi = match config.poi_mode {
            PoiMode::Semantic => PoiBranch::Semantic(PoiEmbedder::from_tokens(
                &mut store,
                &mut rng,
                Vec::new(),
                token_table,
                d,
                config.poi,
                true,
            )),
            PoiMode::Linear => {
                PoiBranch::Linear(LinearPoi::new(&mut store, &mut rng, config.poi_categories, config.d_poi, true))
            }
        };
        let pos = store.add("pos", gaussian(&mut rng, config.backbone.max_seq, d, 0.1), true);
        let blocks = (0..config.backbone.layers).map(|i| Block::new(&mut store, &mut rng, i, &config.backbone)).collect();
        let ln_f = LayerNormParams::new(&mut store, "ln_f", d, true);
        let head = Mlp::new(&mut store, &mut rng, "head", d, d, 2, true);
        let prompt = config.prompt();
        Ok(Self { config, store, token_table, features, poi, pos, blocks, ln_f, head, prompt, norm_stats, dur_bounds })
    }

    /// Fresh model: skeleton, optional synthetic pretraining of the
    /// backbone, then the freeze partition.
    pub fn new(config: ModelConfig, seed: u64, norm_stats: NormStats, dur_bounds: DurBounds) -> Result<Self, ModelError> {
        let mut state = Self::skeleton(config, seed, norm_stats, dur_bounds)?;
        if state.config.backbone.init_mode == InitMode::SyntheticPretrain {
            train::pretrain_backbone(&mut state, seed ^ 0x5eed_0f_c0de)?;
        }
        state.apply_freeze_mode();
        Ok(state)
    }

    pub fn apply_freeze_mode(&mut self) {
        let full = self.config.backbone.freeze_mode == FreezeMode::FullFinetune;
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.name(id);
            let trainable = if name == "tok.table" {
                full || self.config.token_table_trainable
            } else {
                full || !is_core_param(name)
            };
            self.store.set_trainable(id, trainable);
        }
    }

    pub fn d_model(&self) -> usize {
        self.config.backbone.d_model
    }

    /// Rounds every parameter to single precision, matching what a
    /// checkpoint round trip yields.
    pub fn quantize_f32(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            for v in self.store.value_mut(id).data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    fn run_stack(&self, g: &mut Graph<'_>, mut x: NodeId, mut xp: Option<NodeId>, l: &Layout) -> Result<NodeId, ModelError> {
        for (i, blk) in self.blocks.iter().enumerate() {
            let mark = g.len();
            (x, xp) = blk.forward(g, x, xp, l);
            if g.first_non_finite(mark).is_some() {
                return Err(ModelError::NonFinite { layer: i });
            }
        }
        Ok(x)
    }

    /// Final representations `[batch, d_model]` for prepared inputs.
    pub fn encode(&self, g: &mut Graph<'_>, view: &CityView<'_>, batch: &PreparedBatch) -> Result<NodeId, ModelError> {
        let (m, n, b) = (batch.history_rows, batch.current_rows, batch.len());
        let (mut extra_h, mut extra_c, mut poi_h, mut poi_c) = (None, None, None, None);
        match &self.poi {
            PoiBranch::Semantic(e) => {
                let loc = e.location_embeddings_with(g, &view.tokens, &batch.poi_weights);
                if m > 0 {
                    let h = e.head_history.forward(g, loc);
                    poi_h = Some(g.gather(h, &batch.history_slots));
                }
                if n > 0 {
                    let c = e.head_current.forward(g, loc);
                    poi_c = Some(g.gather(c, &batch.current_slots));
                }
            }
            PoiBranch::Linear(l) => {
                let lin = l.forward(g, &batch.poi_weights);
                if m > 0 {
                    extra_h = Some(g.gather(lin, &batch.history_slots));
                }
                if n > 0 {
                    extra_c = Some(g.gather(lin, &batch.current_slots));
                }
            }
        }
        let mut parts = Vec::new();
        for (records, extra, poi, branch) in [
            (&batch.history, extra_h, poi_h, Branch::History),
            (&batch.current, extra_c, poi_c, Branch::Current),
        ] {
            if let Some(records) = records {
                let e = self.features.embed(g, records, extra);
                let e = self.features.project(g, e, branch);
                parts.push(match poi {
                    Some(p) => g.add(e, p),
                    None => e,
                });
            }
        }
        let stacked = g.concat_rows(&parts);
        let s = m + n;
        let order: Vec<usize> = (0..b)
            .flat_map(|i| (0..s).map(move |t| if t < m { i * m + t } else { b * m + i * n + (t - m) }))
            .collect();
        let x = g.gather(stacked, &order);
        let p = self.prompt.len();
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| p..p + s).collect();
        let pe = g.gather_param(self.pos, &pos_idx);
        let x = g.add(x, pe);
        let xp = (p > 0).then(|| {
            let tok = g.gather_param(self.token_table, &self.prompt.token_ids);
            let pp = g.gather_param(self.pos, &(0..p).collect::<Vec<_>>());
            g.add(tok, pp)
        });
        if g.first_non_finite(0).is_some() {
            return Err(ModelError::NonFinite { layer: 0 });
        }
        let x = self.run_stack(g, x, xp, &Layout { batch: b, seq: s, prompt: p, heads: self.config.backbone.heads })?;
        let last: Vec<usize> = (0..b).map(|i| i * s + s - 1).collect();
        let v = g.gather(x, &last);
        Ok(self.ln_f.forward(g, v))
    }

    /// Normalized coordinate predictions `[batch, 2]`.
    pub fn predict_normalized(&self, g: &mut Graph<'_>, view: &CityView<'_>, batch: &PreparedBatch) -> Result<NodeId, ModelError> {
        let v = self.encode(g, view, batch)?;
        Ok(self.head.forward(g, v))
    }

    /// Mean Euclidean distance in meters over the batch.
    pub fn loss_node(&self, g: &mut Graph<'_>, view: &CityView<'_>, batch: &PreparedBatch) -> Result<NodeId, ModelError> {
        let pred = self.predict_normalized(g, view, batch)?;
        Ok(g.euclidean_loss(pred, &batch.targets, view.stats.scale(), view.stats.offset()))
    }

    pub fn predict_batch(&self, view: &CityView<'_>, pairs: &[&TrajectoryPair]) -> Result<Vec<MercatorPoint>, ModelError> {
        let batch = view.prepare(self, pairs)?;
        let mut g = Graph::new(&self.store);
        let pred = self.predict_normalized(&mut g, view, &batch)?;
        let out = g.value(pred);
        Ok((0..out.rows()).map(|r| view.stats.denormalize([out.get(r, 0), out.get(r, 1)])).collect())
    }

    pub fn predict_coords(&self, view: &CityView<'_>, pair: &TrajectoryPair) -> Result<MercatorPoint, ModelError> {
        Ok(self.predict_batch(view, &[pair])?[0])
    }

    /// Prompt rows (token embeddings, without positions) and the final
    /// history and current embeddings of one pair.
    pub fn embed_pair(&self, view: &CityView<'_>, pair: &TrajectoryPair) -> Result<(Tensor, Tensor, Tensor), ModelError> {
        let batch = view.prepare(self, &[pair])?;
        let mut g = Graph::new(&self.store);
        let d = self.d_model();
        let prefix = g.gather_param(self.token_table, &self.prompt.token_ids);
        let prefix = g.value(prefix).clone();
        let empty = Tensor::zeros(0, d);
        let poi = |g: &mut Graph<'_>, slots: &[usize], branch: Branch| -> (Option<NodeId>, Option<NodeId>) {
            match &self.poi {
                PoiBranch::Semantic(e) => {
                    let loc = e.location_embeddings_with(g, &view.tokens, &batch.poi_weights);
                    let head = if branch == Branch::History { &e.head_history } else { &e.head_current };
                    let h = head.forward(g, loc);
                    (Some(g.gather(h, slots)), None)
                }
                PoiBranch::Linear(l) => {
                    let lin = l.forward(g, &batch.poi_weights);
                    (None, Some(g.gather(lin, slots)))
                }
            }
        };
        let mut rows = Vec::new();
        for (records, slots, branch) in [
            (&batch.history, &batch.history_slots, Branch::History),
            (&batch.current, &batch.current_slots, Branch::Current),
        ] {
            rows.push(match records {
                Some(records) => {
                    let (add, extra) = poi(&mut g, slots, branch);
                    let e = self.features.embed(&mut g, records, extra);
                    let e = self.features.project(&mut g, e, branch);
                    let e = match add {
                        Some(p) => g.add(e, p),
                        None => e,
                    };
                    g.value(e).clone()
                }
                None => empty.clone(),
            });
        }
        let cur = rows.pop().unwrap();
        let his = rows.pop().unwrap();
        Ok((prefix, his, cur))
    }

    /// Final-position representation of an assembled `[rows, d_model]`
    /// sequence; positions are added here.
    pub fn forward(&self, seq: &Tensor) -> Result<Vec<f64>, ModelError> {
        let rows = seq.rows();
        if rows > self.config.backbone.max_seq {
            return Err(ModelError::SeqTooLong { len: rows, max: self.config.backbone.max_seq });
        }
        if rows == 0 || seq.cols() != self.d_model() {
            return Err(ModelError::Config(format!("sequence shape {:?}", seq.shape())));
        }
        let mut g = Graph::new(&self.store);
        let x = g.constant(seq.clone());
        let pe = g.gather_param(self.pos, &(0..rows).collect::<Vec<_>>());
        let x = g.add(x, pe);
        let l = Layout { batch: 1, seq: rows, prompt: 0, heads: self.config.backbone.heads };
        let x = self.run_stack(&mut g, x, None, &l)?;
        let v = g.gather(x, &[rows - 1]);
        let v = self.ln_f.forward(&mut g, v);
        Ok(g.value(v).row(0).to_vec())
    }

    /// Coordinates from a final representation.
    pub fn head_output(&self, v: &[f64]) -> [f64; 2] {
        let mut g = Graph::new(&self.store);
        let x = g.constant(Tensor::row_vector(v));
        let y = self.head.forward(&mut g, x);
        let y = g.value(y);
        [y.get(0, 0), y.get(0, 1)]
    }
}

/// Rows `prefix | history | current`.
pub fn assemble_input(prefix: &Tensor, his: &Tensor, cur: &Tensor, max_seq: usize) -> Result<Tensor, ModelError> {
    let d = prefix.cols().max(his.cols()).max(cur.cols());
    let mut data = Vec::new();
    let mut rows = 0;
    for t in [prefix, his, cur] {
        if t.rows() > 0 && t.cols() != d {
            return Err(ModelError::Config(format!("width {} does not match {d}", t.cols())));
        }
        data.extend_from_slice(t.data());
        rows += t.rows();
    }
    if rows > max_seq {
        return Err(ModelError::SeqTooLong { len: rows, max: max_seq });
    }
    Ok(Tensor::from_vec(rows, d, data))
}

/// Euclidean distance in meters.
pub fn loss(pred: MercatorPoint, truth: MercatorPoint) -> f64 {
    pred.distance(&truth)
}

/// A city as seen by a model: the statistics used to normalize inputs and
/// the POI data of every location.
#[derive(Clone, Debug)]
pub struct CityView<'a> {
    pub dataset: &'a CityDataset,
    pub stats: NormStats,
    pub bounds: DurBounds,
    pub tokens: Vec<Vec<usize>>,
    index: HashMap<LocationId, usize>,
    poi_rows: Vec<Vec<f64>>,
}

/// Model inputs for a batch of pairs.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub history: Option<RecordBatch>,
    pub current: Option<RecordBatch>,
    pub history_rows: usize,
    pub current_rows: usize,
    /// POI weights `[unique locations, categories]`.
    pub poi_weights: Tensor,
    pub history_slots: Vec<usize>,
    pub current_slots: Vec<usize>,
    /// Target centers in meters.
    pub targets: Vec<[f64; 2]>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

impl<'a> CityView<'a> {
    pub fn new(dataset: &'a CityDataset, stats: NormStats, bounds: DurBounds, poi: &PoiConfig) -> Self {
        let tokens = dataset.catalog.categories.iter().map(|c| encode(&c.description, poi.desc_len)).collect();
        Self {
            dataset,
            stats,
            bounds,
            tokens,
            index: dataset.location_index(),
            poi_rows: dataset.locations.iter().map(|l| l.poi.weights(poi.normalize_freq)).collect(),
        }
    }

    /// View using the dataset's own statistics.
    pub fn native(dataset: &'a CityDataset, poi: &PoiConfig) -> Self {
        Self::new(dataset, dataset.norm_stats, dataset.dur_bounds, poi)
    }

    pub fn location_slot(&self, id: LocationId) -> Result<usize, ModelError> {
        self.index.get(&id).copied().ok_or(ModelError::UnknownLocation(id))
    }

    pub fn prepare(&self, state: &ModelState, pairs: &[&TrajectoryPair]) -> Result<PreparedBatch, ModelError> {
        let cfg = &state.config;
        let (m, n) = (cfg.history_rows(), cfg.current_rows());
        let r = self.tokens.len();
        if state.config.poi_mode == PoiMode::Linear && r != cfg.poi_categories {
            return Err(ModelError::PoiWidth { got: r, want: cfg.poi_categories });
        }
        for p in pairs {
            if p.history.len() != cfg.history_len || p.current.len() != cfg.current_len {
                return Err(ModelError::Config(format!(
                    "pair windows {}+{} do not match the model's {}+{}",
                    p.history.len(),
                    p.current.len(),
                    cfg.history_len,
                    cfg.current_len
                )));
            }
        }
        let mut uniq: Vec<usize> = Vec::new();
        let mut slot_of: HashMap<usize, usize> = HashMap::new();
        let mut slot = |id: LocationId| -> Result<usize, ModelError> {
            let li = self.location_slot(id)?;
            Ok(*slot_of.entry(li).or_insert_with(|| {
                uniq.push(li);
                uniq.len() - 1
            }))
        };
        let mut history_slots = Vec::new();
        let mut current_slots = Vec::new();
        for p in pairs {
            if m > 0 {
                for v in &p.history {
                    history_slots.push(slot(v.location_id)?);
                }
            }
            if n > 0 {
                for v in &p.current {
                    current_slots.push(slot(v.location_id)?);
                }
            }
        }
        let mut w = Vec::with_capacity(uniq.len() * r);
        for &li in &uniq {
            w.extend_from_slice(&self.poi_rows[li]);
        }
        let poi_weights = Tensor::from_vec(uniq.len(), r, w);
        let center = |id: LocationId| self.index.get(&id).map(|&i| self.dataset.locations[i].center);
        let history = (m > 0)
            .then(|| RecordBatch::new(pairs.iter().flat_map(|p| &p.history), center, &self.stats, &self.bounds))
            .transpose()?;
        let current = (n > 0)
            .then(|| RecordBatch::new(pairs.iter().flat_map(|p| &p.current), center, &self.stats, &self.bounds))
            .transpose()?;
        let targets = pairs
            .iter()
            .map(|p| {
                let c = center(p.target).ok_or(ModelError::UnknownLocation(p.target))?;
                Ok([c.x, c.y])
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(PreparedBatch {
            history,
            current,
            history_rows: m,
            current_rows: n,
            poi_weights,
            history_slots,
            current_slots,
            targets,
        })
    }
}

#[cfg(test)]
mod tests;
