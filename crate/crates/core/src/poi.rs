//! POI category catalog, per-location frequency profiles and the
//! description-based POI embeddings.
//!
//! Each category's natural-language description is tokenized into a fixed
//! number of token ids and looked up in the shared token table. A location's
//! embedding is the frequency-weighted sum of those token matrices,
//! mean-pooled over tokens and passed through a perceptron; trajectories then
//! run the per-record embeddings through separate history and current heads.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Location, LocationId, TrajectoryPair, VisitRecord};
use crate::nn::layers::{Linear, Mlp};
use crate::nn::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// Hash buckets of the tokenizer; row 0 of the token table is padding.
pub const HASH_VOCAB: usize = 4096;
pub const PAD_TOKEN: usize = 0;
pub const TOKEN_ROWS: usize = HASH_VOCAB + 1;

#[derive(Debug, Error, PartialEq)]
pub enum PoiError {
    #[error("profile has {got} entries, catalog has {want} categories")]
    LengthMismatch { got: usize, want: usize },
    #[error("no POI profile for location {0}")]
    MissingProfile(LocationId),
    #[error("invalid catalog: {0}")]
    Catalog(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoiCategory {
    pub id: usize,
    pub name: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoiCatalog {
    pub categories: Vec<PoiCategory>,
}

impl PoiCatalog {
    pub fn new(mut categories: Vec<PoiCategory>) -> Result<Self, PoiError> {
        categories.sort_by_key(|c| c.id);
        for (i, c) in categories.iter().enumerate() {
            if c.id != i {
                return Err(PoiError::Catalog(format!("category ids must be dense from 0, found {} at {i}", c.id)));
            }
            if c.description.trim().is_empty() {
                return Err(PoiError::Catalog(format!("category {} has an empty description", c.id)));
            }
        }
        if categories.is_empty() {
            return Err(PoiError::Catalog("catalog is empty".into()));
        }
        Ok(Self { categories })
    }

    fn from_table(rows: &[(&str, &str)]) -> Self {
        Self {
            categories: rows
                .iter()
                .enumerate()
                .map(|(id, (name, description))| PoiCategory { id, name: (*name).into(), description: (*description).into() })
                .collect(),
        }
    }

    /// Five clustered categories used for the Xi'an and Chengdu datasets.
    pub fn xian_chengdu() -> Self {
        Self::from_table(&[
            ("Entertainment", "Entertainment: This category combines scenic spots with sports and recreation services for leisure activities."),
            ("Commercial", "Commercial: It includes businesses, financial services, automotive, shopping, and dining services."),
            ("Education", "Education: This category covers institutions which involved in science, education, and cultural services."),
            ("Public Service", "Public Service: including government, daily services, healthcare, transport, and public infrastructure."),
            ("Residential", "Residential: This category comprises accommodation services and mixed-use commercial and residential areas."),
        ])
    }

    /// Five clustered categories used for the Singapore dataset.
    pub fn singapore() -> Self {
        Self::from_table(&[
            ("Leisure and Entertainment", "Leisure and Entertainment: This category encompasses venues for arts, entertainment, events, and nightlife activities, serving as hubs for cultural, social, and recreational engagements."),
            ("Shopping and Services", "Shopping and Services: It includes retail outlets and professional service providers, catering to the diverse purchasing and service needs of consumers."),
            ("Dining and Health", "Education: This category covers eating establishments with health and medical services, offering places for dining along with health care facilities."),
            ("Travel and Accommodation", "Travel and Accommodation: including all travel-related infrastructure and lodging options, including transportation hubs, universities, and residential areas, facilitating mobility and accommodation."),
            ("Outdoor and Recreational Activities", "Outdoor and Recreational Activities: This category comprises outdoor spaces and landmarks, providing areas for recreation and appreciation of natural and cultural heritage."),
        ])
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }
}

/// Per-category POI counts of one location.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoiProfile {
    pub freq: Vec<f64>,
}

impl PoiProfile {
    pub fn zeros(r: usize) -> Self {
        Self { freq: vec![0.0; r] }
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.freq.iter().all(|f| f.is_finite() && *f >= 0.0)
    }

    /// Raw counts, or counts scaled to sum to one (all-zero stays zero).
    pub fn weights(&self, normalize: bool) -> Vec<f64> {
        let total: f64 = self.freq.iter().sum();
        if normalize && total > 0.0 {
            self.freq.iter().map(|f| f / total).collect()
        } else {
            self.freq.clone()
        }
    }
}

/// Lowercased words and single punctuation marks.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// FNV-1a bucket in `1..=HASH_VOCAB`.
pub fn token_id(token: &str) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    1 + (h % HASH_VOCAB as u64) as usize
}

/// Token ids of `text`, truncated or right-padded with [`PAD_TOKEN`] to `len`.
pub fn encode(text: &str, len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = tokenize(text).iter().map(|t| token_id(t)).take(len).collect();
    ids.resize(len, PAD_TOKEN);
    ids
}

/// Token ids of `text` without padding, capped at `max_len`.
pub fn encode_unpadded(text: &str, max_len: usize) -> Vec<usize> {
    tokenize(text).iter().map(|t| token_id(t)).take(max_len).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoiConfig {
    /// Tokens per category description.
    pub desc_len: usize,
    /// Scale each profile to sum 1 before weighting.
    pub normalize_freq: bool,
}

impl Default for PoiConfig {
    fn default() -> Self {
        Self { desc_len: 32, normalize_freq: false }
    }
}

/// Description-based POI embeddings.
#[derive(Clone, Debug)]
pub struct PoiEmbedder {
    pub token_table: ParamId,
    pub config: PoiConfig,
    pub description_tokens: Vec<Vec<usize>>,
    pub pool_mlp: Mlp,
    pub head_history: Mlp,
    pub head_current: Mlp,
}

impl PoiEmbedder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        catalog: &PoiCatalog,
        token_table: ParamId,
        d_model: usize,
        config: PoiConfig,
        trainable: bool,
    ) -> Self {
        let tokens = catalog.categories.iter().map(|c| encode(&c.description, config.desc_len)).collect();
        Self::from_tokens(store, rng, tokens, token_table, d_model, config, trainable)
    }

    /// Embedder over pre-encoded descriptions (possibly none, when every
    /// lookup supplies its own catalog tokens).
    pub fn from_tokens<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        description_tokens: Vec<Vec<usize>>,
        token_table: ParamId,
        d_model: usize,
        config: PoiConfig,
        trainable: bool,
    ) -> Self {
        Self {
            token_table,
            config,
            description_tokens,
            pool_mlp: Mlp::new(store, rng, "poi.pool", d_model, 2 * d_model, d_model, trainable),
            head_history: Mlp::new(store, rng, "poi.head_h", d_model, 2 * d_model, d_model, trainable),
            head_current: Mlp::new(store, rng, "poi.head_c", d_model, 2 * d_model, d_model, trainable),
        }
    }

    pub fn categories(&self) -> usize {
        self.description_tokens.len()
    }

    /// One `desc_len x d_model` matrix per category.
    pub fn category_semantic_embeddings(&self, store: &ParamStore) -> Vec<Tensor> {
        let table = store.value(self.token_table);
        self.description_tokens
            .iter()
            .map(|ids| {
                let mut t = Tensor::zeros(ids.len(), table.cols());
                for (r, &id) in ids.iter().enumerate() {
                    t.row_mut(r).copy_from_slice(table.row(id));
                }
                t
            })
            .collect()
    }

    /// The pre-perceptron `desc_len x d_model` tensor `sum_j f_j E_j`.
    pub fn location_init(&self, store: &ParamStore, profile: &PoiProfile) -> Result<Tensor, PoiError> {
        self.check(profile)?;
        let weights = profile.weights(self.config.normalize_freq);
        let cats = self.category_semantic_embeddings(store);
        let mut out = Tensor::zeros(cats[0].rows(), cats[0].cols());
        for (e, f) in cats.iter().zip(&weights) {
            for (o, v) in out.data_mut().iter_mut().zip(e.data()) {
                *o += f * v;
            }
        }
        Ok(out)
    }

    fn check(&self, profile: &PoiProfile) -> Result<(), PoiError> {
        if profile.len() != self.categories() {
            return Err(PoiError::LengthMismatch { got: profile.len(), want: self.categories() });
        }
        Ok(())
    }

    /// Weights matrix `[n, r]` for a set of profiles.
    pub fn weight_matrix<'a>(&self, profiles: impl IntoIterator<Item = &'a PoiProfile>) -> Result<Tensor, PoiError> {
        let mut data = Vec::new();
        let mut n = 0;
        for p in profiles {
            self.check(p)?;
            data.extend(p.weights(self.config.normalize_freq));
            n += 1;
        }
        Ok(Tensor::from_vec(n, self.categories(), data))
    }

    /// Location embeddings `[n, d_model]` for the rows of `weights`.
    ///
    /// Mean-pooling commutes with the weighted sum, so the category token
    /// matrices are pooled first and then mixed by the frequency weights.
    pub fn location_embeddings(&self, g: &mut Graph<'_>, weights: &Tensor) -> NodeId {
        self.location_embeddings_with(g, &self.description_tokens, weights)
    }

    /// As [`Self::location_embeddings`] but with the token sequences of
    /// another catalog; the parameters do not depend on the category set.
    pub fn location_embeddings_with(&self, g: &mut Graph<'_>, tokens: &[Vec<usize>], weights: &Tensor) -> NodeId {
        let r = tokens.len();
        let l = self.config.desc_len;
        assert_eq!(weights.cols(), r, "weight columns must match the category count");
        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let tokens = g.gather_param(self.token_table, &ids);
        let mut pool = Tensor::zeros(r, r * l);
        for j in 0..r {
            for t in 0..l {
                pool.set(j, j * l + t, 1.0 / l as f64);
            }
        }
        let pool = g.constant(pool);
        let pooled = g.matmul(pool, tokens);
        let w = g.constant(weights.clone());
        let init = g.matmul(w, pooled);
        self.pool_mlp.forward(g, init)
    }

    pub fn location_embedding(&self, store: &ParamStore, profile: &PoiProfile) -> Result<Vec<f64>, PoiError> {
        let w = self.weight_matrix([profile])?;
        let mut g = Graph::new(store);
        let out = self.location_embeddings(&mut g, &w);
        Ok(g.value(out).row(0).to_vec())
    }

    pub fn trajectory_poi_embeddings(
        &self,
        store: &ParamStore,
        pair: &TrajectoryPair,
        locations: &[Location],
    ) -> Result<(Tensor, Tensor), PoiError> {
        let lookup = |recs: &[VisitRecord]| -> Result<Vec<&PoiProfile>, PoiError> {
            recs.iter()
                .map(|v| {
                    locations
                        .iter()
                        .find(|l| l.id == v.location_id)
                        .map(|l| &l.poi)
                        .ok_or(PoiError::MissingProfile(v.location_id))
                })
                .collect()
        };
        let hist = self.weight_matrix(lookup(&pair.history)?)?;
        let cur = self.weight_matrix(lookup(&pair.current)?)?;
        let mut g = Graph::new(store);
        let eh = self.location_embeddings(&mut g, &hist);
        let ec = self.location_embeddings(&mut g, &cur);
        let h = self.head_history.forward(&mut g, eh);
        let c = self.head_current.forward(&mut g, ec);
        Ok((g.value(h).clone(), g.value(c).clone()))
    }
}

/// Linear POI mapping of the ablation that bypasses description embeddings;
/// its output is appended to the content features instead of added.
#[derive(Clone, Copy, Debug)]
pub struct LinearPoi {
    pub map: Linear,
    pub width: usize,
}

impl LinearPoi {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, r: usize, width: usize, trainable: bool) -> Self {
        Self { map: Linear::new(store, rng, "poi.linear", r, width, trainable), width }
    }

    pub fn forward(&self, g: &mut Graph<'_>, weights: &Tensor) -> NodeId {
        let w = g.constant(weights.clone());
        self.map.forward(g, w)
    }
}
