//! Training and evaluation runs.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use super::config::{Ablation, ExperimentConfig, RetrievalSpace};
use super::report::{CityReport, HitAtK, RunReport, SplitMetrics};
use super::synth::synth_generate;
use super::HarnessError;
use crate::backbone::{
    grad_check, train, Checkpoint, CityView, GradCheckConfig, GradCheckReport, ModelError, ModelState, PoiMode,
    TrainOutcome,
};
use crate::geo::{fit_norm_stats, MercatorPoint};
use crate::ingest::formats::load_dataset_dir;
use crate::ingest::{CityDataset, CoordKind, LocationId, SplitPart, TrajectoryPair};
use crate::retrieve::{hit_at_k, mean_distance, LocationIndex, Prediction};

/// A finished run: its report and the model it trained or evaluated.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: RunReport,
    pub state: ModelState,
}

/// Ranked predictions for every pair of one split.
#[derive(Clone, Debug)]
pub struct SplitPredictions {
    pub pairs: Vec<usize>,
    /// Predicted coordinates in the city's Mercator meters.
    pub coords: Vec<MercatorPoint>,
    pub ranked: Vec<Prediction>,
    pub truths: Vec<LocationId>,
}

impl SplitPredictions {
    pub fn ranked_ids(&self) -> Vec<Vec<LocationId>> {
        self.ranked.iter().map(Prediction::ids).collect()
    }
}

pub fn load_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<CityDataset, HarnessError> {
    Ok(load_dataset_dir(dir, cfg.dataset_options(), cfg.data.grid, cfg.data.cell_m)?)
}

/// The configured directories, or the synthetic city when none are given.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Vec<CityDataset>, HarnessError> {
    if cfg.data.dirs.is_empty() {
        return Ok(vec![synth_generate(&cfg.synth, cfg.dataset_options())?]);
    }
    cfg.data.dirs.iter().map(|d| load_dataset(cfg, d)).collect()
}

fn check_datasets(cfg: &ExperimentConfig, datasets: &[CityDataset]) -> Result<(), HarnessError> {
    let first = datasets.first().ok_or_else(|| HarnessError::Config("no datasets".into()))?;
    for ds in datasets {
        if ds.options != cfg.dataset_options() {
            return Err(HarnessError::Config(format!("dataset {} was built with other window or split options", ds.name)));
        }
        if cfg.model_config(first.catalog.len()).poi_mode == PoiMode::Linear && ds.catalog.len() != first.catalog.len() {
            return Err(HarnessError::Config(format!(
                "linear POI mode needs equal category counts; {} has {}, {} has {}",
                first.name,
                first.catalog.len(),
                ds.name,
                ds.catalog.len()
            )));
        }
    }
    Ok(())
}

/// Fresh model for the configuration, normalized with the first city's
/// statistics.
pub fn build_model(cfg: &ExperimentConfig, datasets: &[CityDataset]) -> Result<ModelState, HarnessError> {
    cfg.validate()?;
    check_datasets(cfg, datasets)?;
    let first = &datasets[0];
    let mc = cfg.model_config(first.catalog.len());
    mc.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(ModelState::new(mc, cfg.seed, first.norm_stats, first.dur_bounds)?)
}

fn train_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
}

/// Predictions for `pairs`, in order. Batches are spread over `workers`
/// threads; each batch is computed the same way regardless of the count.
pub fn predict_pairs(
    state: &ModelState,
    view: &CityView<'_>,
    pairs: &[&TrajectoryPair],
    batch: usize,
    workers: usize,
) -> Result<Vec<MercatorPoint>, ModelError> {
    let chunks: Vec<&[&TrajectoryPair]> = pairs.chunks(batch.max(1)).collect();
    let workers = workers.clamp(1, chunks.len().max(1));
    let mut slots: Vec<Option<Result<Vec<MercatorPoint>, ModelError>>> = (0..chunks.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, c) in slots.iter_mut().zip(&chunks) {
            *slot = Some(state.predict_batch(view, c));
        }
    } else {
        let done = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let chunks = &chunks;
                    s.spawn(move || {
                        (w..chunks.len()).step_by(workers).map(|i| (i, state.predict_batch(view, chunks[i]))).collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect::<Vec<_>>()
        });
        for (i, r) in done {
            slots[i] = Some(r);
        }
    }
    let mut out = Vec::with_capacity(pairs.len());
    for s in slots {
        out.extend(s.expect("every batch evaluated")?);
    }
    Ok(out)
}

/// KD-tree over the city's locations in the chosen space.
pub fn location_index(view: &CityView<'_>, space: RetrievalSpace) -> Result<LocationIndex, HarnessError> {
    let locs = &view.dataset.locations;
    Ok(match space {
        RetrievalSpace::Mercator => LocationIndex::build(locs)?,
        RetrievalSpace::Normalized => LocationIndex::from_points(locs.iter().map(|l| {
            let [x, y] = view.stats.normalize(l.center);
            (l.id, MercatorPoint::new(x, y))
        }))?,
    })
}

/// Predicts every pair of `part` and retrieves the top `k` locations.
pub fn predict_split(
    cfg: &ExperimentConfig,
    state: &ModelState,
    view: &CityView<'_>,
    part: SplitPart,
    k: usize,
) -> Result<SplitPredictions, HarnessError> {
    let ds = view.dataset;
    let idx: Vec<usize> = ds.split.get(part).to_vec();
    let pairs: Vec<&TrajectoryPair> = idx.iter().map(|&i| &ds.pairs[i]).collect();
    let coords = predict_pairs(state, view, &pairs, cfg.train.eval_batch, cfg.eval.worker_count())?;
    let index = location_index(view, cfg.eval.retrieval_space)?;
    let ranked = coords
        .iter()
        .map(|&p| {
            let q = match cfg.eval.retrieval_space {
                RetrievalSpace::Mercator => p,
                RetrievalSpace::Normalized => {
                    let [x, y] = view.stats.normalize(p);
                    MercatorPoint::new(x, y)
                }
            };
            index.query_topk(q, k)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SplitPredictions { pairs: idx, coords, ranked, truths: pairs.iter().map(|p| p.target).collect() })
}

fn split_metrics(
    cfg: &ExperimentConfig,
    view: &CityView<'_>,
    part: SplitPart,
    p: &SplitPredictions,
) -> Result<SplitMetrics, HarnessError> {
    let ranked = p.ranked_ids();
    let hits = cfg
        .eval
        .ks
        .iter()
        .map(|&k| Ok(HitAtK { k, hit: hit_at_k(&ranked, &p.truths, k)? }))
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let centers = p
        .truths
        .iter()
        .map(|id| view.dataset.location(*id).map(|l| l.center).ok_or(ModelError::UnknownLocation(*id)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SplitMetrics {
        split: part.name().to_string(),
        queries: p.truths.len(),
        hits,
        mean_distance_m: mean_distance(&p.coords, &centers, view.dataset.coord_kind)?,
    })
}

/// Most visited locations over the whole corpus, ties by ascending id.
pub fn marginal_top(ds: &CityDataset, k: usize) -> Vec<LocationId> {
    let mut freq: HashMap<LocationId, usize> = HashMap::new();
    for u in &ds.users {
        for v in &u.visits {
            *freq.entry(v.location_id).or_default() += 1;
        }
    }
    let mut f: Vec<(LocationId, usize)> = freq.into_iter().collect();
    f.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    f.into_iter().take(k).map(|e| e.0).collect()
}

fn baseline_hits(cfg: &ExperimentConfig, ds: &CityDataset) -> Result<Vec<HitAtK>, HarnessError> {
    let kmax = *cfg.eval.ks.last().expect("validated ks");
    let top = marginal_top(ds, kmax);
    let truths: Vec<LocationId> = ds.split.test.iter().map(|&i| ds.pairs[i].target).collect();
    let ranked = vec![top; truths.len()];
    cfg.eval.ks.iter().map(|&k| Ok(HitAtK { k, hit: hit_at_k(&ranked, &truths, k)? })).collect()
}

/// Metrics of `state` on the given splits of one city.
pub fn city_report(
    cfg: &ExperimentConfig,
    state: &ModelState,
    view: &CityView<'_>,
    parts: &[SplitPart],
    norm_source: String,
    duration_source: String,
) -> Result<CityReport, HarnessError> {
    let kmax = *cfg.eval.ks.last().expect("validated ks");
    let mut splits = Vec::new();
    for &part in parts {
        let p = predict_split(cfg, state, view, part, kmax)?;
        splits.push(split_metrics(cfg, view, part, &p)?);
    }
    let ds = view.dataset;
    Ok(CityReport {
        name: ds.name.clone(),
        locations_digest: ds.locations_digest(),
        norm_source,
        duration_source,
        retrieval_space: cfg.eval.retrieval_space.name().to_string(),
        distance: match ds.coord_kind {
            CoordKind::Geographic => "geodesic",
            CoordKind::Virtual => "planar",
        }
        .to_string(),
        splits,
        baseline: baseline_hits(cfg, ds)?,
    })
}

fn training_mode(n: usize) -> String {
    match n {
        0 => "none".into(),
        1 => "single-city".into(),
        n => format!("joint:{n}"),
    }
}

fn base_report(cfg: &ExperimentConfig, state: &ModelState, mode: &str) -> RunReport {
    RunReport {
        format_version: 1,
        mode: mode.to_string(),
        config_digest: cfg.digest(),
        model_config_digest: state.config.digest(),
        weights_digest: state.store.full_digest(),
        seed: cfg.seed,
        training: training_mode(0),
        train_cities: Vec::new(),
        steps: 0,
        best_epoch: None,
        loss_curve: Vec::new(),
        cities: Vec::new(),
        wall_time_s: 0.0,
    }
}

fn finish(mut report: RunReport, started: Instant) -> Result<RunReport, HarnessError> {
    report.wall_time_s = started.elapsed().as_secs_f64();
    report.validate()?;
    Ok(report)
}

/// Trains on every city jointly (each normalized with its own statistics)
/// and reports validation and test metrics per city.
pub fn run_supervised(cfg: &ExperimentConfig, datasets: &[CityDataset]) -> Result<RunOutput, HarnessError> {
    run_supervised_as(cfg, datasets, "supervised")
}

fn run_supervised_as(cfg: &ExperimentConfig, datasets: &[CityDataset], mode: &str) -> Result<RunOutput, HarnessError> {
    let started = Instant::now();
    let mut state = build_model(cfg, datasets)?;
    let views: Vec<CityView<'_>> = datasets.iter().map(|d| CityView::native(d, &state.config.poi)).collect();
    let outcome: TrainOutcome = train(&mut state, &views, &cfg.train, train_seed(cfg))?;
    // evaluate exactly what a checkpoint would hold
    state.quantize_f32();
    let mut report = base_report(cfg, &state, mode);
    report.training = training_mode(datasets.len());
    report.train_cities = datasets.iter().map(|d| d.name.clone()).collect();
    report.steps = outcome.steps;
    report.best_epoch = Some(outcome.best_epoch);
    report.loss_curve = outcome.epochs;
    for view in &views {
        let ds = view.dataset;
        report.cities.push(city_report(
            cfg,
            &state,
            view,
            &[SplitPart::Val, SplitPart::Test],
            ds.norm_source.clone(),
            format!("{}:train", ds.name),
        )?);
    }
    Ok(RunOutput { report: finish(report, started)?, state })
}

/// Evaluates a checkpoint on the city it was trained on, with the stored
/// statistics. A different location table is refused unless `force`.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    ckpt: &Checkpoint,
    ds: &CityDataset,
    force: bool,
) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    ckpt.check_locations(&ds.locations_digest(), force)?;
    let state = &ckpt.state;
    let view = CityView::new(ds, state.norm_stats, state.dur_bounds, &state.config.poi);
    let mut report = base_report(cfg, state, "evaluate");
    report.cities.push(city_report(
        cfg,
        state,
        &view,
        &[SplitPart::Val, SplitPart::Test],
        "checkpoint".into(),
        "checkpoint".into(),
    )?);
    finish(report, started)
}

/// Statistics-only adaptation to an unseen city: coordinates are
/// normalized with statistics of the target's test records, durations with
/// the model's bounds unless `data.refit_durations`.
pub fn zero_shot_view<'a>(
    cfg: &ExperimentConfig,
    state: &ModelState,
    target: &'a CityDataset,
) -> Result<(CityView<'a>, String, String), HarnessError> {
    let stats = fit_norm_stats(&target.split_coordinates(SplitPart::Test)).map_err(crate::ingest::IngestError::from)?;
    let (bounds, dur_source) = if cfg.data.refit_durations {
        (target.fit_dur_bounds(SplitPart::Test)?, format!("{}:test", target.name))
    } else {
        (state.dur_bounds, "checkpoint".to_string())
    };
    let view = CityView::new(target, stats, bounds, &state.config.poi);
    Ok((view, format!("{}:test", target.name), dur_source))
}

/// Tests a trained model on `target` without touching its weights.
pub fn zero_shot_report(cfg: &ExperimentConfig, state: &ModelState, target: &CityDataset) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    let before = state.store.full_digest();
    let (view, norm_source, dur_source) = zero_shot_view(cfg, state, target)?;
    let mut report = base_report(cfg, state, "zero-shot");
    report.cities.push(city_report(cfg, state, &view, &[SplitPart::Test], norm_source, dur_source)?);
    let after = state.store.full_digest();
    if before != after {
        return Err(HarnessError::Report(format!("weights changed during zero-shot evaluation: {before} -> {after}")));
    }
    finish(report, started)
}

/// Trains on `sources` and tests on the unseen `target`.
pub fn run_zero_shot(cfg: &ExperimentConfig, sources: &[CityDataset], target: &CityDataset) -> Result<RunOutput, HarnessError> {
    let started = Instant::now();
    if sources.iter().any(|s| s.locations_digest() == target.locations_digest() && s.name == target.name) {
        return Err(HarnessError::Config(format!("target {} is also a training city", target.name)));
    }
    let trained = run_supervised_as(cfg, sources, "zero-shot")?;
    let mut report = zero_shot_report(cfg, &trained.state, target)?;
    report.training = trained.report.training;
    report.train_cities = trained.report.train_cities;
    report.steps = trained.report.steps;
    report.best_epoch = trained.report.best_epoch;
    report.loss_curve = trained.report.loss_curve;
    Ok(RunOutput { report: finish(report, started)?, state: trained.state })
}

/// The base run followed by one run per ablation, each differing from the
/// base in a single flag.
pub fn run_ablation_suite(
    cfg: &ExperimentConfig,
    datasets: &[CityDataset],
    ablations: &[Ablation],
) -> Result<Vec<(String, RunReport)>, HarnessError> {
    if !cfg.ablation.is_base() {
        return Err(HarnessError::Config("the ablation suite needs a base config with no ablation flags".into()));
    }
    let variants: Vec<ExperimentConfig> = ablations.iter().map(|a| cfg.with_ablation(*a)).collect();
    for v in &variants {
        v.validate()?;
    }
    let mut out = vec![("base".to_string(), run_supervised(cfg, datasets)?.report)];
    for (a, v) in ablations.iter().zip(&variants) {
        let mode = format!("ablation:{}", a.name());
        out.push((a.name().to_string(), run_supervised_as(v, datasets, &mode)?.report));
    }
    Ok(out)
}

/// Gradient check of the configured model on a few training pairs.
pub fn run_gradcheck(cfg: &ExperimentConfig, datasets: &[CityDataset], pairs: usize) -> Result<GradCheckReport, HarnessError> {
    let mut state = build_model(cfg, datasets)?;
    let ds = &datasets[0];
    let view = CityView::native(ds, &state.config.poi);
    let chosen: Vec<&TrajectoryPair> = ds.split.train.iter().take(pairs.max(1)).map(|&i| &ds.pairs[i]).collect();
    let gc = GradCheckConfig { seed: cfg.seed, ..Default::default() };
    Ok(grad_check(&mut state, &view, &chosen, &gc)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synth::SynthCitySpec;
    use crate::ingest::WindowSpec;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.synth = SynthCitySpec { grid_rows: 4, grid_cols: 4, n_agents: 10, n_days: 14, ..SynthCitySpec::toybench() };
        cfg.window = WindowSpec { history_len: 6, current_len: 2, stride: 1 };
        cfg.model.prompt_text = "predict the next place".into();
        cfg.backbone.d_model = 16;
        cfg.backbone.heads = 2;
        cfg.backbone.d_ff = 32;
        cfg.backbone.max_seq = 32;
        cfg.features.d_model = 16;
        cfg.poi.desc_len = 8;
        cfg.train.max_steps = 6;
        cfg.train.max_epochs = 2;
        cfg.train.batch_size = 32;
        cfg
    }

    #[test]
    fn supervised_is_deterministic() {
        let cfg = tiny_config();
        let ds = load_datasets(&cfg).unwrap();
        let a = run_supervised(&cfg, &ds).unwrap();
        let b = run_supervised(&cfg, &ds).unwrap();
        assert_eq!(a.report.without_timing().render(), b.report.without_timing().render());
        assert_eq!(a.report.config_digest, cfg.digest());
        assert_eq!(a.report.cities[0].splits.len(), 2);
        assert!(a.report.steps > 0);
    }

    #[test]
    fn parallel_predictions_match_serial() {
        let cfg = tiny_config();
        let ds = load_datasets(&cfg).unwrap();
        let state = build_model(&cfg, &ds).unwrap();
        let view = CityView::native(&ds[0], &state.config.poi);
        let pairs: Vec<&TrajectoryPair> = ds[0].pairs.iter().take(50).collect();
        let one = predict_pairs(&state, &view, &pairs, 7, 1).unwrap();
        let three = predict_pairs(&state, &view, &pairs, 7, 3).unwrap();
        assert_eq!(one, three);
        assert_eq!(one.len(), 50);
    }

    #[test]
    fn zero_shot_keeps_weights() {
        let cfg = tiny_config();
        let ds = load_datasets(&cfg).unwrap();
        let mut other_cfg = cfg.clone();
        other_cfg.synth.seed = 99;
        other_cfg.synth.name = "other".into();
        let target = load_datasets(&other_cfg).unwrap().remove(0);
        let out = run_zero_shot(&cfg, &ds, &target).unwrap();
        assert_eq!(out.report.weights_digest, out.state.store.full_digest());
        assert_eq!(out.report.cities[0].name, "other");
        assert_eq!(out.report.cities[0].norm_source, "other:test");
        assert_eq!(out.report.training, "single-city");
    }

    #[test]
    fn ablation_suite_rejects_flagged_base() {
        let mut cfg = tiny_config();
        cfg.ablation.no_time = true;
        let ds = load_datasets(&cfg).unwrap();
        assert!(matches!(run_ablation_suite(&cfg, &ds, &[Ablation::NoPoi]), Err(HarnessError::Config(_))));
    }

    #[test]
    fn marginal_top_orders_by_count_then_id() {
        let cfg = tiny_config();
        let ds = load_datasets(&cfg).unwrap().remove(0);
        let top = marginal_top(&ds, 3);
        assert_eq!(top.len(), 3);
        let count = |id| ds.users.iter().flat_map(|u| &u.visits).filter(|v| v.location_id == id).count();
        assert!(count(top[0]) >= count(top[1]) && count(top[1]) >= count(top[2]));
    }
}
