use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CityView, Layout, ModelError, ModelState};
use crate::ingest::TrajectoryPair;
use crate::nn::{Gradients, Graph, ParamId, ParamStore, Tensor};
use crate::poi::TOKEN_ROWS;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation epochs without improvement before stopping.
    pub patience: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_batch: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            max_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("no training pairs")]
    EmptyTrain,
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(store: &ParamStore) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.rows(), e.value.cols())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, store: &mut ParamStore, grads: &Gradients, s: &Schedule) {
        self.t += 1;
        let c1 = 1.0 - s.beta1.powi(self.t);
        let c2 = 1.0 - s.beta2.powi(self.t);
        for id in store.trainable_ids() {
            let i = id.index();
            let g = grads.get(id).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * g[j];
                v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * g[j] * g[j];
                p[j] -= s.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + s.adam_eps);
            }
        }
    }
}

fn zero_grads(grads: &mut Gradients) {
    for t in &mut grads.grads {
        t.data_mut().fill(0.0);
    }
}

fn snapshot(store: &ParamStore) -> Vec<(ParamId, Tensor)> {
    store.trainable_ids().into_iter().map(|id| (id, store.value(id).clone())).collect()
}

/// Mean per-pair distance in meters over the validation splits.
pub(crate) fn mean_loss(state: &ModelState, views: &[CityView<'_>], part: crate::ingest::SplitPart, batch: usize) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for view in views {
        for chunk in view.dataset.split.get(part).chunks(batch.max(1)) {
            let pairs: Vec<&TrajectoryPair> = chunk.iter().map(|&i| &view.dataset.pairs[i]).collect();
            let prepared = view.prepare(state, &pairs)?;
            let mut g = Graph::new(&state.store);
            let l = state.loss_node(&mut g, view, &prepared)?;
            total += g.value(l).get(0, 0) * pairs.len() as f64;
            count += pairs.len();
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Adam on the trainable parameters with early stopping on validation
/// loss; the best validation epoch's parameters are kept.
pub fn train(state: &mut ModelState, views: &[CityView<'_>], schedule: &Schedule, seed: u64) -> Result<TrainOutcome, TrainError> {
    if views.iter().all(|v| v.dataset.split.train.is_empty()) {
        return Err(TrainError::EmptyTrain);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(&state.store);
    let mut grads = Gradients::zeros_like(&state.store);
    let mut best = (f64::INFINITY, 0usize, snapshot(&state.store));
    let mut epochs = Vec::new();
    let mut step_losses = Vec::new();
    let mut step = 0usize;
    let mut stale = 0usize;
    let capped = |step: usize| schedule.max_steps > 0 && step >= schedule.max_steps;
    for epoch in 0..schedule.max_epochs {
        let mut batches = Vec::new();
        for (c, view) in views.iter().enumerate() {
            let mut idx = view.dataset.split.train.clone();
            idx.shuffle(&mut rng);
            batches.extend(idx.chunks(schedule.batch_size.max(1)).map(|ch| (c, ch.to_vec())));
        }
        batches.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for (c, chunk) in batches {
            if capped(step) {
                break;
            }
            let view = &views[c];
            let pairs: Vec<&TrajectoryPair> = chunk.iter().map(|&i| &view.dataset.pairs[i]).collect();
            let prepared = view.prepare(state, &pairs)?;
            let loss = {
                let mut g = Graph::new(&state.store);
                let l = state.loss_node(&mut g, view, &prepared).map_err(|e| match e {
                    ModelError::NonFinite { .. } => TrainError::Divergence { step, detail: e.to_string() },
                    other => other.into(),
                })?;
                let lv = g.value(l).get(0, 0);
                if !lv.is_finite() {
                    return Err(TrainError::Divergence { step, detail: format!("loss {lv}") });
                }
                zero_grads(&mut grads);
                g.backward_into(l, &mut grads);
                lv
            };
            if !grads.is_finite() {
                return Err(TrainError::Divergence { step, detail: "non-finite gradient".into() });
            }
            adam.step(&mut state.store, &grads, schedule);
            step_losses.push(loss);
            epoch_loss += loss;
            epoch_steps += 1;
            step += 1;
        }
        if epoch_steps == 0 {
            break;
        }
        let val_loss = mean_loss(state, views, crate::ingest::SplitPart::Val, schedule.eval_batch)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Divergence { step, detail: "non-finite validation loss".into() });
        }
        epochs.push(EpochMetrics { epoch, steps: step, train_loss: epoch_loss / epoch_steps as f64, val_loss });
        if val_loss < best.0 {
            best = (val_loss, epoch, snapshot(&state.store));
            stale = 0;
        } else {
            stale += 1;
            if stale >= schedule.patience {
                break;
            }
        }
        if capped(step) {
            break;
        }
    }
    for (id, t) in best.2 {
        *state.store.value_mut(id) = t;
    }
    Ok(TrainOutcome { epochs, step_losses, best_epoch: best.1, best_val_loss: best.0, steps: step })
}

/// Next-token pretraining of positions, transformer blocks and the final
/// norm on sequences from a random sparse Markov chain over token ids; the
/// target of each position is the token table row of the following token.
pub(super) fn pretrain_backbone(state: &mut ModelState, seed: u64) -> Result<(), ModelError> {
    const VOCAB: usize = 64;
    const BATCH: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab: Vec<usize> = (0..VOCAB).map(|_| rng.random_range(1..TOKEN_ROWS)).collect();
    let succ: Vec<[usize; 3]> = (0..VOCAB).map(|_| std::array::from_fn(|_| rng.random_range(0..VOCAB))).collect();
    let seq = state.config.backbone.max_seq.min(16);
    if seq < 2 {
        return Ok(());
    }
    let flags: Vec<bool> = state.store.entries().iter().map(|e| e.trainable).collect();
    for id in state.store.ids().collect::<Vec<_>>() {
        let name = state.store.name(id);
        let on = name == "pos" || name.starts_with("blk") || name.starts_with("ln_f");
        state.store.set_trainable(id, on);
    }
    let schedule = Schedule::default();
    let mut adam = Adam::new(&state.store);
    let mut grads = Gradients::zeros_like(&state.store);
    let heads = state.config.backbone.heads;
    let result = (|| {
        for _ in 0..state.config.backbone.pretrain_steps {
            let mut ids = Vec::with_capacity(BATCH * seq);
            for _ in 0..BATCH {
                let mut cur = rng.random_range(0..VOCAB);
                for _ in 0..seq {
                    ids.push(cur);
                    cur = if rng.random::<f64>() < 0.9 { succ[cur][rng.random_range(0..3)] } else { rng.random_range(0..VOCAB) };
                }
            }
            let tokens: Vec<usize> = ids.iter().map(|&i| vocab[i]).collect();
            let mut g = Graph::new(&state.store);
            let x = g.gather_param(state.token_table, &tokens);
            let pe = g.gather_param(state.pos, &(0..BATCH).flat_map(|_| 0..seq).collect::<Vec<_>>());
            let x = g.add(x, pe);
            let x = state.run_stack(&mut g, x, None, &Layout { batch: BATCH, seq, prompt: 0, heads })?;
            let rows: Vec<usize> = (0..BATCH).flat_map(|b| (0..seq - 1).map(move |t| b * seq + t)).collect();
            let next: Vec<usize> = (0..BATCH).flat_map(|b| (1..seq).map(move |t| b * seq + t)).collect();
            let h = g.gather(x, &rows);
            let h = state.ln_f.forward(&mut g, h);
            let table = state.store.value(state.token_table);
            let mut target = Tensor::zeros(next.len(), table.cols());
            for (r, &i) in next.iter().enumerate() {
                target.row_mut(r).copy_from_slice(table.row(tokens[i]));
            }
            let l = g.mse_loss(h, target);
            zero_grads(&mut grads);
            g.backward_into(l, &mut grads);
            drop(g);
            if !grads.is_finite() {
                return Err(ModelError::NonFinite { layer: 0 });
            }
            adam.step(&mut state.store, &grads, &schedule);
        }
        Ok(())
    })();
    for (id, on) in state.store.ids().collect::<Vec<_>>().into_iter().zip(flags) {
        state.store.set_trainable(id, on);
    }
    result
}

const FD_ULPS: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Entries sampled from each trainable tensor.
    pub samples_per_tensor: usize,
    /// Lower bound on the relative-error denominator.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-4, samples_per_tensor: 2, abs_floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// `param[index]` paths whose relative error exceeds the tolerance.
    pub failures: Vec<String>,
    pub frozen_tensors: usize,
    /// Frozen tensors that received a non-zero gradient.
    pub frozen_nonzero: Vec<String>,
    pub max_rel_err: f64,
    /// Batch loss at the unperturbed parameters.
    pub loss: f64,
    /// Smallest gradient the finite differences resolve.
    pub resolution: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.frozen_nonzero.is_empty()
    }
}

fn batch_loss(state: &ModelState, view: &CityView<'_>, pairs: &[&TrajectoryPair]) -> Result<f64, ModelError> {
    let prepared = view.prepare(state, pairs)?;
    let mut g = Graph::new(&state.store);
    let l = state.loss_node(&mut g, view, &prepared)?;
    Ok(g.value(l).get(0, 0))
}

/// Compares analytic gradients of the batch loss on `pairs` with central
/// differences on sampled entries of every trainable tensor, and confirms
/// frozen tensors receive exactly zero gradient.
pub fn grad_check(
    state: &mut ModelState,
    view: &CityView<'_>,
    pairs: &[&TrajectoryPair],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, ModelError> {
    let prepared = view.prepare(state, pairs)?;
    let grads = {
        let mut g = Graph::new(&state.store);
        let l = state.loss_node(&mut g, view, &prepared)?;
        g.backward(l)
    };
    let mut report = GradCheckReport { loss: batch_loss(state, view, pairs)?, ..Default::default() };
    // A central difference cannot see changes below a few ulps of the loss,
    // so gradients smaller than that resolution over the tolerance are
    // compared against the resolution instead.
    report.resolution = FD_ULPS * report.loss.abs() * f64::EPSILON / (2.0 * cfg.epsilon);
    let floor = cfg.abs_floor.max(report.resolution / cfg.tolerance);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for id in state.store.ids().collect::<Vec<_>>() {
        let name = state.store.name(id).to_string();
        let grad = grads.get(id);
        if !state.store.is_trainable(id) {
            report.frozen_tensors += 1;
            if grad.data().iter().any(|&v| v != 0.0) {
                report.frozen_nonzero.push(name);
            }
            continue;
        }
        let len = state.store.value(id).len();
        for _ in 0..cfg.samples_per_tensor.min(len) {
            let index = rng.random_range(0..len);
            let orig = state.store.value(id).data()[index];
            state.store.value_mut(id).data_mut()[index] = orig + cfg.epsilon;
            let up = batch_loss(state, view, pairs)?;
            state.store.value_mut(id).data_mut()[index] = orig - cfg.epsilon;
            let down = batch_loss(state, view, pairs)?;
            state.store.value_mut(id).data_mut()[index] = orig;
            let numeric = (up - down) / (2.0 * cfg.epsilon);
            let analytic = grad.data()[index];
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if rel_err > cfg.tolerance || !rel_err.is_finite() {
                report.failures.push(format!("{name}[{index}]"));
            }
            report.entries.push(GradCheckEntry { param: name.clone(), index, analytic, numeric, rel_err });
        }
    }
    Ok(report)
}
