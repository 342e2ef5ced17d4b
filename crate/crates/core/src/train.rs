//! Optimizer, learning-rate schedule and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TrainingRecord;
use crate::diffusion::{
    self, loss_graph, make_cosine_schedule, masked_mse, q_sample, standard_normal, DiffusionError,
    DiffusionSchedule, LossWeights, COSINE_OFFSET,
};
use crate::model::{grad, Checkpoint, DType, ModelConfig, ModelError, ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";
pub const CURVE_CSV: &str = "training_curve.csv";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("records have {found} positions, model expects {expected}")]
    SequenceLength { found: usize, expected: usize },
    #[error("non-finite parameter `{0}` after update")]
    NonFiniteParam(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.9,
            patience: 20,
            min_lr: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub plateau: PlateauConfig,
    pub clip_norm: f64,
    pub seed: u64,
    /// Diffusion steps T.
    pub steps: usize,
    pub length_loss_weight: f64,
    pub val_fraction: f64,
    /// Worker threads for per-item gradients; results do not depend on it.
    pub threads: usize,
    /// Stop once the training-set MSE (see [`evaluate_mse`]) drops below this.
    pub stop_at_train_mse: Option<f64>,
    /// Epoch interval of the training-set MSE evaluation; 0 disables it.
    pub mse_eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 800,
            lr0: 1e-4,
            weight_decay: 1e-2,
            plateau: PlateauConfig::default(),
            clip_norm: 1.0,
            seed: 0,
            steps: 500,
            length_loss_weight: 0.01,
            val_fraction: 0.1,
            threads: 1,
            stop_at_train_mse: None,
            mse_eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Small settings for single-CPU runs.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            epochs: 50,
            steps: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 || self.steps < 2 || self.threads == 0 {
            return bad("batch size, threads must be positive and steps >= 2");
        }
        if !(self.lr0 > 0.0 && self.weight_decay >= 0.0 && self.clip_norm > 0.0) {
            return bad("lr0 and clip_norm must be positive, weight decay non-negative");
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0 && p.min_lr > 0.0 && p.patience > 0) {
            return bad("plateau factor must be in (0, 1), patience and min_lr positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.length_loss_weight < 0.0 {
            return bad("val_fraction must be in [0, 1), length loss weight non-negative");
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay:
/// `θ ← θ − lr (m̂ / (sqrt(v̂) + ε) + wd θ)`.
pub fn adamw_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    grads: &[Tensor],
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.get_index_mut(i);
        for j in 0..g.data.len() {
            let gj = g.data[j];
            m.data[j] = BETA1 * m.data[j] + (1.0 - BETA1) * gj;
            v.data[j] = BETA2 * v.data[j] + (1.0 - BETA2) * gj * gj;
            let mh = m.data[j] / bc1;
            let vh = v.data[j] / bc2;
            p.data[j] -= lr * (mh / (vh.sqrt() + ADAM_EPS) + weight_decay * p.data[j]);
        }
        if !p.all_finite() {
            return Err(TrainError::NonFiniteParam(params.name(i).to_string()));
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = clip_norm / norm;
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

/// Reduce-on-plateau bookkeeping. A strictly lower loss is an improvement;
/// after `patience` epochs without one the rate is multiplied by `factor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best: f64::MAX,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64, cfg: &PlateauConfig) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= cfg.patience {
                self.lr = (self.lr * cfg.factor).max(cfg.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying a validation-loss history from `lr0`.
pub fn plateau_lr(history: &[f64], lr0: f64, cfg: &PlateauConfig) -> f64 {
    let mut p = Plateau::new(lr0);
    for &v in history {
        p.observe(v, cfg);
    }
    p.lr
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Training-set MSE when it was evaluated this epoch.
    pub train_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub plateau: Plateau,
    pub best_val: f64,
    pub history: Vec<EpochStats>,
}

impl TrainState {
    pub fn lr(&self) -> f64 {
        self.plateau.lr
    }

    pub fn latest_train_mse(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|h| h.train_mse)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    adam_step: u64,
    plateau: Plateau,
    best_val: f64,
    history: Vec<EpochStats>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelConfig,
    cfg: &TrainConfig,
    state: &TrainState,
    with_optimizer: bool,
) -> Result<(), TrainError> {
    let header = CheckpointHeader {
        kind: "pathdiff-train".into(),
        model: model.clone(),
        train: cfg.clone(),
        epoch: state.epoch,
        adam_step: state.adam.step,
        plateau: state.plateau,
        best_val: state.best_val,
        history: state.history.clone(),
    };
    let mut ck = Checkpoint {
        header: serde_json::to_value(&header)?,
        arrays: Vec::new(),
    };
    ck.push_store("param.", &state.params, DType::F64);
    if with_optimizer {
        for (i, (name, _)) in state.params.iter().enumerate() {
            ck.arrays.push((format!("adam_m.{name}"), DType::F64, state.adam.m[i].clone()));
            ck.arrays.push((format!("adam_v.{name}"), DType::F64, state.adam.v[i].clone()));
        }
    }
    ck.save(path)?;
    Ok(())
}

/// Model and training configuration plus parameters stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(ModelConfig, TrainConfig, ParamStore), TrainError> {
    let ck = Checkpoint::load(path)?;
    let header: CheckpointHeader = serde_json::from_value(ck.header.clone())
        .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut params = header.model.init_params(0)?;
    ck.restore_into("param.", &mut params)?;
    Ok((header.model, header.train, params))
}

/// Full training state, for resuming.
pub fn load_state(path: &Path) -> Result<(ModelConfig, TrainConfig, TrainState), TrainError> {
    let ck = Checkpoint::load(path)?;
    let header: CheckpointHeader = serde_json::from_value(ck.header.clone())
        .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut params = header.model.init_params(0)?;
    ck.restore_into("param.", &mut params)?;
    let mut adam = AdamState::new(&params);
    adam.step = header.adam_step;
    for i in 0..params.len() {
        let name = params.name(i);
        for (prefix, dst) in [("adam_m.", &mut adam.m[i]), ("adam_v.", &mut adam.v[i])] {
            let t = ck
                .array(&format!("{prefix}{name}"))
                .ok_or_else(|| TrainError::Checkpoint(format!("missing optimizer array for `{name}`")))?;
            if t.shape() != dst.shape() {
                return Err(TrainError::Checkpoint(format!("optimizer array for `{name}` has wrong shape")));
            }
            dst.data.copy_from_slice(&t.data);
        }
    }
    Ok((
        header.model,
        header.train,
        TrainState {
            params,
            adam,
            epoch: header.epoch,
            plateau: header.plateau,
            best_val: header.best_val,
            history: header.history,
        },
    ))
}

pub fn write_curve_csv(path: &Path, history: &[EpochStats]) -> Result<(), TrainError> {
    let mut out = String::from("epoch,train_loss,val_loss,lr,train_mse\n");
    for h in history {
        let mse = h.train_mse.map(|v| format!("{v:e}")).unwrap_or_default();
        out.push_str(&format!("{},{:e},{:e},{:e},{}\n", h.epoch, h.train_loss, h.val_loss, h.lr, mse));
    }
    let mut f = fs::File::create(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    f.write_all(out.as_bytes()).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

const SPLIT_SALT: u64 = 0x5eed_0001;
const VAL_SALT: u64 = 0x7a11_da7e;

/// Deterministic train/validation split. With too few records for a
/// validation share the training set doubles as validation set.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_val = (n as f64 * val_fraction).floor() as usize;
    if n_val == 0 || n_val >= n {
        return (idx.clone(), idx);
    }
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

struct ItemResult {
    loss: f64,
    grads: Vec<Tensor>,
}

fn item_gradient(
    model: &ModelConfig,
    params: &ParamStore,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    record: &TrainingRecord,
    mut rng: ChaCha8Rng,
) -> Result<ItemResult, TrainError> {
    let t = rng.random_range(0..schedule.steps());
    let x0 = record.x0_tensor();
    let noise = standard_normal(&mut rng, 3, x0.cols);
    let x_t = q_sample(schedule, &x0, t, &noise)?;
    let mask = record.mask_f64();
    let target_len = record.true_len as f64 / model.seq_len as f64;
    let mut diff_err: Option<DiffusionError> = None;
    let (loss, grads) = grad(params, |g| {
        let tokens = model.encode(g, &record.image)?;
        let xv = g.constant(x_t.clone());
        let pred = model.denoise(g, xv, t, tokens)?;
        let l = match loss_graph(g, &x0, pred, &mask, &LossWeights::default(), schedule, t) {
            Ok(l) => l,
            Err(e) => {
                diff_err = Some(e);
                return Err(ModelError::ShapeMismatch("loss".into()));
            }
        };
        let frac = model.length_fraction(g, tokens);
        let d = g.add_scalar(frac, -target_len);
        let d2 = g.mul(d, d);
        let d2 = g.scale(d2, cfg.length_loss_weight);
        Ok(g.add(l, d2))
    })
    .map_err(|e| match diff_err.take() {
        Some(d) => TrainError::Diffusion(d),
        None => TrainError::Model(e),
    })?;
    Ok(ItemResult { loss, grads })
}

/// Unweighted masked loss on `records` at fixed per-record
/// timesteps and noise; no gradients are taken.
pub fn validation_loss(
    model: &ModelConfig,
    params: &ParamStore,
    schedule: &DiffusionSchedule,
    records: &[&TrainingRecord],
    seed: u64,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VAL_SALT);
    let mut acc = 0.0;
    for r in records {
        let t = rng.random_range(0..schedule.steps());
        let x0 = r.x0_tensor();
        let noise = standard_normal(&mut rng, 3, x0.cols);
        let x_t = q_sample(schedule, &x0, t, &noise)?;
        let tokens = model.encode_value(params, &r.image)?;
        let pred = model.denoise_value(params, &x_t, t, &tokens)?;
        let w = LossWeights {
            snr_weighting: false,
            ..LossWeights::default()
        };
        acc += diffusion::loss(&x0, &pred, &r.mask_f64(), &w, schedule, t)?;
    }
    Ok(acc / records.len() as f64)
}

/// Mean masked MSE of the clean-sequence prediction over `records`, each
/// evaluated at every timestep in `timesteps` with fixed noise.
pub fn evaluate_mse(
    model: &ModelConfig,
    params: &ParamStore,
    schedule: &DiffusionSchedule,
    records: &[&TrainingRecord],
    timesteps: &[usize],
    seed: u64,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    let mut n = 0usize;
    for r in records {
        let x0 = r.x0_tensor();
        let mask = r.mask_f64();
        let tokens = model.encode_value(params, &r.image)?;
        for &t in timesteps {
            let noise = standard_normal(&mut rng, 3, x0.cols);
            let x_t = q_sample(schedule, &x0, t, &noise)?;
            let pred = model.denoise_value(params, &x_t, t, &tokens)?;
            acc += masked_mse(&x0, &pred, &mask)?;
            n += 1;
        }
    }
    Ok(acc / n.max(1) as f64)
}

/// `count` timesteps spread evenly over the schedule, both ends included.
pub fn timestep_grid(steps: usize, count: usize) -> Vec<usize> {
    if count <= 1 {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..count)
        .map(|i| ((i as f64 * (steps - 1) as f64) / (count - 1) as f64).round() as usize)
        .collect();
    v.dedup();
    v
}

const MSE_EVAL_TIMESTEPS: usize = 10;
const MSE_EVAL_SEED: u64 = 0xe7a1;

pub struct TrainRun<'a> {
    pub records: &'a [TrainingRecord],
    pub model: &'a ModelConfig,
    pub config: &'a TrainConfig,
    /// Directory for checkpoints and the curve CSV.
    pub out_dir: Option<&'a Path>,
    /// Continue from a `last.ckpt`.
    pub resume: Option<&'a Path>,
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs (or continues) training until `config.epochs` epochs are complete or
/// the training MSE target is met. `progress` is called after every epoch.
pub fn train_loop(run: &TrainRun, progress: &mut dyn FnMut(&EpochStats)) -> Result<TrainState, TrainError> {
    let (model, cfg, records) = (run.model, run.config, run.records);
    cfg.validate()?;
    model.validate()?;
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(r) = records.iter().find(|r| r.n_max() != model.seq_len) {
        return Err(TrainError::SequenceLength {
            found: r.n_max(),
            expected: model.seq_len,
        });
    }
    let schedule = make_cosine_schedule(cfg.steps, COSINE_OFFSET)?;
    let (train_idx, val_idx) = split_indices(records.len(), cfg.val_fraction, cfg.seed);
    let val_refs: Vec<&TrainingRecord> = val_idx.iter().map(|&i| &records[i]).collect();
    let train_refs: Vec<&TrainingRecord> = train_idx.iter().map(|&i| &records[i]).collect();

    let mut state = match run.resume {
        Some(path) => {
            let (m, _, s) = load_state(path)?;
            if &m != model {
                return Err(TrainError::Checkpoint("checkpoint model configuration differs".into()));
            }
            s
        }
        None => {
            let params = model.init_params(cfg.seed)?;
            let adam = AdamState::new(&params);
            TrainState {
                params,
                adam,
                epoch: 0,
                plateau: Plateau::new(cfg.lr0),
                best_val: f64::MAX,
                history: Vec::new(),
            }
        }
    };
    if let Some(dir) = run.out_dir {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let mse_grid = timestep_grid(cfg.steps, MSE_EVAL_TIMESTEPS);

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let base = (b * cfg.batch_size) as u64;
            let results: Vec<Result<ItemResult, TrainError>> = pool.install(|| {
                batch
                    .par_iter()
                    .enumerate()
                    .map(|(k, &ri)| {
                        let mut item_rng = epoch_rng(cfg.seed, epoch);
                        item_rng.set_stream(1 + base + k as u64);
                        item_gradient(model, &state.params, &schedule, cfg, &records[ri], item_rng)
                    })
                    .collect()
            });
            let mut total: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            let mut non_finite = false;
            for r in results {
                let r = match r {
                    Err(TrainError::Model(ModelError::NonFiniteGradient(_))) => {
                        non_finite = true;
                        continue;
                    }
                    r => r?,
                };
                batch_loss += r.loss;
                match &mut total {
                    None => total = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            if non_finite || !batch_loss.is_finite() {
                if let Some(dir) = run.out_dir {
                    save_checkpoint(&dir.join(DIAGNOSTIC_CHECKPOINT), model, cfg, &state, true)?;
                }
                return Err(TrainError::NonFiniteLoss { epoch: epoch + 1 });
            }
            let mut grads = total.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                g.scale(inv);
            }
            loss_sum += batch_loss;
            clip_gradients(&mut grads, cfg.clip_norm);
            adamw_step(&mut state.params, &mut state.adam, &grads, state.plateau.lr, cfg.weight_decay)?;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let val_loss = validation_loss(model, &state.params, &schedule, &val_refs, cfg.seed)?;
        let lr_used = state.plateau.lr;
        state.plateau.observe(val_loss, &cfg.plateau);
        state.epoch += 1;
        let train_mse = if cfg.mse_eval_every > 0 && (state.epoch % cfg.mse_eval_every == 0 || state.epoch == cfg.epochs) {
            Some(evaluate_mse(model, &state.params, &schedule, &train_refs, &mse_grid, MSE_EVAL_SEED)?)
        } else {
            None
        };
        let stats = EpochStats {
            epoch: state.epoch,
            train_loss,
            val_loss,
            lr: lr_used,
            train_mse,
        };
        state.history.push(stats);
        let improved = val_loss < state.best_val;
        if improved {
            state.best_val = val_loss;
        }
        if let Some(dir) = run.out_dir {
            if improved {
                save_checkpoint(&dir.join(BEST_CHECKPOINT), model, cfg, &state, false)?;
            }
            save_checkpoint(&dir.join(LAST_CHECKPOINT), model, cfg, &state, true)?;
            write_curve_csv(&dir.join(CURVE_CSV), &state.history)?;
        }
        progress(&stats);
        if let (Some(target), Some(mse)) = (cfg.stop_at_train_mse, train_mse) {
            if mse < target {
                break;
            }
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::make_record;
    use crate::geometry::{rasterize, synth_sample, Infill, Shape, ShapeSpec};

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("theta", crate::model::ParamClass::Linear, Tensor::filled(1, 1, v))
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = scalar_store(0.7);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &mut st, &[Tensor::zeros(1, 1)], 1e-2, 0.0).unwrap();
        }
        assert_eq!(p.get("theta").unwrap().data[0], 0.7);
    }

    #[test]
    fn pure_decay_closed_form() {
        let mut p = scalar_store(2.0);
        let mut st = AdamState::new(&p);
        let (lr, wd) = (1e-2, 0.1);
        let mut expected = 2.0;
        for _ in 0..50 {
            adamw_step(&mut p, &mut st, &[Tensor::zeros(1, 1)], lr, wd).unwrap();
            expected *= 1.0 - lr * wd;
        }
        assert!((p.get("theta").unwrap().data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn quadratic_decreases_monotonically() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        let mut prev = 1.0f64;
        for _ in 0..100 {
            let theta = p.get("theta").unwrap().data[0];
            adamw_step(&mut p, &mut st, &[Tensor::filled(1, 1, 2.0 * theta)], 1e-2, 0.0).unwrap();
            let now = p.get("theta").unwrap().data[0];
            assert!(now.abs() < prev.abs());
            prev = now;
        }
        assert!(prev < 0.5);
    }

    #[test]
    fn adamw_matches_hand_computed_sequence() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        let (lr, wd) = (0.1, 0.01);
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for k in 1..=20 {
            let g = 2.0 * theta - 0.5;
            adamw_step(&mut p, &mut st, &[Tensor::filled(1, 1, g)], lr, wd).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            theta -= lr * (mh / (vh.sqrt() + 1e-8) + wd * theta);
            assert!((p.get("theta").unwrap().data[0] - theta).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_update_is_rejected() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        assert!(matches!(
            adamw_step(&mut p, &mut st, &[Tensor::filled(1, 1, f64::NAN)], 0.1, 0.0),
            Err(TrainError::NonFiniteParam(_))
        ));
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_vec(1, 2, vec![3.0, 0.0]), Tensor::from_vec(1, 1, vec![4.0])];
        let n = clip_gradients(&mut g, 2.5);
        assert_eq!(n, 5.0);
        assert_eq!(g[0].data, vec![1.5, 0.0]);
        assert_eq!(g[1].data, vec![2.0]);
        assert!((global_norm(&g) - 2.5).abs() < 1e-9);
        let before = g.clone();
        clip_gradients(&mut g, 10.0);
        assert_eq!(g, before);
    }

    #[test]
    fn plateau_examples() {
        let cfg = PlateauConfig::default();
        let decreasing: Vec<f64> = (0..100).map(|i| 1.0 / (i + 1) as f64).collect();
        assert_eq!(plateau_lr(&decreasing, 1e-4, &cfg), 1e-4);
        assert_eq!(plateau_lr(&[0.5; 21], 1e-4, &cfg), 1e-4 * 0.9);
        assert_eq!(plateau_lr(&[0.5; 20], 1e-4, &cfg), 1e-4);
        assert_eq!(plateau_lr(&[0.5; 400], 1e-8, &cfg), 1e-8);
    }

    #[test]
    fn split_is_deterministic() {
        let (a, b) = split_indices(64, 0.1, 3);
        assert_eq!((a.len(), b.len()), (58, 6));
        assert_eq!(split_indices(64, 0.1, 3), (a, b));
        let (a, b) = split_indices(8, 0.1, 3);
        assert_eq!(a, b);
        assert_eq!(timestep_grid(100, 10), vec![0, 11, 22, 33, 44, 55, 66, 77, 88, 99]);
    }

    fn tiny_records(n: usize, seq: usize) -> Vec<TrainingRecord> {
        (0..n)
            .map(|i| {
                let spec = ShapeSpec::new(Shape::Square { side: 10.0 + i as f64 }, Infill::Rectilinear { angle: 0.0 }, 0.2, 1.0);
                let (c, p) = synth_sample(&spec, i as u64).unwrap();
                make_record(rasterize(&c).unwrap(), &p, seq, "square").unwrap().quantized()
            })
            .collect()
    }

    fn tiny_setup() -> (ModelConfig, TrainConfig) {
        let model = ModelConfig::reduced(16);
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 3,
            lr0: 1e-3,
            steps: 20,
            ..TrainConfig::default()
        };
        (model, cfg)
    }

    #[test]
    fn empty_dataset_rejected() {
        let (model, cfg) = tiny_setup();
        let run = TrainRun {
            records: &[],
            model: &model,
            config: &cfg,
            out_dir: None,
            resume: None,
        };
        assert!(matches!(train_loop(&run, &mut |_| {}), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn runs_are_reproducible_and_resumable() {
        let (model, cfg) = tiny_setup();
        let records = tiny_records(3, 16);
        let dir = tempfile::tempdir().unwrap();
        let full = train_loop(
            &TrainRun {
                records: &records,
                model: &model,
                config: &cfg,
                out_dir: Some(dir.path()),
                resume: None,
            },
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(full.history.len(), 3);
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
        let csv = fs::read_to_string(dir.path().join(CURVE_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 4);

        let threaded = TrainConfig { threads: 2, ..cfg.clone() };
        let again = train_loop(
            &TrainRun {
                records: &records,
                model: &model,
                config: &threaded,
                out_dir: None,
                resume: None,
            },
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(again.history, full.history);
        assert_eq!(again.params, full.params);

        let short_dir = tempfile::tempdir().unwrap();
        let short = TrainConfig { epochs: 2, ..cfg.clone() };
        train_loop(
            &TrainRun {
                records: &records,
                model: &model,
                config: &short,
                out_dir: Some(short_dir.path()),
                resume: None,
            },
            &mut |_| {},
        )
        .unwrap();
        let resumed = train_loop(
            &TrainRun {
                records: &records,
                model: &model,
                config: &cfg,
                out_dir: None,
                resume: Some(&short_dir.path().join(LAST_CHECKPOINT)),
            },
            &mut |_| {},
        )
        .unwrap();
        assert_eq!(resumed.history, full.history);
        assert_eq!(resumed.params, full.params);

        let (m, c, p) = load_model(&dir.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!((m, c), (model, cfg));
        assert_eq!(p, full.params);
        assert!(load_model(&dir.path().join(BEST_CHECKPOINT)).is_ok());
    }

    #[test]
    fn validation_does_not_touch_parameters() {
        let (model, _) = tiny_setup();
        let records = tiny_records(2, 16);
        let params = model.init_params(1).unwrap();
        let before = params.clone();
        let sched = make_cosine_schedule(20, COSINE_OFFSET).unwrap();
        let refs: Vec<&TrainingRecord> = records.iter().collect();
        let a = validation_loss(&model, &params, &sched, &refs, 0).unwrap();
        let b = validation_loss(&model, &params, &sched, &refs, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(params, before);
    }
}
