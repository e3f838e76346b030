//! Mini-batch training of [`LinearModel`]s with pair-preserving or shuffled
//! batching, the combined objective and early stopping on validation loss.
//!
//! Optimizer updates, with step `t ≥ 1`, learning rate `η_t` and gradient `g`:
//!
//! ```text
//! sgd:    v ← μ·v + g;                 θ ← θ − η_t·v
//! adamw:  m ← β1·m + (1−β1)·g;  v ← β2·v + (1−β2)·g²
//!         θ ← θ − η_t·( m̂/(√v̂ + ε) + wd·θ ),  m̂ = m/(1−β1^t), v̂ = v/(1−β2^t)
//! ```
//!
//! `η_t` ramps linearly from `η/w` to `η` over the first `w = ⌈r·T⌉` of the
//! `T` scheduled steps (`r` the warmup ratio), then stays constant or decays
//! linearly to zero at step `T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_model::PairedDataset;
use crate::linalg::Matrix;
use crate::losses::{ce_loss_and_grad, combined_loss_and_grad, row_block_norms, EmbeddingBatch, GradReport, LossConfig};
use crate::model::LinearModel;
use crate::rng::{self, SplitMix64};

const STREAM_BATCHES: u64 = 0x4241_5443;
const STREAM_VALID: u64 = 0x5641_4C49;
const STREAM_FD: u64 = 0x4644_4348;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchStrategy {
    /// Pair groups (an original and its counterfactuals) are atomic.
    PairCad,
    /// Uniform shuffle of all samples.
    ShuffCad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    AdamW {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::Sgd { lr, .. } | Optimizer::AdamW { lr, .. } => lr,
        }
    }

    pub fn adamw(lr: f64) -> Self {
        Optimizer::AdamW {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::arg("lr", format!("must be finite and non-negative, got {lr}")));
        }
        match *self {
            Optimizer::Sgd { momentum, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::arg("momentum", format!("must lie in [0,1), got {momentum}")));
                }
            }
            Optimizer::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    return Err(Error::arg("beta", "betas must lie in [0,1)"));
                }
                if !(eps > 0.0) || !(weight_decay >= 0.0) {
                    return Err(Error::arg("eps", "eps must be positive and weight_decay non-negative"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `λ·L_CL + (1−λ)·L_CE`.
    Combined,
    /// Cross-entropy through a separate code path, ignoring `λ`.
    CrossEntropyOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub batch_size: usize,
    pub strategy: BatchStrategy,
    pub optimizer: Optimizer,
    pub warmup_ratio: f64,
    pub lr_decay: LrDecay,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            batch_size: 32,
            strategy: BatchStrategy::PairCad,
            optimizer: Optimizer::Sgd { lr: 0.1, momentum: 0.0 },
            warmup_ratio: 0.05,
            lr_decay: LrDecay::Constant,
            max_epochs: 20,
            patience: 5,
            seed: 0,
            objective: Objective::Combined,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size < 2 {
            problems.push(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.patience < 1 {
            problems.push("patience must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            problems.push(format!("warmup_ratio must lie in [0,1), got {}", self.warmup_ratio));
        }
        if self.max_epochs < 1 {
            problems.push("max_epochs must be at least 1".to_string());
        }
        if let Err(e) = self.loss.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.optimizer.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    pub valid_accuracy: Vec<f64>,
    /// Last epoch run (1-based).
    pub stopping_epoch: usize,
    /// Epoch of the returned snapshot (1-based).
    pub best_epoch: usize,
    pub early_stopped: bool,
    pub steps: usize,
    /// Training seed followed by the per-epoch batching seeds.
    pub seed_chain: Vec<u64>,
    /// Batches dropped because the contrastive term was active and could not
    /// score them (fewer than two samples, or no contrastive structure).
    pub skipped_batches: usize,
    pub final_model: LinearModel,
}

/// Sample positions of each batch, in batch order.
pub fn make_batches(dataset: &PairedDataset, strategy: BatchStrategy, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::arg("batch_size", format!("must be at least 2, got {batch_size}")));
    }
    let mut rng = rng::stream(seed, &[STREAM_BATCHES]);
    match strategy {
        BatchStrategy::PairCad => {
            let group_len = dataset.max_group_len();
            if batch_size < group_len {
                return Err(Error::arg(
                    "batch_size",
                    format!("paircad batch size {batch_size} is smaller than a pair group of {group_len}"),
                ));
            }
            let mut order: Vec<usize> = (0..dataset.groups().len()).collect();
            rng.shuffle(&mut order);
            let mut batches = Vec::new();
            let mut current: Vec<usize> = Vec::new();
            for g in order {
                let group = &dataset.groups()[g];
                if current.len() + group.len() > batch_size {
                    batches.push(std::mem::take(&mut current));
                }
                current.extend(group.members());
            }
            if !current.is_empty() {
                batches.push(current);
            }
            Ok(batches)
        }
        BatchStrategy::ShuffCad => {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            rng.shuffle(&mut order);
            Ok(order
                .chunks(batch_size)
                .filter(|c| c.len() >= 2)
                .map(<[usize]>::to_vec)
                .collect())
        }
    }
}

/// Every counterfactual in each batch shares the batch with its original.
pub fn pairs_colocated(dataset: &PairedDataset, batches: &[Vec<usize>]) -> bool {
    batches.iter().all(|b| {
        b.iter().all(|&i| {
            let s = &dataset.samples()[i];
            dataset
                .group(s.pair_id)
                .is_some_and(|g| b.contains(&g.original))
        })
    })
}

/// `(z, logits)` for a batch of feature rows.
pub fn forward(model: &LinearModel, features: &Matrix) -> Result<(EmbeddingBatch, Matrix)> {
    let (z, logits) = model.forward(features)?;
    Ok((EmbeddingBatch { z, labels: Vec::new() }, logits))
}

/// Index of the largest logit; ties go to the lowest class id.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy loss and gradient computed without touching the
/// contrastive code path.
pub fn ce_only_loss_and_grad(model: &LinearModel, features: &Matrix, labels: &[usize]) -> Result<(f64, GradReport)> {
    let (z, logits) = model.forward(features)?;
    let (loss, g_logits) = ce_loss_and_grad(&logits, labels)?;
    let grad_head = z.t_matmul(&g_logits)?;
    let grad_bias = model.head_bias.as_ref().map(|b| {
        let mut gb = vec![0.0; b.len()];
        for r in 0..g_logits.rows() {
            for (acc, v) in gb.iter_mut().zip(g_logits.row(r)) {
                *acc += v;
            }
        }
        gb
    });
    let grad_encoder = if model.identity_encoder {
        None
    } else {
        Some(features.t_matmul(&g_logits.matmul_t(&model.head)?)?)
    };
    let encoder_block_norms = grad_encoder
        .as_ref()
        .map_or([0.0; 3], |g| row_block_norms(g, model.layout));
    Ok((
        loss,
        GradReport {
            grad_encoder,
            grad_head,
            grad_bias,
            encoder_block_norms,
        },
    ))
}

fn objective_loss_and_grad(
    model: &LinearModel,
    features: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, GradReport)> {
    match cfg.objective {
        Objective::Combined => combined_loss_and_grad(model, features, labels, &cfg.loss),
        Objective::CrossEntropyOnly => ce_only_loss_and_grad(model, features, labels),
    }
}

/// Like `objective_loss_and_grad`, but `None` for a batch the contrastive
/// term cannot score (for example only neutral samples once they are
/// excluded). Such batches are skipped like undersized ones.
fn batch_objective(
    model: &LinearModel,
    features: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Option<(f64, GradReport)>> {
    if uses_contrastive(cfg) && labels.len() < 2 {
        return Ok(None);
    }
    match objective_loss_and_grad(model, features, labels, cfg) {
        Ok(v) => Ok(Some(v)),
        Err(Error::Undefined(_)) if uses_contrastive(cfg) => Ok(None),
        Err(e) => Err(e),
    }
}

fn uses_contrastive(cfg: &TrainConfig) -> bool {
    cfg.objective == Objective::Combined && cfg.loss.lambda > 0.0
}

/// Per-step learning rate, `step` counted from 0.
pub fn scheduled_lr(base: f64, step: usize, total_steps: usize, warmup_ratio: f64, decay: LrDecay) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match decay {
        LrDecay::Constant => base,
        LrDecay::Linear => {
            let remaining = total_steps.saturating_sub(step) as f64;
            let span = total_steps.saturating_sub(warmup).max(1) as f64;
            base * (remaining / span).clamp(0.0, 1.0)
        }
    }
}

/// Optimizer state over the flattened trainable parameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    optimizer: Optimizer,
    first: Vec<f64>,
    second: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, n_params: usize) -> Self {
        Self {
            optimizer,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Applies one update in place with learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != grad.len() || params.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients, optimizer sized for {}",
                params.len(),
                grad.len(),
                self.first.len()
            )));
        }
        self.t += 1;
        match self.optimizer {
            Optimizer::Sgd { momentum, .. } => {
                for ((p, v), g) in params.iter_mut().zip(&mut self.first).zip(grad) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            Optimizer::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (((p, m), v), g) in params
                    .iter_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                    .zip(grad)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let update = (*m / c1) / ((*v / c2).sqrt() + eps) + weight_decay * *p;
                    *p -= lr * update;
                }
            }
        }
        Ok(())
    }
}

/// Size-weighted mean objective and accuracy over fixed batches.
fn validation_metrics(model: &LinearModel, valid: &PairedDataset, batches: &[Vec<usize>], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut counted = 0usize;
    for b in batches {
        let x = valid.features_of(b);
        let y = valid.labels_of(b);
        let Some((l, _)) = batch_objective(model, &x, &y, cfg)? else {
            continue;
        };
        loss += l * b.len() as f64;
        counted += b.len();
    }
    if counted == 0 {
        return Err(Error::arg("valid_set", "no usable validation batch"));
    }
    Ok((loss / counted as f64, accuracy(model, valid)?))
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn accuracy(model: &LinearModel, dataset: &PairedDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::arg("dataset", "accuracy of an empty dataset"));
    }
    let (_, logits) = model.forward(&dataset.features())?;
    let correct = dataset
        .samples()
        .iter()
        .enumerate()
        .filter(|(i, s)| argmax(logits.row(*i)) == s.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Trains from `model` and returns the snapshot with the lowest validation
/// loss. Early stopping triggers after `patience` epochs without a strict
/// improvement.
pub fn train(model: &LinearModel, train_set: &PairedDataset, valid_set: &PairedDataset, cfg: &TrainConfig) -> Result<(LinearModel, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::arg("dataset", "training and validation splits must be non-empty"));
    }
    for (name, ds) in [("train_set", train_set), ("valid_set", valid_set)] {
        if ds.layout().total() != model.input_dim() {
            return Err(Error::Shape(format!(
                "{name} has {} features, model expects {}",
                ds.layout().total(),
                model.input_dim()
            )));
        }
        if ds.num_classes() > model.num_classes() {
            return Err(Error::Shape(format!(
                "{name} has {} classes, model head has {}",
                ds.num_classes(),
                model.num_classes()
            )));
        }
    }
    let valid_batches = make_batches(
        valid_set,
        cfg.strategy,
        cfg.batch_size,
        rng::derive_seed(cfg.seed, &[STREAM_VALID]),
    )?;
    let epoch_seeds: Vec<u64> = (0..cfg.max_epochs as u64)
        .map(|e| rng::derive_seed(cfg.seed, &[STREAM_BATCHES, e]))
        .collect();
    let batches_per_epoch = make_batches(train_set, cfg.strategy, cfg.batch_size, epoch_seeds[0])?.len();
    let total_steps = batches_per_epoch * cfg.max_epochs;

    let mut current = model.clone();
    let mut params = current.params();
    let mut opt = OptimizerState::new(cfg.optimizer, params.len());
    let mut best = current.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut step = 0usize;
    let mut skipped = 0usize;
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        valid_loss: Vec::new(),
        valid_accuracy: Vec::new(),
        stopping_epoch: 0,
        best_epoch: 0,
        early_stopped: false,
        steps: 0,
        seed_chain: std::iter::once(cfg.seed).chain(epoch_seeds.iter().copied()).collect(),
        skipped_batches: 0,
        final_model: model.clone(),
    };

    for (e, &epoch_seed) in epoch_seeds.iter().enumerate() {
        let epoch = e + 1;
        let batches = make_batches(train_set, cfg.strategy, cfg.batch_size, epoch_seed)?;
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (b, idx) in batches.iter().enumerate() {
            let x = train_set.features_of(idx);
            let y = train_set.labels_of(idx);
            let Some((loss, grad)) = batch_objective(&current, &x, &y, cfg)? else {
                skipped += 1;
                continue;
            };
            let flat = grad.flat();
            if !loss.is_finite() || flat.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    encoder_norm: current.encoder_norm(),
                    head_norm: current.head_norm(),
                });
            }
            let lr = scheduled_lr(cfg.optimizer.lr(), step, total_steps, cfg.warmup_ratio, cfg.lr_decay);
            opt.step(&mut params, &flat, lr)?;
            current.set_params(&params)?;
            step += 1;
            epoch_loss += loss * idx.len() as f64;
            seen += idx.len();
        }
        let train_loss = if seen == 0 { f64::NAN } else { epoch_loss / seen as f64 };
        let (valid_loss, valid_acc) = validation_metrics(&current, valid_set, &valid_batches, cfg)?;
        if !valid_loss.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                batch: usize::MAX,
                encoder_norm: current.encoder_norm(),
                head_norm: current.head_norm(),
            });
        }
        history.train_loss.push(train_loss);
        history.valid_loss.push(valid_loss);
        history.valid_accuracy.push(valid_acc);
        history.stopping_epoch = epoch;
        if valid_loss < best_loss {
            best_loss = valid_loss;
            best_epoch = epoch;
            best = current.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.early_stopped = true;
                break;
            }
        }
    }
    history.best_epoch = best_epoch;
    history.steps = step;
    history.skipped_batches = skipped;
    history.final_model = current;
    Ok((best, history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst_coord: usize,
}

/// Central-difference check of `grad` against `f` at `theta` over `coords`,
/// with relative error `|a − fd| / max(1, |a|)`.
pub fn finite_diff_check_fn<F>(mut f: F, theta: &[f64], grad: &[f64], epsilon: f64, coords: &[usize]) -> Result<FiniteDiffReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::arg("epsilon", format!("must be positive, got {epsilon}")));
    }
    if theta.len() != grad.len() {
        return Err(Error::Shape(format!("{} parameters, {} gradients", theta.len(), grad.len())));
    }
    let mut probe = theta.to_vec();
    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst_coord: 0,
    };
    for &c in coords {
        if c >= theta.len() {
            return Err(Error::arg("coords", format!("coordinate {c} out of range")));
        }
        probe[c] = theta[c] + epsilon;
        let plus = f(&probe)?;
        probe[c] = theta[c] - epsilon;
        let minus = f(&probe)?;
        probe[c] = theta[c];
        let fd = (plus - minus) / (2.0 * epsilon);
        let err = (grad[c] - fd).abs() / grad[c].abs().max(1.0);
        if err > report.max_rel_err || report.coords_checked == 0 {
            report.max_rel_err = err;
            report.worst_coord = c;
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

/// Coordinates to probe: all of them up to `limit`, otherwise a seeded
/// random subset of `limit` distinct coordinates (`limit ≥ 200`).
pub fn probe_coords(n_params: usize, limit: usize, seed: u64) -> Vec<usize> {
    let limit = limit.max(200);
    let mut all: Vec<usize> = (0..n_params).collect();
    if n_params <= limit {
        return all;
    }
    let mut r: SplitMix64 = rng::stream(seed, &[STREAM_FD]);
    r.shuffle(&mut all);
    all.truncate(limit);
    all.sort_unstable();
    all
}

/// Checks the combined objective's analytic gradient on one batch.
pub fn finite_diff_check(
    model: &LinearModel,
    features: &Matrix,
    labels: &[usize],
    loss_cfg: &LossConfig,
    epsilon: f64,
) -> Result<FiniteDiffReport> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::arg("epsilon", format!("must be positive, got {epsilon}")));
    }
    let (_, grad) = combined_loss_and_grad(model, features, labels, loss_cfg)?;
    let theta = model.params();
    let coords = probe_coords(theta.len(), 1000, 0);
    let mut probe = model.clone();
    finite_diff_check_fn(
        |p| {
            probe.set_params(p)?;
            Ok(combined_loss_and_grad(&probe, features, labels, loss_cfg)?.0)
        },
        &theta,
        &grad.flat(),
        epsilon,
        &coords,
    )
}
