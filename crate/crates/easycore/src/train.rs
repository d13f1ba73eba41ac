//! SGD training loops: standard cross-entropy and TRADES.
//!
//! Both loops share the same seeded shuffle stream, so a TRADES run with a
//! zero-radius inner adversary follows the standard run bit for bit. When
//! hardness recording is on, a read-only pass after each epoch's updates
//! computes every sample's input-gradient norm on clean inputs with
//! unreduced per-sample cross-entropy and accumulates it into the ledger;
//! this matches replaying that epoch's checkpoint.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::attack::{self, AttackConfig, AttackObjective};
use crate::coreset::AignLedger;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, forward_graph, Model, ModelConfig};
use crate::rng::{self, derive_seed, Stream};
use crate::{Tape, Tensor};

/// Shard width for the scoring pass. Row independence makes the result
/// identical for any width; this only bounds memory and enables parallelism.
const SCORE_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub enum SchedulerSpec {
    /// initial_lr * gamma^(number of milestones <= epoch)
    MultiStep { milestones: Vec<usize>, gamma: f64 },
    /// initial_lr * gamma^floor(epoch / step_size)
    Step { step_size: usize, gamma: f64 },
    /// eta_min + (initial_lr - eta_min) * (1 + cos(pi * epoch / t_max)) / 2
    Cosine { t_max: usize, eta_min: f64 },
}

impl SchedulerSpec {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        match self {
            SchedulerSpec::MultiStep { milestones, gamma } => {
                if !milestones.windows(2).all(|w| w[0] < w[1]) {
                    issues.push("train.scheduler.milestones must be strictly increasing".into());
                }
                if !(*gamma > 0.0 && *gamma <= 1.0) {
                    issues.push(format!("train.scheduler.gamma must be in (0, 1], got {gamma}"));
                }
            }
            SchedulerSpec::Step { step_size, gamma } => {
                if *step_size == 0 {
                    issues.push("train.scheduler.step_size must be positive".into());
                }
                if !(*gamma > 0.0 && *gamma <= 1.0) {
                    issues.push(format!("train.scheduler.gamma must be in (0, 1], got {gamma}"));
                }
            }
            SchedulerSpec::Cosine { t_max, eta_min } => {
                if *t_max == 0 {
                    issues.push("train.scheduler.t_max must be positive".into());
                }
                if !eta_min.is_finite() || *eta_min < 0.0 {
                    issues.push(format!(
                        "train.scheduler.eta_min must be finite and >= 0, got {eta_min}"
                    ));
                }
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { issues })
        }
    }
}

/// Learning rate at a given epoch. Total on any validated spec.
pub fn lr_at(spec: &SchedulerSpec, initial_lr: f64, epoch: usize) -> f64 {
    match spec {
        SchedulerSpec::MultiStep { milestones, gamma } => {
            let hits = milestones.iter().filter(|&&m| m <= epoch).count();
            initial_lr * gamma.powi(hits as i32)
        }
        SchedulerSpec::Step { step_size, gamma } => {
            initial_lr * gamma.powi((epoch / step_size) as i32)
        }
        SchedulerSpec::Cosine { t_max, eta_min } => {
            let phase = std::f64::consts::PI * epoch as f64 / *t_max as f64;
            eta_min + 0.5 * (initial_lr - eta_min) * (1.0 + phase.cos())
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// In [0, 1).
    pub momentum: f64,
    pub weight_decay: f64,
    pub scheduler: SchedulerSpec,
    pub seed: u64,
    /// Write a checkpoint every k epochs; 0 disables checkpointing.
    pub checkpoint_every: usize,
    /// Required when checkpoint_every > 0.
    pub checkpoint_dir: Option<PathBuf>,
    /// Record per-sample input-gradient norms on the training data after
    /// each epoch's updates.
    pub record_aign: bool,
    /// Keep the raw per-epoch norm matrix inside the ledger.
    pub aign_trajectory: bool,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, initial_lr: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            initial_lr,
            momentum: 0.9,
            weight_decay: 5e-4,
            scheduler: SchedulerSpec::MultiStep {
                milestones: vec![75, 90],
                gamma: 0.1,
            },
            seed,
            checkpoint_every: 0,
            checkpoint_dir: None,
            record_aign: false,
            aign_trajectory: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.batch_size == 0 {
            issues.push("train.batch_size must be positive".into());
        }
        if !(self.initial_lr > 0.0) {
            issues.push(format!("train.initial_lr must be > 0, got {}", self.initial_lr));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            issues.push(format!("train.momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            issues.push(format!(
                "train.weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            issues.push("train.checkpoint_dir is required when checkpoint_every > 0".into());
        }
        if let Err(Error::InvalidConfig { issues: more }) = self.scheduler.validate() {
            issues.extend(more);
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { issues })
        }
    }
}

#[derive(Debug, Clone)]
pub struct TradesConfig {
    /// Weight of the robust KL term.
    pub beta: f64,
    /// Inner adversary; its objective must be the KL divergence to the
    /// clean prediction, not cross-entropy.
    pub inner_attack: AttackConfig,
}

impl TradesConfig {
    /// Default inner adversary: PGD-10 with step epsilon/4 and random start.
    pub fn new(beta: f64, epsilon: f64) -> Self {
        let mut inner_attack = AttackConfig::training(epsilon, 10, 0);
        inner_attack.objective = AttackObjective::KlToClean;
        TradesConfig { beta, inner_attack }
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if !(self.beta >= 0.0) {
            issues.push(format!("trades.beta must be >= 0, got {}", self.beta));
        }
        if self.inner_attack.objective != AttackObjective::KlToClean {
            issues.push("trades.inner_attack objective must be kl-to-clean".into());
        }
        if let Err(Error::InvalidConfig { issues: more }) = self.inner_attack.validate() {
            issues.extend(more);
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { issues })
        }
    }
}

/// Momentum buffers aligned with the model's parameter order.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn for_model(model: &Model) -> Self {
        SgdState {
            velocity: model
                .params()
                .iter()
                .map(|p| vec![0.0; p.tensor.len()])
                .collect(),
        }
    }
}

/// One SGD update from the gradients accumulated in the model:
/// v <- momentum * v + (grad + weight_decay * w); w <- w - lr * v.
/// Gradients are left in place; the caller decides when to zero them.
pub fn sgd_step(
    model: &mut Model,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState,
) -> Result<()> {
    if state.velocity.len() != model.params().len() {
        return Err(Error::shape(
            "sgd_step",
            &[state.velocity.len()],
            &[model.params().len()],
        ));
    }
    for (param, velocity) in model.params_mut().iter_mut().zip(&mut state.velocity) {
        let n = param.tensor.len();
        if velocity.len() != n {
            return Err(Error::shape("sgd_step", &[velocity.len()], &[n]));
        }
        let grad = param.tensor.grad().unwrap_or(&[]);
        if grad.len() != n {
            return Err(Error::shape("sgd_step", &[grad.len()], &[n]));
        }
        // Two passes keep the borrow checker happy: compute v from (g, w),
        // then update w from v.
        for ((v, &g), &w) in velocity.iter_mut().zip(grad).zip(param.tensor.values().iter()) {
            *v = momentum * *v + (g + weight_decay * w);
        }
        for (w, &v) in param.tensor.values_mut().iter_mut().zip(velocity.iter()) {
            *w -= lr * v;
        }
    }
    Ok(())
}

/// Per-sample l2 norm of the input gradient of the (unreduced) cross-entropy,
/// in dataset row order. The model is read-only; shards run in parallel and
/// merge by position.
pub fn input_gradient_norms(model: &Model, data: &Dataset) -> Result<Vec<f64>> {
    let n = data.n();
    let starts: Vec<usize> = (0..n).step_by(SCORE_BATCH).collect();
    let shards: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&start| -> Result<Vec<f64>> {
            let end = (start + SCORE_BATCH).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let (x, y) = data.batch(&rows);
            let d = data.dim();
            let mut tape = Tape::new();
            let xv = tape.leaf_from(x.shape().to_vec(), x.values().to_vec(), true);
            let pass = model.forward_pass(&mut tape, xv, false)?;
            let losses = tape.softmax_cross_entropy(pass.logits, &y)?;
            // Rows are independent, so the gradient of the summed loss has
            // sample i's own gradient in row i.
            let total = tape.sum(losses);
            tape.backward(total)?;
            let grad = tape.grad(xv);
            let norms: Vec<f64> = grad
                .chunks(d)
                .map(|row| row.iter().map(|g| g * g).sum::<f64>().sqrt())
                .collect();
            if norms.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "input gradient norms".into(),
                });
            }
            Ok(norms)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(shards.concat())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Training log CSV: `epoch,lr,mean_loss,train_accuracy`.
pub fn write_training_log<P: AsRef<Path>>(path: P, log: &[EpochLog]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "epoch,lr,mean_loss,train_accuracy")?;
    for entry in log {
        writeln!(
            w,
            "{},{},{},{}",
            entry.epoch, entry.lr, entry.mean_loss, entry.train_accuracy
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Present when record_aign was set; counts stay zero for a 0-epoch run.
    pub ledger: Option<AignLedger>,
    pub log: Vec<EpochLog>,
}

enum Mode<'a> {
    Standard,
    Trades(&'a TradesConfig),
}

/// TRADES objective for one batch on an existing tape. Builds
/// mean CE(f(x), y) + beta * mean KL(f(x') || f(x)) with x' treated as a
/// constant, sharing one parameter binding so gradients of both terms land
/// in the same buffers.
fn trades_objective(
    tape: &mut Tape,
    model: &Model,
    x: &Tensor,
    x_adv: &Tensor,
    labels: &[usize],
    beta: f64,
) -> Result<(crate::VarId, crate::VarId, Vec<crate::VarId>)> {
    let xv = tape.leaf_from(x.shape().to_vec(), x.values().to_vec(), false);
    let pass = model.forward_pass(tape, xv, true)?;
    let ce = tape.softmax_cross_entropy(pass.logits, labels)?;
    let ce_mean = tape.mean(ce);
    let adv = tape.leaf_from(x_adv.shape().to_vec(), x_adv.values().to_vec(), false);
    let (_, adv_logits) = forward_graph(tape, model.config(), &pass.param_vars, adv)?;
    let kl = tape.kl_divergence(adv_logits, pass.logits)?;
    let kl_mean = tape.mean(kl);
    let weighted = tape.scale(kl_mean, beta);
    let loss = tape.add(ce_mean, weighted)?;
    Ok((loss, pass.logits, pass.param_vars))
}

/// Loss value of the TRADES objective for one batch, running the inner
/// adversary to produce x'. Exposed for inspection and tests; the training
/// loop computes the same quantity with gradients.
pub fn trades_loss(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &TradesConfig,
) -> Result<f64> {
    cfg.validate()?;
    let x_adv = attack::pgd(model, x, labels, &cfg.inner_attack)?;
    let mut tape = Tape::new();
    let (loss, _, _) = trades_objective(&mut tape, model, x, &x_adv, labels, cfg.beta)?;
    let value = tape.scalar_value(loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "trades loss".into(),
        });
    }
    Ok(value)
}

fn run_training<F>(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mode: Mode<'_>,
    mut hook: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Model, usize) -> Result<()>,
{
    cfg.validate()?;
    if let Mode::Trades(trades) = &mode {
        trades.validate()?;
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ledger = cfg
        .record_aign
        .then(|| AignLedger::new(&data.ids, cfg.aign_trajectory));
    let mut state = SgdState::for_model(model);
    let mut log = Vec::with_capacity(cfg.epochs);
    let n = data.n();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(&cfg.scheduler, cfg.initial_lr, epoch);
        // Seeded shuffle, derived identically for every mode.
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_stream = Stream::derived(cfg.seed, "shuffle", epoch as u64);
        rng::shuffle(&mut shuffle_stream, &mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, rows) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.batch(rows);
            let batch_loss = match &mode {
                Mode::Standard => {
                    let mut tape = Tape::new();
                    let xv = tape.leaf_from(x.shape().to_vec(), x.values().to_vec(), false);
                    let pass = model.forward_pass(&mut tape, xv, true)?;
                    let losses = tape.softmax_cross_entropy(pass.logits, &y)?;
                    let loss = tape.mean(losses);
                    let value = tape.scalar_value(loss)?;
                    tape.backward(loss)?;
                    pass.add_param_grads_to(&tape, model);
                    correct += count_correct(tape.values(pass.logits), &y, data.class_count);
                    value
                }
                Mode::Trades(trades) => {
                    let mut inner = trades.inner_attack.clone();
                    inner.start_seed = derive_seed(
                        cfg.seed,
                        "trades-start",
                        (epoch * 1_000_003 + batch_idx) as u64,
                    );
                    let x_adv = attack::pgd(model, &x, &y, &inner)?;
                    let mut tape = Tape::new();
                    let (loss, clean_logits, param_vars) =
                        trades_objective(&mut tape, model, &x, &x_adv, &y, trades.beta)?;
                    let value = tape.scalar_value(loss)?;
                    tape.backward(loss)?;
                    for (var, p) in param_vars.iter().zip(model.params_mut().iter_mut()) {
                        tape.add_grad_to(*var, &mut p.tensor);
                    }
                    correct += count_correct(tape.values(clean_logits), &y, data.class_count);
                    value
                }
            };
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}, batch {batch_idx}"),
                });
            }
            loss_sum += batch_loss * rows.len() as f64;
            sgd_step(model, lr, cfg.momentum, cfg.weight_decay, &mut state)?;
            model.zero_grads();
        }

        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            let dir = cfg.checkpoint_dir.as_ref().expect("validated");
            fs::create_dir_all(dir)?;
            model.save_checkpoint(dir.join(format!("epoch-{epoch:04}.ezc")))?;
        }
        if let Some(ledger) = &mut ledger {
            let norms = input_gradient_norms(model, data)?;
            ledger.record_epoch(&norms);
        }
        hook(model, epoch)?;

        log.push(EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
        });
    }
    Ok(TrainOutcome { ledger, log })
}

fn count_correct(logits: &[f64], labels: &[usize], classes: usize) -> usize {
    argmax_rows(logits, classes)
        .iter()
        .zip(labels)
        .filter(|(p, t)| p == t)
        .count()
}

/// Seeded-shuffled mini-batch SGD on softmax cross-entropy.
pub fn train_standard(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run_training(model, data, cfg, Mode::Standard, |_, _| Ok(()))
}

/// [`train_standard`] with a read-only hook called after each epoch's
/// updates, checkpoint, and ledger pass. Extra scoring (for example on an
/// evaluation split) goes through here.
pub fn train_standard_with<F>(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    hook: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Model, usize) -> Result<()>,
{
    run_training(model, data, cfg, Mode::Standard, hook)
}

/// Mini-batch SGD on the TRADES objective.
pub fn train_trades(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    trades: &TradesConfig,
) -> Result<TrainOutcome> {
    run_training(model, data, cfg, Mode::Trades(trades), |_, _| Ok(()))
}

pub fn train_trades_with<F>(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    trades: &TradesConfig,
    hook: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&Model, usize) -> Result<()>,
{
    run_training(model, data, cfg, Mode::Trades(trades), hook)
}

/// Checkpoint-replay scoring: load each epoch checkpoint in the order given
/// and accumulate one scoring pass per checkpoint. Produces the same ledger
/// as on-the-fly recording over the same epochs.
pub fn score_from_checkpoints<P: AsRef<Path>>(
    config: ModelConfig,
    data: &Dataset,
    checkpoints: &[P],
    track_per_epoch: bool,
) -> Result<AignLedger> {
    let mut ledger = AignLedger::new(&data.ids, track_per_epoch);
    for path in checkpoints {
        let model = Model::load_checkpoint(config, path)?;
        let norms = input_gradient_norms(&model, data)?;
        ledger.record_epoch(&norms);
    }
    Ok(ledger)
}
