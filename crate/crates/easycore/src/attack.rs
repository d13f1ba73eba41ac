//! FGSM and PGD adversaries under the l-infinity ball.
//!
//! Both attacks maximize their objective by stepping along the sign of the
//! input gradient. The model architecture is row-independent, so attacking
//! a batch is exactly per-sample attacking; batch boundaries never change
//! results. Update order per step: gradient step, then projection onto the
//! epsilon-ball around the original input, then the domain clip. The two
//! clips do not commute at domain boundaries, so the order is part of the
//! contract.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{derive_seed, Stream};
use crate::{Tape, Tensor};

/// Batch width used when evaluating whole datasets. Fixed so that derived
/// random-start seeds are stable.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackObjective {
    /// Maximize cross-entropy against the true labels.
    CrossEntropy,
    /// Maximize KL(prediction on the iterate || prediction on the clean
    /// input); the inner objective of TRADES.
    KlToClean,
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// l-infinity ball radius in input units.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub start_seed: u64,
    pub clip_min: Option<f64>,
    pub clip_max: Option<f64>,
    pub objective: AttackObjective,
}

impl AttackConfig {
    /// Deterministic evaluation adversary: no random start, step epsilon/4.
    pub fn evaluation(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            steps,
            step_size: epsilon / 4.0,
            random_start: false,
            start_seed: 0,
            clip_min: None,
            clip_max: None,
            objective: AttackObjective::CrossEntropy,
        }
    }

    /// Training-time adversary: seeded random start, step epsilon/4.
    pub fn training(epsilon: f64, steps: usize, start_seed: u64) -> Self {
        AttackConfig {
            epsilon,
            steps,
            step_size: epsilon / 4.0,
            random_start: true,
            start_seed,
            clip_min: None,
            clip_max: None,
            objective: AttackObjective::CrossEntropy,
        }
    }

    pub fn with_clip(mut self, min: f64, max: f64) -> Self {
        self.clip_min = Some(min);
        self.clip_max = Some(max);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if !(self.epsilon >= 0.0) {
            issues.push(format!("attack.epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.steps == 0 {
            issues.push("attack.steps must be positive".to_string());
        }
        // A zero-radius ball makes the attack a no-op, so a zero step is
        // only meaningful (and allowed) there.
        if !(self.step_size > 0.0) && self.epsilon != 0.0 {
            issues.push(format!(
                "attack.step_size must be > 0, got {}",
                self.step_size
            ));
        }
        if self.step_size < 0.0 {
            issues.push(format!(
                "attack.step_size must not be negative, got {}",
                self.step_size
            ));
        }
        if let (Some(lo), Some(hi)) = (self.clip_min, self.clip_max) {
            if !(lo < hi) {
                issues.push(format!(
                    "attack.clip_min {lo} must be below attack.clip_max {hi}"
                ));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { issues })
        }
    }
}

/// sign with sign(0) = 0, unlike f64::signum.
#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clip_domain(values: &mut [f64], clip_min: Option<f64>, clip_max: Option<f64>) {
    if let Some(lo) = clip_min {
        for v in values.iter_mut() {
            if *v < lo {
                *v = lo;
            }
        }
    }
    if let Some(hi) = clip_max {
        for v in values.iter_mut() {
            if *v > hi {
                *v = hi;
            }
        }
    }
}

/// Gradient of the summed objective with respect to the input batch.
/// Row independence of the model makes row i of the result the gradient of
/// sample i's own objective.
fn batch_input_gradient(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    objective: AttackObjective,
    clean_logits: Option<&Tensor>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.leaf_from(x.shape().to_vec(), x.values().to_vec(), true);
    let pass = model.forward_pass(&mut tape, xv, false)?;
    let per_sample = match objective {
        AttackObjective::CrossEntropy => tape.softmax_cross_entropy(pass.logits, labels)?,
        AttackObjective::KlToClean => {
            let clean = clean_logits.expect("clean logits required for the KL objective");
            let cl = tape.leaf_from(clean.shape().to_vec(), clean.values().to_vec(), false);
            tape.kl_divergence(pass.logits, cl)?
        }
    };
    let total = tape.sum(per_sample);
    tape.backward(total)?;
    let grad = tape.grad(xv).to_vec();
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "attack input gradient".to_string(),
        });
    }
    Ok(grad)
}

/// Single-step sign-gradient attack on cross-entropy:
/// x_adv = clip(x + epsilon * sign(grad)).
pub fn fgsm(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    clip: Option<(f64, f64)>,
) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::config(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let grad = batch_input_gradient(model, x, labels, AttackObjective::CrossEntropy, None)?;
    let mut adv: Vec<f64> = x
        .values()
        .iter()
        .zip(&grad)
        .map(|(&v, &g)| v + epsilon * sign0(g))
        .collect();
    clip_domain(&mut adv, clip.map(|c| c.0), clip.map(|c| c.1));
    Tensor::new(x.shape().to_vec(), adv)
}

/// Iterated projected sign-gradient attack. Returns the final iterate; the
/// output is always inside the epsilon-ball around `x` and inside the
/// domain clip when the clean input is.
pub fn pgd(model: &Model, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let orig = x.values();
    let mut adv = orig.to_vec();
    if cfg.random_start {
        let mut stream = Stream::derived(cfg.start_seed, "pgd-start", 0);
        for v in adv.iter_mut() {
            *v += stream.range_f64(-cfg.epsilon, cfg.epsilon);
        }
        clip_domain(&mut adv, cfg.clip_min, cfg.clip_max);
    }
    let clean_logits = match cfg.objective {
        AttackObjective::KlToClean => Some(model.forward_logits(x)?),
        AttackObjective::CrossEntropy => None,
    };
    let shape = x.shape().to_vec();
    for _ in 0..cfg.steps {
        let iterate = Tensor::new(shape.clone(), adv.clone())?;
        let grad =
            batch_input_gradient(model, &iterate, labels, cfg.objective, clean_logits.as_ref())?;
        for (v, &g) in adv.iter_mut().zip(&grad) {
            *v += cfg.step_size * sign0(g);
        }
        // Project back into the ball, then clip to the domain.
        for (v, &o) in adv.iter_mut().zip(orig) {
            *v = v.clamp(o - cfg.epsilon, o + cfg.epsilon);
        }
        clip_domain(&mut adv, cfg.clip_min, cfg.clip_max);
    }
    Tensor::new(shape, adv)
}

/// Per-sample evaluation of a model under PGD.
#[derive(Debug, Clone)]
pub struct AttackReport {
    pub clean_correct: Vec<bool>,
    pub adv_correct: Vec<bool>,
    /// max |x_adv - x| per sample.
    pub linf: Vec<f64>,
    pub clean_accuracy: f64,
    pub adv_accuracy: f64,
}

/// Attack every sample and score both clean and adversarial predictions.
/// Batches run in parallel against the read-only model; per-batch
/// random-start seeds are derived from the batch's position, so results do
/// not depend on the thread count.
pub fn evaluate_attack(model: &Model, data: &Dataset, cfg: &AttackConfig) -> Result<AttackReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    let n = data.n();
    let starts: Vec<usize> = (0..n).step_by(EVAL_BATCH).collect();
    let chunks: Vec<(Vec<bool>, Vec<bool>, Vec<f64>)> = starts
        .par_iter()
        .map(|&start| -> Result<(Vec<bool>, Vec<bool>, Vec<f64>)> {
            let end = (start + EVAL_BATCH).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let (x, y) = data.batch(&rows);
            let mut batch_cfg = cfg.clone();
            batch_cfg.start_seed = derive_seed(cfg.start_seed, "attack-batch", start as u64);
            let adv = pgd(model, &x, &y, &batch_cfg)?;
            let clean_pred = model.predict(&x)?;
            let adv_pred = model.predict(&adv)?;
            let clean_ok: Vec<bool> = clean_pred.iter().zip(&y).map(|(p, t)| p == t).collect();
            let adv_ok: Vec<bool> = adv_pred.iter().zip(&y).map(|(p, t)| p == t).collect();
            let d = data.dim();
            let linf: Vec<f64> = (0..rows.len())
                .map(|r| {
                    x.values()[r * d..(r + 1) * d]
                        .iter()
                        .zip(&adv.values()[r * d..(r + 1) * d])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .collect();
            Ok((clean_ok, adv_ok, linf))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut clean_correct = Vec::with_capacity(n);
    let mut adv_correct = Vec::with_capacity(n);
    let mut linf = Vec::with_capacity(n);
    for (c, a, l) in chunks {
        clean_correct.extend(c);
        adv_correct.extend(a);
        linf.extend(l);
    }
    let frac = |v: &[bool]| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64;
    Ok(AttackReport {
        clean_accuracy: frac(&clean_correct),
        adv_accuracy: frac(&adv_correct),
        clean_correct,
        adv_correct,
        linf,
    })
}

/// Fraction of samples still classified correctly after PGD, with the
/// per-sample outcomes for hardness-curve analysis.
pub fn adversarial_accuracy(
    model: &Model,
    data: &Dataset,
    cfg: &AttackConfig,
) -> Result<(f64, Vec<bool>)> {
    let report = evaluate_attack(model, data, cfg)?;
    Ok((report.adv_accuracy, report.adv_correct))
}

/// Dump per-sample attack outcomes: `id,clean_correct,adv_correct,linf_perturbation`.
pub fn write_attack_csv<P: AsRef<Path>>(
    path: P,
    ids: &[usize],
    report: &AttackReport,
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "id,clean_correct,adv_correct,linf_perturbation")?;
    for (((&id, &c), &a), &l) in ids
        .iter()
        .zip(&report.clean_correct)
        .zip(&report.adv_correct)
        .zip(&report.linf)
    {
        writeln!(w, "{id},{},{},{l}", c as u8, a as u8)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_attack_csv<P: AsRef<Path>>(path: P) -> Result<Vec<(usize, bool, bool, f64)>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "id,clean_correct,adv_correct,linf_perturbation")) => {}
        Some((_, header)) => {
            return Err(Error::CsvFormat {
                path: display,
                line: 1,
                msg: format!("unexpected header {header:?}"),
            })
        }
        None => return Err(Error::EmptyDataset),
    }
    let mut rows = Vec::new();
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::CsvFormat {
                path: display,
                line: line_no + 1,
                msg: format!("expected 4 columns, got {}", fields.len()),
            });
        }
        let parse_err = |field: &str| Error::CsvFormat {
            path: display.clone(),
            line: line_no + 1,
            msg: format!("bad field {field:?}"),
        };
        rows.push((
            fields[0].parse().map_err(|_| parse_err(fields[0]))?,
            fields[1] == "1",
            fields[2] == "1",
            fields[3].parse().map_err(|_| parse_err(fields[3]))?,
        ));
    }
    Ok(rows)
}
