//! Distillation losses and schedules.
//!
//! The student minimizes a blend of hard-label cross-entropy and a KL
//! divergence to a *mixed* target built from teacher and student logits:
//!
//! - [`mix_logits`]: `β·z_teacher + (1−β)·z_student`, detached, so the
//!   target is a constant each step and gradient reaches the student only
//!   through its own distribution.
//! - [`beta_at_epoch`]: `max(β_floor, β_start·(1 − e/E))`, annealing the
//!   target from teacher-dominated toward the student over training.
//! - [`reverse_kl_loss`] / [`forward_kl_loss`]: `KL(student ‖ target)`
//!   (mode-seeking) and `KL(target ‖ student)` (mass-covering), both
//!   computed on temperature-`T` softened distributions and scaled by `T²`.
//! - [`stepwise_loss`]: the same loss over length-`k` time segments,
//!   aggregated so the result matches the unchunked loss (bit-exactly when
//!   `k` covers the whole sequence).
//!
//! All tensor math here is finite-logit territory: model outputs are always
//! finite, and the constant target side is clamped at probability 1e-12
//! before any logarithm that could otherwise reach `-inf`.

use crate::data::{Batch, PAD_ID};
use crate::error::{invalid, Result};
use crate::model::Weights;
use crate::tensor::{cross_entropy, Graph, Tensor};

/// Which direction the distillation KL points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `KL(student ‖ target)`: mode-seeking.
    Reverse,
    /// `KL(target ‖ student)`: mass-covering.
    Forward,
}

impl std::str::FromStr for Objective {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse" => Ok(Objective::Reverse),
            "forward" => Ok(Objective::Forward),
            _ => Err(invalid!("objective must be `reverse` or `forward`, got {s:?}")),
        }
    }
}

/// How two teachers are merged into one training signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherCombination {
    /// Average the per-teacher distillation losses.
    MeanLoss,
    /// Average the teachers' probability distributions, then distill once.
    MeanProb,
}

impl std::str::FromStr for TeacherCombination {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-loss" => Ok(TeacherCombination::MeanLoss),
            "mean-prob" => Ok(TeacherCombination::MeanProb),
            _ => Err(invalid!(
                "teacher combination must be `mean-loss` or `mean-prob`, got {s:?}"
            )),
        }
    }
}

/// Positional aggregation of the per-position KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over all batch × time positions (default; keeps the loss scale
    /// independent of batch geometry).
    Mean,
    /// Plain sum over positions.
    Sum,
}

impl std::str::FromStr for Reduction {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            _ => Err(invalid!("reduction must be `mean` or `sum`, got {s:?}")),
        }
    }
}

/// Hyperparameters of the distillation objective.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub objective: Objective,
    pub temperature: f64,
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_floor: f64,
    pub chunk_size: usize,
    pub teacher_combination: TeacherCombination,
    pub reduction: Reduction,
}

impl DistillConfig {
    /// Standard hyperparameters (T = 2, α = 0.5, β: 0.7 → 0.1, k = 5) with
    /// the conventional teacher combination for the objective: mean-loss
    /// for forward, mean-prob for reverse.
    pub fn defaults(objective: Objective) -> DistillConfig {
        DistillConfig {
            objective,
            temperature: 2.0,
            alpha: 0.5,
            beta_start: 0.7,
            beta_floor: 0.1,
            chunk_size: 5,
            teacher_combination: match objective {
                Objective::Forward => TeacherCombination::MeanLoss,
                Objective::Reverse => TeacherCombination::MeanProb,
            },
            reduction: Reduction::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= 1.0) {
            return Err(invalid!("beta_start must lie in (0, 1], got {}", self.beta_start));
        }
        if !(0.0..=1.0).contains(&self.beta_floor) || self.beta_floor > self.beta_start {
            return Err(invalid!(
                "beta_floor must lie in [0, beta_start], got {}",
                self.beta_floor
            ));
        }
        if self.chunk_size == 0 {
            return Err(invalid!("chunk_size must be positive"));
        }
        Ok(())
    }
}

/// Where a training run currently sits in its β schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochState {
    pub epoch: usize,
    pub total_epochs: usize,
    pub beta: f64,
}

impl EpochState {
    pub fn new(epoch: usize, total_epochs: usize, cfg: &DistillConfig) -> Result<EpochState> {
        Ok(EpochState {
            epoch,
            total_epochs,
            beta: beta_at_epoch(epoch, total_epochs, cfg.beta_start, cfg.beta_floor)?,
        })
    }
}

/// The pieces of one training step's loss, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub student_ce: f64,
    pub distillation: f64,
    pub total: f64,
    pub beta: f64,
    pub temperature: f64,
}

/// A step's loss tensor together with the graph that can differentiate it.
pub struct StepOutput {
    pub graph: Graph,
    pub loss: Tensor,
    pub breakdown: LossBreakdown,
}

/// `β·z_teacher + (1−β)·z_student`, detached from any graph: the result is
/// a constant target. β = 1 and β = 0 return exact elementwise copies.
pub fn mix_logits(z_teacher: &Tensor, z_student: &Tensor, beta: f64) -> Result<Tensor> {
    if z_teacher.shape() != z_student.shape() {
        return Err(invalid!(
            "mix_logits shapes differ: {:?} vs {:?}",
            z_teacher.shape(),
            z_student.shape()
        ));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid!("beta must lie in [0, 1], got {beta}"));
    }
    let data = if beta == 1.0 {
        z_teacher.to_vec()
    } else if beta == 0.0 {
        z_student.to_vec()
    } else {
        let (t, s) = (z_teacher.data(), z_student.data());
        t.iter()
            .zip(s.iter())
            .map(|(&zt, &zs)| beta * zt + (1.0 - beta) * zs)
            .collect()
    };
    Tensor::from_vec(z_teacher.shape().to_vec(), data)
}

/// `max(β_floor, β_start·(1 − e/total_epochs))`.
pub fn beta_at_epoch(
    epoch: usize,
    total_epochs: usize,
    beta_start: f64,
    beta_floor: f64,
) -> Result<f64> {
    if total_epochs == 0 {
        return Err(invalid!("total_epochs must be positive"));
    }
    let linear = beta_start * (1.0 - epoch as f64 / total_epochs as f64);
    Ok(beta_floor.max(linear))
}

fn log_prob_floor() -> f64 {
    1e-12_f64.ln()
}

/// Sum over positions of the per-position KL, on temperature-`t` softened
/// distributions, with no `T²` factor or mean divisor applied yet. The
/// mixed side is treated as a constant.
fn kl_position_sum(
    objective: Objective,
    z_student: &Tensor,
    z_mixed: &Tensor,
    t: f64,
) -> Result<Tensor> {
    if z_student.shape() != z_mixed.shape() {
        return Err(invalid!(
            "KL loss shapes differ: {:?} vs {:?}",
            z_student.shape(),
            z_mixed.shape()
        ));
    }
    let target = z_mixed.detach();
    match objective {
        Objective::Reverse => {
            // sum_v q_v (ln q_v − ln p_v), q tracked, p constant.
            let q = z_student.softmax_with_temperature(t)?;
            let lq = z_student.log_softmax_with_temperature(t)?;
            let lp = {
                let raw = target.log_softmax_with_temperature(t)?;
                let floor = log_prob_floor();
                let data: Vec<f64> = raw.data().iter().map(|&v| v.max(floor)).collect();
                Tensor::from_vec(raw.shape().to_vec(), data)?
            };
            q.mul(&lq.sub(&lp)?)?.sum_all()
        }
        Objective::Forward => {
            // sum_v p_v (ln p_v − ln q_v) = Σ p ln p − Σ p ln q.
            // The entropy term is a constant; 0·ln 0 counts as 0.
            let p = target.softmax_with_temperature(t)?;
            let lp = target.log_softmax_with_temperature(t)?;
            let entropy_side: f64 = p
                .data()
                .iter()
                .zip(lp.data().iter())
                .map(|(&pv, &lpv)| if pv > 0.0 { pv * lpv } else { 0.0 })
                .sum();
            let lq = z_student.log_softmax_with_temperature(t)?;
            let cross = p.mul(&lq)?.sum_all()?.scale(-1.0)?;
            Tensor::scalar(entropy_side).add(&cross)
        }
    }
}

/// Apply the `T²` compensation and the positional reduction in one
/// multiplication (so chunked and unchunked paths share the same final
/// arithmetic).
fn finish_loss(sum: Tensor, t: f64, reduction: Reduction, n_positions: usize) -> Result<Tensor> {
    let factor = match reduction {
        Reduction::Sum => t * t,
        Reduction::Mean => t * t / n_positions as f64,
    };
    sum.scale(factor)
}

/// `T²·KL(softmax(z_student/T) ‖ softmax(z_mixed/T))`, reduced over
/// positions. Differentiable with respect to `z_student` only.
pub fn reverse_kl_loss(
    z_student: &Tensor,
    z_mixed: &Tensor,
    temperature: f64,
    reduction: Reduction,
) -> Result<Tensor> {
    let v = *z_student.shape().last().expect("non-empty shape");
    let sum = kl_position_sum(Objective::Reverse, z_student, z_mixed, temperature)?;
    finish_loss(sum, temperature, reduction, z_student.numel() / v)
}

/// `T²·KL(softmax(z_mixed/T) ‖ softmax(z_student/T))`, reduced over
/// positions. Differentiable with respect to `z_student` only.
pub fn forward_kl_loss(
    z_student: &Tensor,
    z_mixed: &Tensor,
    temperature: f64,
    reduction: Reduction,
) -> Result<Tensor> {
    let v = *z_student.shape().last().expect("non-empty shape");
    let sum = kl_position_sum(Objective::Forward, z_student, z_mixed, temperature)?;
    finish_loss(sum, temperature, reduction, z_student.numel() / v)
}

/// The distillation loss computed over time segments of length
/// `chunk_size`, then aggregated. Equals the unchunked loss up to float
/// regrouping (bit-exactly when one chunk covers the whole sequence).
/// Expects `[batch, time, vocab]` logits.
pub fn stepwise_loss(
    objective: Objective,
    z_student: &Tensor,
    z_mixed: &Tensor,
    temperature: f64,
    chunk_size: usize,
    reduction: Reduction,
) -> Result<Tensor> {
    if z_student.ndim() != 3 {
        return Err(invalid!(
            "stepwise loss expects [batch, time, vocab] logits, got {:?}",
            z_student.shape()
        ));
    }
    if chunk_size == 0 {
        return Err(invalid!("chunk_size must be positive"));
    }
    let (l, v) = (z_student.shape()[1], z_student.shape()[2]);
    let mut total: Option<Tensor> = None;
    let mut start = 0;
    while start < l {
        let len = chunk_size.min(l - start);
        let zs_seg = z_student.narrow(1, start, len)?;
        let zm_seg = z_mixed.narrow(1, start, len)?;
        let seg = kl_position_sum(objective, &zs_seg, &zm_seg, temperature)?;
        total = Some(match total {
            None => seg,
            Some(acc) => acc.add(&seg)?,
        });
        start += len;
    }
    let sum = total.expect("sequence length is positive");
    finish_loss(sum, temperature, reduction, z_student.numel() / v)
}

/// Merge teacher logits into a single target by averaging distributions:
/// `ln(clamp(mean_i softmax(z_i), 1e-12))`. A single teacher passes
/// through unchanged (same tensor, same bits).
pub fn combine_teachers(teacher_logits: &[Tensor]) -> Result<Tensor> {
    match teacher_logits {
        [] => Err(invalid!("at least one teacher is required")),
        [only] => Ok(only.clone()),
        [first, rest @ ..] => {
            for t in rest {
                if t.shape() != first.shape() {
                    return Err(invalid!(
                        "teacher logit shapes differ: {:?} vs {:?}",
                        first.shape(),
                        t.shape()
                    ));
                }
            }
            let k = teacher_logits.len() as f64;
            let mut mean = vec![0.0; first.numel()];
            for t in teacher_logits {
                let p = t.detach().softmax_with_temperature(1.0)?;
                for (m, &pv) in mean.iter_mut().zip(p.data().iter()) {
                    *m += pv / k;
                }
            }
            let data: Vec<f64> = mean.iter().map(|&m| m.max(1e-12).ln()).collect();
            Tensor::from_vec(first.shape().to_vec(), data)
        }
    }
}

/// `α·L_student + (1−α)·L_distillation`.
pub fn total_loss(l_student: &Tensor, l_distillation: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid!("alpha must lie in [0, 1], got {alpha}"));
    }
    l_student
        .scale(alpha)?
        .add(&l_distillation.scale(1.0 - alpha)?)
}

/// One full training-step loss: student forward, teacher targets, mixing,
/// chunked KL, hard-label CE, and the α blend. Teacher forwards record
/// nothing; the returned graph differentiates with respect to the student
/// parameters it was given tracked.
///
/// `teacher_logits` must already match the student logits' shape (they come
/// from a forward pass over the same batch).
pub fn distillation_step_with_logits(
    student: &Weights,
    teacher_logits: &[Tensor],
    batch: &Batch,
    cfg: &DistillConfig,
    epoch: &EpochState,
) -> Result<StepOutput> {
    cfg.validate()?;
    if teacher_logits.is_empty() || teacher_logits.len() > 2 {
        return Err(invalid!(
            "expected 1 or 2 teachers, got {}",
            teacher_logits.len()
        ));
    }
    let graph = Graph::new();
    student.track_all(&graph)?;

    let z_student = student.forward(&batch.inputs)?;
    let log_probs = z_student.log_softmax_with_temperature(1.0)?;
    let ce = cross_entropy(&log_probs, &batch.targets, Some(PAD_ID))?;

    let single = |zt: &Tensor| -> Result<Tensor> {
        let mixed = mix_logits(zt, &z_student, epoch.beta)?;
        stepwise_loss(
            cfg.objective,
            &z_student,
            &mixed,
            cfg.temperature,
            cfg.chunk_size,
            cfg.reduction,
        )
    };
    let kd = match (cfg.teacher_combination, teacher_logits.len()) {
        (_, 1) => single(&teacher_logits[0])?,
        (TeacherCombination::MeanProb, _) => single(&combine_teachers(teacher_logits)?)?,
        (TeacherCombination::MeanLoss, n) => {
            let mut acc: Option<Tensor> = None;
            for zt in teacher_logits {
                let term = single(zt)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term)?,
                });
            }
            acc.expect("teacher list non-empty").scale(1.0 / n as f64)?
        }
    };

    let loss = total_loss(&ce, &kd, cfg.alpha)?;
    let breakdown = LossBreakdown {
        student_ce: ce.item()?,
        distillation: kd.item()?,
        total: loss.item()?,
        beta: epoch.beta,
        temperature: cfg.temperature,
    };
    Ok(StepOutput { graph, loss, breakdown })
}

/// [`distillation_step_with_logits`] with the teacher forwards included:
/// runs each frozen teacher over the batch (recording nothing) first.
pub fn distillation_step(
    student: &Weights,
    teachers: &[&Weights],
    batch: &Batch,
    cfg: &DistillConfig,
    epoch: &EpochState,
) -> Result<StepOutput> {
    let mut logits = Vec::with_capacity(teachers.len());
    for t in teachers {
        logits.push(t.forward(&batch.inputs)?);
    }
    distillation_step_with_logits(student, &logits, batch, cfg, epoch)
}
