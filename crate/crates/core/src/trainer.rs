//! The optimization loop: AdamW with decoupled weight decay, a cosine-annealed
//! learning rate, gradient accumulation, the per-epoch mixing-weight schedule,
//! and binary checkpoints.
//!
//! Both entry points — [`train_teacher`] (plain next-token cross-entropy) and
//! [`run_distillation`] (the combined distillation objective) — share one
//! loop. Per optimizer step the loop zeroes gradients, runs `grad_accum`
//! micro-batches whose losses are scaled by `1/G` so their gradients sum to
//! the full-batch mean, then applies one AdamW update at the scheduled rate.
//! Teachers are frozen, so their per-window logits are computed once and
//! reused across epochs; re-batching only reorders the same windows, and every
//! row is forwarded independently, so the cache is bit-exact.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, Corpus, PAD_ID};
use crate::distill::{
    beta_at_epoch, distillation_step_with_logits, DistillConfig, EpochState, LossBreakdown,
    StepOutput,
};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, Weights};
use crate::tensor::{cross_entropy, Graph, IntTensor, Tensor};
use crate::util::derive_seed;

/// AdamW and learning-rate-schedule hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay λ: applied directly to weights, not to grads.
    pub weight_decay: f64,
    /// Cosine horizon in optimizer steps; the rate stays at `eta_min` beyond.
    pub t_max: usize,
    pub eta_min: f64,
}

impl OptimizerConfig {
    /// The training recipe used throughout: lr 2.5e-4, β₁ 0.9, β₂ 0.999,
    /// ε 1e-8, λ 0.01, cosine horizon 500 steps annealing to zero.
    pub fn defaults() -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: 2.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            t_max: 500,
            eta_min: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            ));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return Err(invalid!("beta1 must lie in (0, 1), got {}", self.beta1));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(invalid!("beta2 must lie in (0, 1), got {}", self.beta2));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(invalid!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(invalid!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.t_max == 0 {
            return Err(invalid!("t_max must be positive"));
        }
        if !(self.eta_min.is_finite() && self.eta_min >= 0.0) {
            return Err(invalid!("eta_min must be non-negative, got {}", self.eta_min));
        }
        if self.eta_min > self.learning_rate {
            return Err(invalid!(
                "eta_min ({}) exceeds learning_rate ({})",
                self.eta_min,
                self.learning_rate
            ));
        }
        Ok(())
    }
}

/// Loop shape: batch geometry, epoch count, accumulation, seeding.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    /// May be zero: a zero-epoch run returns the initial weights untouched.
    pub epochs: usize,
    /// Micro-batches per optimizer step (G). Each micro-batch loss is scaled
    /// by 1/G, so G half-size batches match one full batch.
    pub grad_accum: usize,
    pub seed: u64,
    /// Save a checkpoint every this many optimizer steps (when a checkpoint
    /// directory is given).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Batch 32 × length 128 for 6 epochs, no accumulation.
    pub fn defaults() -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            seq_len: 128,
            epochs: 6,
            grad_accum: 1,
            seed: 0,
            checkpoint_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be positive"));
        }
        if self.seq_len == 0 {
            return Err(invalid!("seq_len must be positive"));
        }
        if self.grad_accum == 0 {
            return Err(invalid!("grad_accum must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(invalid!("checkpoint_every must be positive"));
        }
        Ok(())
    }
}

/// AdamW moment estimates, aligned index-for-index with the parameter list
/// the state was created from.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Tensor]) -> OptimizerState {
        OptimizerState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    /// Number of optimizer steps applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update over `params` at rate `lr`, reading each tensor's
/// accumulated gradient:
///
/// ```text
/// m ← β₁·m + (1−β₁)·g          v ← β₂·v + (1−β₂)·g²
/// m̂ = m/(1−β₁ᵗ)                v̂ = v/(1−β₂ᵗ)
/// w ← w − lr·m̂/(√v̂ + ε) − lr·λ·w
/// ```
///
/// `lr` may be zero (the cosine floor at the end of the horizon); moments
/// still update so a later non-zero step sees the full gradient history.
pub fn adamw_step(
    params: &[&Tensor],
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    cfg.validate()?;
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(invalid!("lr must be finite and non-negative, got {lr}"));
    }
    if params.len() != state.m.len() {
        return Err(invalid!(
            "optimizer state tracks {} parameters, got {}",
            state.m.len(),
            params.len()
        ));
    }
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, p) in params.iter().enumerate() {
        if p.numel() != state.m[i].len() {
            return Err(invalid!(
                "parameter {} has {} elements, optimizer state expects {}",
                i,
                p.numel(),
                state.m[i].len()
            ));
        }
        let g = p.grad();
        let mut w = p.to_vec();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..w.len() {
            let gj = g[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            w[j] = w[j] - lr * m_hat / (v_hat.sqrt() + cfg.epsilon) - lr * cfg.weight_decay * w[j];
        }
        drop(g);
        p.set_data(&w)?;
    }
    state.step = t;
    Ok(())
}

/// Cosine-annealed learning rate at a given optimizer step:
/// `η_min + ½·(η − η_min)·(1 + cos(π·min(step, T_max)/T_max))`.
pub fn cosine_lr(step: usize, cfg: &OptimizerConfig) -> f64 {
    let frac = step.min(cfg.t_max) as f64 / cfg.t_max as f64;
    cfg.eta_min
        + 0.5 * (cfg.learning_rate - cfg.eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One optimizer step's record: which epoch it fell in, the 1-based global
/// step index, the rate applied, and the (micro-batch-averaged) loss pieces.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// What a training run did: every optimizer step's losses, the mixing weight
/// used in each epoch (empty for plain teacher training), and the elapsed
/// wall time. Written artifacts derive from the loss curves only — wall time
/// never leaves the process, keeping outputs byte-reproducible.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub beta_by_epoch: Vec<f64>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn final_total_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss.total)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CBCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    path: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    params: Vec<HeaderEntry>,
}

/// Write `weights` to `path` in the checkpoint format: the magic bytes
/// `CBCK`, a little-endian `u32` version (1), a `u32`-length-prefixed JSON
/// header (model config plus the ordered parameter paths and shapes), then
/// each tensor's elements as little-endian `f64`s in header order.
pub fn save_checkpoint(weights: &Weights, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        config: weights.config().clone(),
        params: weights
            .iter()
            .map(|(p, t)| HeaderEntry {
                path: p.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("could not encode checkpoint header: {e}")))?;
    let mut buf =
        Vec::with_capacity(12 + header_bytes.len() + weights.param_count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, t) in weights.iter() {
        for &x in t.data().iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], off: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() - *off < n {
        return Err(Error::Format(format!(
            "checkpoint truncated while reading {what}"
        )));
    }
    let slice = &bytes[*off..*off + n];
    *off += n;
    Ok(slice)
}

/// Read a checkpoint written by [`save_checkpoint`]. The round trip is
/// bit-exact. Any defect — wrong magic, unsupported version, a header that
/// does not describe this architecture, truncation, trailing bytes — fails
/// with the offending field named, and no weights are returned.
pub fn load_checkpoint(path: &Path) -> Result<Weights> {
    let bytes = std::fs::read(path)?;
    let mut off = 0;
    let magic = take(&bytes, &mut off, 4, "magic bytes")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected \"CBCK\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut off, 4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len =
        u32::from_le_bytes(take(&bytes, &mut off, 4, "header length")?.try_into().unwrap())
            as usize;
    let header_bytes = take(&bytes, &mut off, header_len, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    header.config.validate()?;

    let weights = Weights::init(header.config.clone())?;
    let expected: Vec<(&str, &Tensor)> = weights.iter().collect();
    if header.params.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} parameters, this architecture has {}",
            header.params.len(),
            expected.len()
        )));
    }
    for (entry, (path, tensor)) in header.params.iter().zip(&expected) {
        if entry.path != *path {
            return Err(Error::Format(format!(
                "unexpected parameter '{}' where '{}' belongs",
                entry.path, path
            )));
        }
        if entry.shape != tensor.shape() {
            return Err(Error::Format(format!(
                "parameter '{}' has shape {:?} in the header, the model expects {:?}",
                entry.path,
                entry.shape,
                tensor.shape()
            )));
        }
    }

    // Parse every payload before touching a tensor, so a truncated file
    // cannot yield partially-loaded weights.
    let mut values = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let numel: usize = entry.shape.iter().product();
        let raw = take(&bytes, &mut off, numel * 8, &format!("parameter '{}'", entry.path))?;
        values.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f64>>(),
        );
    }
    if off != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - off
        )));
    }
    for ((_, tensor), vals) in expected.iter().zip(&values) {
        tensor.set_data(vals)?;
    }
    drop(expected);
    Ok(weights)
}

/// Per-window teacher logits, keyed by the window's tokens. Windows recur
/// across epochs (re-batching only reorders them), and every row of a batch
/// is forwarded independently of its neighbors, so a cached row is
/// bit-identical to recomputing it inside any batch.
struct TeacherLogitCache {
    rows: HashMap<Vec<u32>, Vec<Vec<f64>>>,
}

impl TeacherLogitCache {
    fn new() -> TeacherLogitCache {
        TeacherLogitCache {
            rows: HashMap::new(),
        }
    }

    /// Teacher logits `[n, l, v]` for each teacher over `batch`'s inputs.
    fn logits_for(&mut self, teachers: &[&Weights], batch: &Batch) -> Result<Vec<Tensor>> {
        let (n, l) = (batch.inputs.shape()[0], batch.inputs.shape()[1]);
        let ids = batch.inputs.data();
        let rows: Vec<Vec<u32>> = (0..n).map(|i| ids[i * l..(i + 1) * l].to_vec()).collect();

        let mut missing: Vec<Vec<u32>> = Vec::new();
        for row in &rows {
            if !self.rows.contains_key(row) && !missing.contains(row) {
                missing.push(row.clone());
            }
        }
        if !missing.is_empty() {
            let m = missing.len();
            let inputs = IntTensor::from_vec(vec![m, l], missing.concat())?;
            let mut per_teacher = Vec::with_capacity(teachers.len());
            for teacher in teachers {
                per_teacher.push(teacher.forward(&inputs)?.to_vec());
            }
            let v = per_teacher[0].len() / (m * l);
            for (j, row) in missing.into_iter().enumerate() {
                let entry: Vec<Vec<f64>> = per_teacher
                    .iter()
                    .map(|z| z[j * l * v..(j + 1) * l * v].to_vec())
                    .collect();
                self.rows.insert(row, entry);
            }
        }

        let v = teachers[0].config().vocab_size;
        let mut out = Vec::with_capacity(teachers.len());
        for ti in 0..teachers.len() {
            let mut buf = Vec::with_capacity(n * l * v);
            for row in &rows {
                buf.extend_from_slice(&self.rows[row][ti]);
            }
            out.push(Tensor::from_vec(vec![n, l, v], buf)?);
        }
        Ok(out)
    }
}

/// One plain next-token cross-entropy step (no distillation terms).
fn ce_step(model: &Weights, batch: &Batch) -> Result<StepOutput> {
    let graph = Graph::new();
    model.track_all(&graph)?;
    let logits = model.forward(&batch.inputs)?;
    let log_probs = logits.log_softmax_with_temperature(1.0)?;
    let loss = cross_entropy(&log_probs, &batch.targets, Some(PAD_ID))?;
    let value = loss.item()?;
    Ok(StepOutput {
        graph,
        loss,
        breakdown: LossBreakdown {
            student_ce: value,
            distillation: 0.0,
            total: value,
            beta: 0.0,
            temperature: 1.0,
        },
    })
}

/// The loop both entry points share. `loss_fn(weights, epoch, micro_batch)`
/// builds one micro-batch's loss and graph; `on_epoch(e, weights)` runs
/// before training (e = 0) and after each completed epoch (e = 1..=E).
fn training_loop<LF, EF>(
    weights: Weights,
    train: &TrainConfig,
    optim: &OptimizerConfig,
    corpus: &Corpus,
    checkpoint_dir: Option<&Path>,
    mut loss_fn: LF,
    mut on_epoch: EF,
) -> Result<(Weights, TrainReport)>
where
    LF: FnMut(&Weights, usize, &Batch) -> Result<StepOutput>,
    EF: FnMut(usize, &Weights) -> Result<()>,
{
    train.validate()?;
    optim.validate()?;
    let started = Instant::now();
    let accum = train.grad_accum;
    let mut state = {
        let params: Vec<&Tensor> = weights.iter().map(|(_, t)| t).collect();
        OptimizerState::new(&params)
    };
    let mut report = TrainReport {
        steps: Vec::new(),
        beta_by_epoch: Vec::new(),
        wall_seconds: 0.0,
    };
    let mut global_step = 0usize;

    on_epoch(0, &weights)?;
    for epoch in 0..train.epochs {
        let order_seed = derive_seed(train.seed, "batch-order", epoch as u64);
        let batches = make_batches(corpus, train.batch_size, train.seq_len, order_seed)?;
        for group in batches.chunks(accum) {
            if group.len() < accum {
                break;
            }
            weights.zero_grads();
            let lr = cosine_lr(global_step, optim);
            let mut sums = (0.0, 0.0, 0.0);
            let mut last = None;
            for micro in group {
                let out = loss_fn(&weights, epoch, micro)?;
                if !out.breakdown.total.is_finite() {
                    return Err(Error::Diverged(format!(
                        "loss became {} at optimizer step {} (epoch {})",
                        out.breakdown.total,
                        global_step + 1,
                        epoch
                    )));
                }
                let seed_loss = if accum > 1 {
                    out.loss.scale(1.0 / accum as f64)?
                } else {
                    out.loss.clone()
                };
                out.graph.backward(&seed_loss)?;
                sums.0 += out.breakdown.student_ce;
                sums.1 += out.breakdown.distillation;
                sums.2 += out.breakdown.total;
                last = Some(out.breakdown);
            }
            let last = last.expect("grad_accum is positive");
            {
                let params: Vec<&Tensor> = weights.iter().map(|(_, t)| t).collect();
                adamw_step(&params, &mut state, optim, lr)?;
            }
            global_step += 1;
            let inv = 1.0 / accum as f64;
            report.steps.push(StepRecord {
                epoch,
                step: global_step,
                lr,
                loss: LossBreakdown {
                    student_ce: sums.0 * inv,
                    distillation: sums.1 * inv,
                    total: sums.2 * inv,
                    beta: last.beta,
                    temperature: last.temperature,
                },
            });
            if let Some(dir) = checkpoint_dir {
                if global_step % train.checkpoint_every == 0 {
                    save_checkpoint(&weights, &dir.join(format!("step_{global_step:06}.ckpt")))?;
                }
            }
        }
        on_epoch(epoch + 1, &weights)?;
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((weights, report))
}

/// Train a fresh model on `corpus` with plain next-token cross-entropy.
/// This is how teachers are made; the result is returned (and periodically
/// checkpointed into `checkpoint_dir` if given) rather than written to a
/// fixed location.
pub fn train_teacher<EF>(
    config: &ModelConfig,
    train: &TrainConfig,
    optim: &OptimizerConfig,
    corpus: &Corpus,
    checkpoint_dir: Option<&Path>,
    on_epoch: EF,
) -> Result<(Weights, TrainReport)>
where
    EF: FnMut(usize, &Weights) -> Result<()>,
{
    config.validate()?;
    if corpus.vocab().size() != config.vocab_size {
        return Err(invalid!(
            "corpus vocabulary has {} entries, model expects {}",
            corpus.vocab().size(),
            config.vocab_size
        ));
    }
    let weights = Weights::init(config.clone())?;
    training_loop(
        weights,
        train,
        optim,
        corpus,
        checkpoint_dir,
        |w, _, batch| ce_step(w, batch),
        on_epoch,
    )
}

/// Distill one or two frozen teachers into a freshly initialized student.
///
/// Per epoch `e` (0-based) the mixing weight β comes from the linear decay
/// schedule with its floor; per optimizer step the combined loss
/// `α·CE + (1−α)·KD` is minimized with AdamW under the cosine schedule.
/// The report's β-by-epoch trace and per-step loss curves come back with the
/// trained student. Deterministic: same inputs, bit-identical outputs.
#[allow(clippy::too_many_arguments)]
pub fn run_distillation<EF>(
    student_config: &ModelConfig,
    teachers: &[&Weights],
    distill_cfg: &DistillConfig,
    train: &TrainConfig,
    optim: &OptimizerConfig,
    corpus: &Corpus,
    checkpoint_dir: Option<&Path>,
    on_epoch: EF,
) -> Result<(Weights, TrainReport)>
where
    EF: FnMut(usize, &Weights) -> Result<()>,
{
    student_config.validate()?;
    distill_cfg.validate()?;
    if teachers.is_empty() || teachers.len() > 2 {
        return Err(invalid!("expected one or two teachers, got {}", teachers.len()));
    }
    for teacher in teachers {
        if teacher.config().vocab_size != student_config.vocab_size {
            return Err(invalid!(
                "teacher vocabulary ({}) does not match the student's ({})",
                teacher.config().vocab_size,
                student_config.vocab_size
            ));
        }
    }
    if corpus.vocab().size() != student_config.vocab_size {
        return Err(invalid!(
            "corpus vocabulary has {} entries, student expects {}",
            corpus.vocab().size(),
            student_config.vocab_size
        ));
    }

    let student = Weights::init(student_config.clone())?;
    let total_epochs = train.epochs;
    let mut cache = TeacherLogitCache::new();
    let (weights, mut report) = training_loop(
        student,
        train,
        optim,
        corpus,
        checkpoint_dir,
        |w, epoch, batch| {
            let epoch_state = EpochState::new(epoch, total_epochs, distill_cfg)?;
            let teacher_logits = cache.logits_for(teachers, batch)?;
            distillation_step_with_logits(w, &teacher_logits, batch, distill_cfg, &epoch_state)
        },
        on_epoch,
    )?;
    for epoch in 0..total_epochs {
        report.beta_by_epoch.push(beta_at_epoch(
            epoch,
            total_epochs,
            distill_cfg.beta_start,
            distill_cfg.beta_floor,
        )?);
    }
    Ok((weights, report))
}
