//! Evaluation: sequence scoring, perplexity, minimal-pair accuracy, the
//! mode-mass diagnostic, exact small-instance oracles, and metric
//! serialization.
//!
//! Everything here reads weights without recording gradients, and every
//! function is a pure deterministic map from its arguments — evaluating the
//! same checkpoint twice produces identical bytes. Sequences are scored
//! conditioned on the separator token, so a length-n sequence always has n
//! scored positions.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, MinimalPair, PAD_ID, SEP_ID};
use crate::distill::{forward_kl_loss, reverse_kl_loss, Objective, Reduction};
use crate::error::{invalid, Result};
use crate::model::Weights;
use crate::tensor::{Graph, IntTensor, Tensor};

/// Natural-log probability of `tokens` under the model: the sum over
/// positions of `log softmax(logits)[next]`, conditioning position 0 on the
/// separator token so every token in the sequence is scored.
pub fn sequence_logprob(weights: &Weights, tokens: &[u32]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(invalid!("cannot score an empty sequence"));
    }
    let v = weights.config().vocab_size;
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= v) {
        return Err(invalid!("token id {t} out of range for a {v}-token vocabulary"));
    }
    let mut input = Vec::with_capacity(tokens.len());
    input.push(SEP_ID);
    input.extend_from_slice(&tokens[..tokens.len() - 1]);
    let len = input.len();
    let inputs = IntTensor::from_vec(vec![1, len], input)?;
    let lp = weights.forward(&inputs)?.log_softmax_with_temperature(1.0)?;
    let data = lp.data();
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| data[i * v + t as usize])
        .sum())
}

/// `exp` of the mean per-token negative log-likelihood over the corpus, cut
/// into consecutive `(window + 1)`-token windows; pad positions are skipped.
pub fn perplexity(weights: &Weights, corpus: &Corpus, window: usize) -> Result<f64> {
    if window == 0 {
        return Err(invalid!("window must be positive"));
    }
    if corpus.len() < window + 1 {
        return Err(invalid!(
            "corpus of {} tokens is shorter than one {}-token window",
            corpus.len(),
            window + 1
        ));
    }
    let v = weights.config().vocab_size;
    let windows: Vec<&[u32]> = corpus.ids().chunks_exact(window + 1).collect();
    let mut nll = 0.0;
    let mut count = 0usize;
    // Fixed-size groups bound peak memory; positions accumulate in corpus
    // order regardless of the grouping, so the result does not depend on it.
    for group in windows.chunks(64) {
        let n = group.len();
        let mut flat = Vec::with_capacity(n * window);
        for w in group {
            flat.extend_from_slice(&w[..window]);
        }
        let inputs = IntTensor::from_vec(vec![n, window], flat)?;
        let lp = weights.forward(&inputs)?.log_softmax_with_temperature(1.0)?;
        let data = lp.data();
        for (r, w) in group.iter().enumerate() {
            for t in 0..window {
                let target = w[t + 1];
                if target == PAD_ID {
                    continue;
                }
                nll -= data[(r * window + t) * v + target as usize];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(invalid!("corpus has no scorable (non-pad) positions"));
    }
    Ok((nll / count as f64).exp())
}

/// Fraction of pairs whose grammatical member scores strictly higher than
/// its ungrammatical twin; exact ties count one half.
pub fn minimal_pair_accuracy(weights: &Weights, pairs: &[MinimalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid!("no pairs to score"));
    }
    let mut score = 0.0;
    for pair in pairs {
        let good = sequence_logprob(weights, &pair.grammatical)?;
        let bad = sequence_logprob(weights, &pair.ungrammatical)?;
        score += if good > bad {
            1.0
        } else if good == bad {
            0.5
        } else {
            0.0
        };
    }
    Ok(score / pairs.len() as f64)
}

/// The model's next-token distribution after `context`.
fn next_token_probs(weights: &Weights, context: &[u32]) -> Result<Vec<f64>> {
    if context.is_empty() {
        return Err(invalid!("context must be non-empty"));
    }
    let len = context.len();
    let inputs = IntTensor::from_vec(vec![1, len], context.to_vec())?;
    let probs = weights.forward(&inputs)?.softmax_with_temperature(1.0)?;
    let v = weights.config().vocab_size;
    let data = probs.data();
    Ok(data[(len - 1) * v..len * v].to_vec())
}

/// Mass `probs` places on the `m` highest entries of `reference`
/// (ties broken toward the lower index, so the selection is deterministic).
pub fn top_m_mass(probs: &[f64], reference: &[f64], m: usize) -> Result<f64> {
    if probs.len() != reference.len() {
        return Err(invalid!(
            "distributions differ in size: {} vs {}",
            probs.len(),
            reference.len()
        ));
    }
    let v = reference.len();
    if m == 0 || m > v {
        return Err(invalid!("m must lie in 1..={v}, got {m}"));
    }
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| {
        reference[b]
            .partial_cmp(&reference[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(order[..m].iter().map(|&i| probs[i]).sum())
}

/// Mean, over contexts, of the student's next-token mass on the teacher's
/// top-`m` next tokens — how much of the teacher's modes the student keeps.
pub fn mode_mass(
    student: &Weights,
    teacher: &Weights,
    contexts: &[Vec<u32>],
    m: usize,
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(invalid!("no contexts to evaluate"));
    }
    let v = student.config().vocab_size;
    if teacher.config().vocab_size != v {
        return Err(invalid!(
            "student and teacher vocabularies differ: {} vs {}",
            v,
            teacher.config().vocab_size
        ));
    }
    if m == 0 || m > v {
        return Err(invalid!("m must lie in 1..={v}, got {m}"));
    }
    let mut total = 0.0;
    for ctx in contexts {
        let sp = next_token_probs(student, ctx)?;
        let tp = next_token_probs(teacher, ctx)?;
        total += top_m_mass(&sp, &tp, m)?;
    }
    Ok(total / contexts.len() as f64)
}

/// Up to `count` length-`len` contexts with starts spread evenly over the
/// corpus. Deterministic — no randomness is involved.
pub fn contexts_from_corpus(corpus: &Corpus, count: usize, len: usize) -> Result<Vec<Vec<u32>>> {
    if count == 0 || len == 0 {
        return Err(invalid!("count and len must be positive"));
    }
    if corpus.len() < len {
        return Err(invalid!(
            "corpus of {} tokens has no length-{len} contexts",
            corpus.len()
        ));
    }
    let available = corpus.len() - len + 1;
    let take = count.min(available);
    let ids = corpus.ids();
    let mut out = Vec::with_capacity(take);
    for i in 0..take {
        let start = if take == 1 {
            0
        } else {
            i * (available - 1) / (take - 1)
        };
        out.push(ids[start..start + len].to_vec());
    }
    Ok(out)
}

/// Exact KL(a ‖ b) between the two models' length-`l` sequence
/// distributions, by enumerating all `v^l` sequences. Guarded: enumeration
/// beyond 65536 sequences is refused.
pub fn exact_sequence_kl(a: &Weights, b: &Weights, v: usize, l: usize) -> Result<f64> {
    if v == 0 || l == 0 {
        return Err(invalid!("v and l must be positive"));
    }
    if a.config().vocab_size != v || b.config().vocab_size != v {
        return Err(invalid!("both models must use the declared {v}-token vocabulary"));
    }
    let total = (v as u128)
        .checked_pow(l as u32)
        .filter(|&n| n <= 65536)
        .ok_or_else(|| invalid!("enumerating {v}^{l} sequences exceeds the 65536 guard"))?
        as usize;
    let mut kl = 0.0;
    let mut seq = vec![0u32; l];
    for s in 0..total {
        let mut x = s;
        for slot in seq.iter_mut().rev() {
            *slot = (x % v) as u32;
            x /= v;
        }
        let lq = sequence_logprob(a, &seq)?;
        let lp = sequence_logprob(b, &seq)?;
        kl += lq.exp() * (lq - lp);
    }
    Ok(kl)
}

/// Fit a rank-one (product-form) next-token distribution to `target_logits`
/// under the chosen objective and return its probabilities.
///
/// The student's logits over a `rows × cols` product vocabulary are
/// constrained to `z[i·cols + j] = u[i] + w[j]`, a family that cannot place
/// mass on two cells differing in both coordinates without also covering
/// their cross terms. Optimizing `u, w` by gradient descent therefore makes
/// the two objectives visibly diverge: the reverse objective concentrates on
/// one mode of a multi-modal target, the forward objective spreads over all
/// of them. Plain SGD from a near-uniform random start (scaled 0.01).
pub fn fit_rank_one_student(
    objective: Objective,
    target_logits: &[f64],
    rows: usize,
    cols: usize,
    seed: u64,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 || target_logits.len() != rows * cols {
        return Err(invalid!(
            "target has {} entries, expected rows*cols = {}",
            target_logits.len(),
            rows * cols
        ));
    }
    if steps == 0 || !(lr.is_finite() && lr > 0.0) {
        return Err(invalid!("steps and lr must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| 0.01 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect()
    };
    let u = Tensor::from_vec(vec![rows], draw(rows))?;
    let w = Tensor::from_vec(vec![cols], draw(cols))?;
    let target = Tensor::from_vec(vec![1, 1, rows * cols], target_logits.to_vec())?;

    let outer_sum = |u: &Tensor, w: &Tensor| -> Result<Tensor> {
        let left = u.reshape(vec![rows, 1])?.matmul(&Tensor::ones(vec![1, cols]))?;
        let right = Tensor::ones(vec![rows, 1]).matmul(&w.reshape(vec![1, cols])?)?;
        left.add(&right)?.reshape(vec![1, 1, rows * cols])
    };

    for _ in 0..steps {
        u.zero_grad();
        w.zero_grad();
        let graph = Graph::new();
        graph.track(&u)?;
        graph.track(&w)?;
        let z = outer_sum(&u, &w)?;
        let loss = match objective {
            Objective::Reverse => reverse_kl_loss(&z, &target, 1.0, Reduction::Sum)?,
            Objective::Forward => forward_kl_loss(&z, &target, 1.0, Reduction::Sum)?,
        };
        graph.backward(&loss)?;
        for p in [&u, &w] {
            let g = p.grad_vec();
            let updated: Vec<f64> = p
                .to_vec()
                .iter()
                .zip(&g)
                .map(|(x, gx)| x - lr * gx)
                .collect();
            p.set_data(&updated)?;
        }
    }
    let z = outer_sum(&u, &w)?;
    Ok(z.softmax_with_temperature(1.0)?.to_vec())
}

/// One row of the metrics log. Training steps fill the loss columns and
/// leave the evaluation columns empty; evaluation points do the reverse.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub epoch: usize,
    pub step: Option<usize>,
    pub loss_total: Option<f64>,
    pub loss_ce: Option<f64>,
    pub loss_distill: Option<f64>,
    pub beta: Option<f64>,
    pub lr: Option<f64>,
    pub perplexity: Option<f64>,
    pub mp_accuracy: Option<f64>,
    pub mode_mass_m1: Option<f64>,
    pub mode_mass_m5: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "run_id,epoch,step,loss_total,loss_ce,loss_distill,beta,lr,perplexity,mp_accuracy,mode_mass_m1,mode_mass_m5";

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn opt<T: std::fmt::Display>(x: &Option<T>) -> String {
    x.as_ref().map(|v| v.to_string()).unwrap_or_default()
}

/// Render rows under the fixed header. Floats use Rust's shortest
/// round-trip formatting, so equal runs produce equal bytes.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            csv_escape(&r.run_id),
            r.epoch,
            opt(&r.step),
            opt(&r.loss_total),
            opt(&r.loss_ce),
            opt(&r.loss_distill),
            opt(&r.beta),
            opt(&r.lr),
            opt(&r.perplexity),
            opt(&r.mp_accuracy),
            opt(&r.mode_mass_m1),
            opt(&r.mode_mass_m5),
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(rows))?;
    Ok(())
}

/// End-of-run summary, one JSON object per run. `exact_kl_to_teacher` is
/// only filled on instances small enough for the enumeration oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub objective: String,
    pub teachers: usize,
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    pub final_loss_total: Option<f64>,
    pub final_perplexity: Option<f64>,
    pub final_mp_accuracy: Option<f64>,
    pub final_mode_mass_m1: Option<f64>,
    pub final_mode_mass_m5: Option<f64>,
    pub beta_by_epoch: Vec<f64>,
    pub exact_kl_to_teacher: Option<f64>,
}

pub fn write_json_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)
        .map_err(|e| invalid!("could not encode run summary: {e}"))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
