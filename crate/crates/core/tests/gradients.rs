//! Finite-difference verification of every gradient the trainer relies on.
//!
//! Each battery draws randomized instances (seeded, so failures replay),
//! checks the analytic gradient of a loss against central differences with
//! `h = 1e-5`, and requires the worst relative error to stay within `1e-6`.
//! The final battery covers the complete distillation step through a real
//! model: forward pass, hard-label term, logit mixing, chunked divergence,
//! and the blend, differentiated with respect to every student parameter.

use minidistill::data::{Batch, PAD_ID};
use minidistill::distill::{
    combine_teachers, distillation_step_with_logits, forward_kl_loss, mix_logits, reverse_kl_loss,
    stepwise_loss, total_loss, DistillConfig, EpochState, Objective, Reduction, TeacherCombination,
};
use minidistill::model::{ModelConfig, Weights};
use minidistill::tensor::{cross_entropy, finite_difference_check_params, IntTensor, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOLERANCE: f64 = 1e-6;
const INSTANCES: u64 = 20;

fn random_logits(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Random `[batch, len, vocab]` dimensions small enough that a full battery
/// of central differences stays cheap.
fn random_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.random_range(1..=2),
        rng.random_range(1..=4),
        rng.random_range(3..=8),
    )
}

fn temperature_for(i: u64) -> f64 {
    [1.0, 2.0, 4.0][(i % 3) as usize]
}

fn reduction_for(i: u64) -> Reduction {
    if i % 2 == 0 {
        Reduction::Mean
    } else {
        Reduction::Sum
    }
}

#[test]
fn reverse_divergence_gradient_matches_central_differences() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1_000 + i);
        let (b, l, v) = random_dims(&mut rng);
        let z_student = random_logits(&mut rng, vec![b, l, v]);
        let z_mixed = random_logits(&mut rng, vec![b, l, v]);
        let t = temperature_for(i);
        let red = reduction_for(i);
        let err = finite_difference_check_params(
            &[&z_student],
            || reverse_kl_loss(&z_student, &z_mixed, t, red),
            H,
        )
        .expect("check runs");
        assert!(
            err <= TOLERANCE,
            "instance {i} ({b}x{l}x{v}, T={t}): relative error {err} exceeds {TOLERANCE}"
        );
    }
}

#[test]
fn forward_divergence_gradient_matches_central_differences() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2_000 + i);
        let (b, l, v) = random_dims(&mut rng);
        let z_student = random_logits(&mut rng, vec![b, l, v]);
        let z_mixed = random_logits(&mut rng, vec![b, l, v]);
        let t = temperature_for(i);
        let red = reduction_for(i);
        let err = finite_difference_check_params(
            &[&z_student],
            || forward_kl_loss(&z_student, &z_mixed, t, red),
            H,
        )
        .expect("check runs");
        assert!(
            err <= TOLERANCE,
            "instance {i} ({b}x{l}x{v}, T={t}): relative error {err} exceeds {TOLERANCE}"
        );
    }
}

/// Targets with one in-range id per position, a sprinkling of pad, and a
/// guaranteed non-pad position so the loss never degenerates.
fn random_targets(rng: &mut ChaCha8Rng, b: usize, l: usize, v: usize) -> IntTensor {
    let mut ids: Vec<u32> = (0..b * l)
        .map(|_| {
            if rng.random_range(0..4) == 0 {
                PAD_ID
            } else {
                rng.random_range(1..v as u32)
            }
        })
        .collect();
    ids[0] = rng.random_range(1..v as u32);
    IntTensor::from_vec(vec![b, l], ids).expect("shape matches ids")
}

#[test]
fn cross_entropy_gradient_matches_central_differences() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(3_000 + i);
        let (b, l, v) = random_dims(&mut rng);
        let z = random_logits(&mut rng, vec![b, l, v]);
        let targets = random_targets(&mut rng, b, l, v);
        let err = finite_difference_check_params(
            &[&z],
            || {
                let lp = z.log_softmax_with_temperature(1.0)?;
                cross_entropy(&lp, &targets, Some(PAD_ID))
            },
            H,
        )
        .expect("check runs");
        assert!(
            err <= TOLERANCE,
            "instance {i} ({b}x{l}x{v}): relative error {err} exceeds {TOLERANCE}"
        );
    }
}

#[test]
fn blended_loss_gradient_matches_central_differences() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(4_000 + i);
        let (b, l, v) = random_dims(&mut rng);
        let z = random_logits(&mut rng, vec![b, l, v]);
        let z_mixed = random_logits(&mut rng, vec![b, l, v]);
        let targets = random_targets(&mut rng, b, l, v);
        let objective = if i % 2 == 0 {
            Objective::Reverse
        } else {
            Objective::Forward
        };
        let alpha = [0.0, 0.3, 0.5, 1.0][(i % 4) as usize];
        let t = temperature_for(i);
        let chunk = 1 + (i as usize % 3);
        let err = finite_difference_check_params(
            &[&z],
            || {
                let lp = z.log_softmax_with_temperature(1.0)?;
                let ce = cross_entropy(&lp, &targets, Some(PAD_ID))?;
                let kd = stepwise_loss(objective, &z, &z_mixed, t, chunk, Reduction::Mean)?;
                total_loss(&ce, &kd, alpha)
            },
            H,
        )
        .expect("check runs");
        assert!(
            err <= TOLERANCE,
            "instance {i} ({b}x{l}x{v}, alpha={alpha}): relative error {err} exceeds {TOLERANCE}"
        );
    }
}

/// The full step through a real model, checked against every student
/// parameter. The mixed target is a stop-gradient constant by definition, so
/// the differenced function holds it fixed at its baseline value; to prove
/// the mirrored loss is the real one, the step's own backward pass must
/// agree with the mirror's gradient bit for bit before differencing starts.
#[test]
fn full_distillation_step_gradient_matches_central_differences() {
    let cases: [(u64, Objective, usize, TeacherCombination); 4] = [
        (50, Objective::Reverse, 1, TeacherCombination::MeanProb),
        (51, Objective::Forward, 1, TeacherCombination::MeanLoss),
        (52, Objective::Reverse, 2, TeacherCombination::MeanProb),
        (53, Objective::Forward, 2, TeacherCombination::MeanLoss),
    ];
    for (seed, objective, n_teachers, combination) in cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig {
            vocab_size: 5,
            max_seq_len: 4,
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            ffn_multiplier: 2,
            norm_epsilon: 1e-6,
            seed,
        };
        let student = Weights::init(config.clone()).expect("student init");
        let teachers: Vec<Weights> = (0..n_teachers)
            .map(|k| {
                Weights::init(ModelConfig {
                    seed: seed + 100 + k as u64,
                    d_model: 8,
                    n_heads: 2,
                    ..config.clone()
                })
                .expect("teacher init")
            })
            .collect();

        let (b, l) = (1, 3);
        let inputs = IntTensor::from_vec(
            vec![b, l],
            (0..b * l).map(|_| rng.random_range(0..5)).collect(),
        )
        .expect("inputs");
        let targets = random_targets(&mut rng, b, l, 5);
        let batch = Batch {
            inputs: inputs.clone(),
            targets: targets.clone(),
        };

        let mut cfg = DistillConfig::defaults(objective);
        cfg.teacher_combination = combination;
        let epoch = EpochState::new(1, 6, &cfg).expect("epoch state");

        let teacher_logits: Vec<Tensor> = teachers
            .iter()
            .map(|t| t.forward(&inputs).expect("teacher forward"))
            .collect();

        // Freeze the mixed targets at the baseline student logits.
        let z_baseline = student.forward(&inputs).expect("baseline forward");
        let frozen_targets: Vec<Tensor> = match (combination, n_teachers) {
            (_, 1) => vec![mix_logits(&teacher_logits[0], &z_baseline, epoch.beta).unwrap()],
            (TeacherCombination::MeanProb, _) => {
                let merged = combine_teachers(&teacher_logits).unwrap();
                vec![mix_logits(&merged, &z_baseline, epoch.beta).unwrap()]
            }
            (TeacherCombination::MeanLoss, _) => teacher_logits
                .iter()
                .map(|zt| mix_logits(zt, &z_baseline, epoch.beta).unwrap())
                .collect(),
        };

        let mirror = || -> minidistill::error::Result<Tensor> {
            let z = student.forward(&inputs)?;
            let lp = z.log_softmax_with_temperature(1.0)?;
            let ce = cross_entropy(&lp, &targets, Some(PAD_ID))?;
            let mut kd: Option<Tensor> = None;
            for ft in &frozen_targets {
                let term = stepwise_loss(
                    cfg.objective,
                    &z,
                    ft,
                    cfg.temperature,
                    cfg.chunk_size,
                    cfg.reduction,
                )?;
                kd = Some(match kd {
                    None => term,
                    Some(acc) => acc.add(&term)?,
                });
            }
            let kd = kd
                .expect("at least one target")
                .scale(1.0 / frozen_targets.len() as f64)?;
            total_loss(&ce, &kd, cfg.alpha)
        };

        // Anchor: the real step and the mirror agree on the loss value and
        // on every parameter's gradient exactly.
        let out = distillation_step_with_logits(&student, &teacher_logits, &batch, &cfg, &epoch)
            .expect("real step");
        out.graph.backward(&out.loss).expect("real backward");
        let real_grads: Vec<Vec<f64>> = student.iter().map(|(_, p)| p.grad_vec()).collect();
        let real_loss = out.loss.item().expect("scalar loss");
        drop(out);

        {
            student.zero_grads();
            let graph = minidistill::tensor::Graph::new();
            student.track_all(&graph).expect("track");
            let loss = mirror().expect("mirror loss");
            assert_eq!(
                loss.item().unwrap(),
                real_loss,
                "seed {seed}: mirrored loss must equal the step's loss exactly"
            );
            graph.backward(&loss).expect("mirror backward");
            for ((name, p), real) in student.iter().zip(&real_grads) {
                assert_eq!(
                    &p.grad_vec(),
                    real,
                    "seed {seed}: mirrored gradient for '{name}' must match the step's"
                );
            }
            student.zero_grads();
        }

        let params: Vec<&Tensor> = student.iter().map(|(_, p)| p).collect();
        let err = finite_difference_check_params(&params, mirror, H).expect("check runs");
        assert!(
            err <= TOLERANCE,
            "seed {seed} ({objective:?}, {n_teachers} teacher(s)): relative error {err} exceeds {TOLERANCE}"
        );
    }
}
