//! A toy decoder-only transformer.
//!
//! Pre-norm blocks with RMS normalization, multi-head causal attention, and
//! a gated (SiLU) feed-forward; positions are learned embeddings and no
//! projection carries a bias. Teacher and student share this architecture
//! and differ only in their [`ModelConfig`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{concat_last, Graph, IntTensor, Tensor};

/// Architecture hyperparameters. Size is the only thing that distinguishes
/// a teacher from a student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_multiplier: usize,
    pub norm_epsilon: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("ffn_multiplier", self.ffn_multiplier),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(invalid!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model,
                self.n_heads
            ));
        }
        if !(self.norm_epsilon > 0.0 && self.norm_epsilon.is_finite()) {
            return Err(invalid!(
                "norm_epsilon must be positive and finite, got {}",
                self.norm_epsilon
            ));
        }
        Ok(())
    }

    fn ffn_width(&self) -> usize {
        self.ffn_multiplier * self.d_model
    }
}

/// Total parameter count implied by a config, computed in closed form
/// without allocating any tensors.
pub fn count_params(config: &ModelConfig) -> usize {
    let (v, s, d) = (config.vocab_size, config.max_seq_len, config.d_model);
    let f = config.ffn_width();
    let per_layer = 2 * d + 4 * d * d + 3 * d * f;
    v * d + s * d + config.n_layers * per_layer + d + d * v
}

/// Named model parameters in a fixed architectural order.
///
/// The order is stable across runs and is the one checkpoints use: token
/// embedding, position embedding, each layer's norms and projections in
/// block order, final norm, output projection.
#[derive(Debug)]
pub struct Weights {
    config: ModelConfig,
    params: Vec<(String, Tensor)>,
}

impl Weights {
    /// Initialize parameters deterministically from `config.seed`. Linear
    /// weights and embeddings are zero-mean normal draws scaled by
    /// `1/sqrt(d_model)`; norm gains start at exactly 1.
    pub fn init(config: ModelConfig) -> Result<Weights> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = 1.0 / (config.d_model as f64).sqrt();
        let mut draw = |shape: Vec<usize>| -> Tensor {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect();
            Tensor::from_vec(shape, data).expect("shape and data agree by construction")
        };

        let (v, s, d) = (config.vocab_size, config.max_seq_len, config.d_model);
        let f = config.ffn_width();
        let mut params = Vec::new();
        params.push(("tok_embedding".to_string(), draw(vec![v, d])));
        params.push(("pos_embedding".to_string(), draw(vec![s, d])));
        for i in 0..config.n_layers {
            let p = |name: &str| format!("layers.{i}.{name}");
            params.push((p("attn_norm"), Tensor::ones(vec![d])));
            params.push((p("wq"), draw(vec![d, d])));
            params.push((p("wk"), draw(vec![d, d])));
            params.push((p("wv"), draw(vec![d, d])));
            params.push((p("wo"), draw(vec![d, d])));
            params.push((p("ffn_norm"), Tensor::ones(vec![d])));
            params.push((p("w_gate"), draw(vec![d, f])));
            params.push((p("w_up"), draw(vec![d, f])));
            params.push((p("w_down"), draw(vec![f, d])));
        }
        params.push(("final_norm".to_string(), Tensor::ones(vec![d])));
        params.push(("out_proj".to_string(), draw(vec![d, v])));
        Ok(Weights { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters as `(path, tensor)` pairs in architectural order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(p, t)| (p.as_str(), t))
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| p == path)
            .map(|(_, t)| t)
    }

    fn need(&self, path: &str) -> &Tensor {
        self.get(path).expect("parameter path constructed by init")
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every parameter on `graph` so a later backward pass
    /// accumulates gradients into them.
    pub fn track_all(&self, graph: &Graph) -> Result<()> {
        for (_, t) in &self.params {
            graph.track(t)?;
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.params {
            t.zero_grad();
        }
    }

    /// Error if any parameter holds a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (path, t) in &self.params {
            if let Some(bad) = t.data().iter().find(|v| !v.is_finite()) {
                return Err(crate::error::Error::Diverged(format!(
                    "parameter {path} contains non-finite value {bad}"
                )));
            }
        }
        Ok(())
    }

    /// Replace this model's parameter values with `other`'s (shapes must
    /// already agree; both sides came from the same config).
    pub fn copy_from(&mut self, other: &Weights) -> Result<()> {
        if self.config != other.config {
            return Err(invalid!("copy_from requires identical configs"));
        }
        for ((_, dst), (_, src)) in self.params.iter().zip(other.params.iter()) {
            dst.set_data(&src.to_vec())?;
        }
        Ok(())
    }

    /// Run the transformer over a batch of token ids `[N, L]`, producing
    /// next-token logits `[N, L, V]`.
    ///
    /// The pass is recorded for differentiation only if the parameters are
    /// tracked on a live graph; untracked weights (a frozen teacher) make
    /// this a pure function.
    pub fn forward(&self, tokens: &IntTensor) -> Result<Tensor> {
        if tokens.shape().len() != 2 {
            return Err(invalid!(
                "tokens must have shape [batch, length], got {:?}",
                tokens.shape()
            ));
        }
        let (n, l) = (tokens.shape()[0], tokens.shape()[1]);
        if l == 0 || l > self.config.max_seq_len {
            return Err(invalid!(
                "sequence length {l} outside 1..={}",
                self.config.max_seq_len
            ));
        }
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;

        // Token + learned position embeddings.
        let positions = IntTensor::from_vec(vec![l], (0..l as u32).collect())?;
        let tok = self.need("tok_embedding").embedding(tokens)?;
        let pos = self.need("pos_embedding").embedding(&positions)?;
        let mut x = tok.add_broadcast(&pos)?;

        let mask = causal_mask(l);
        let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

        for i in 0..self.config.n_layers {
            let p = |name: &str| format!("layers.{i}.{name}");

            // Attention block (pre-norm, residual).
            let h = x.rms_norm(self.need(&p("attn_norm")), self.config.norm_epsilon)?;
            let q = h.matmul(self.need(&p("wq")))?;
            let k = h.matmul(self.need(&p("wk")))?;
            let v = h.matmul(self.need(&p("wv")))?;
            let mut head_outs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let qh = q.narrow(2, hh * dh, dh)?;
                let kh = k.narrow(2, hh * dh, dh)?;
                let vh = v.narrow(2, hh * dh, dh)?;
                let scores = qh.bmm_nt(&kh)?.scale(inv_sqrt_dh)?.add_broadcast(&mask)?;
                let attn = scores.softmax_with_temperature(1.0)?;
                head_outs.push(attn.bmm(&vh)?);
            }
            let refs: Vec<&Tensor> = head_outs.iter().collect();
            let merged = concat_last(&refs)?;
            let attn_out = merged.matmul(self.need(&p("wo")))?;
            x = x.add(&attn_out)?;

            // Feed-forward block (gated, pre-norm, residual).
            let h2 = x.rms_norm(self.need(&p("ffn_norm")), self.config.norm_epsilon)?;
            let gate = h2.matmul(self.need(&p("w_gate")))?.silu()?;
            let up = h2.matmul(self.need(&p("w_up")))?;
            let ffn = gate.mul(&up)?.matmul(self.need(&p("w_down")))?;
            x = x.add(&ffn)?;
        }

        let normed = x.rms_norm(self.need("final_norm"), self.config.norm_epsilon)?;
        let logits = normed.matmul(self.need("out_proj"))?;
        debug_assert_eq!(logits.shape(), &[n, l, self.config.vocab_size]);
        Ok(logits)
    }
}

/// `[l, l]` additive mask: 0 at or below the diagonal, `-inf` above, so a
/// position attends only to itself and earlier positions.
fn causal_mask(l: usize) -> Tensor {
    let mut data = vec![0.0; l * l];
    for t in 0..l {
        for s in t + 1..l {
            data[t * l + s] = f64::NEG_INFINITY;
        }
    }
    Tensor::from_vec(vec![l, l], data).expect("square mask")
}
