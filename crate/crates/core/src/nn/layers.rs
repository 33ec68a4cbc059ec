use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::params::{Binder, ParamId, ParamStore};
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};

/// `y = x·Wᵀ + b` with `W` stored D_out×D_in.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::randn(&[d_out, d_in], std, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true);
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul_t(b.param(self.weight))?.add_row(b.param(self.bias))?)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Low-rank additive adapter `scaling · up(down(x))`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scaling: f64,
}

impl LoraAdapter {
    /// Fresh adapter: gaussian `down`, zero `up`, scaling 1 (alpha = rank).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(Error::config(format!(
                "LoRA rank {rank} must be in 1..{} for a {d_out}x{d_in} layer",
                d_in.min(d_out)
            )));
        }
        let down = store.add(
            format!("{name}.lora_down"),
            Tensor::randn(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            true,
        );
        let up = store.add(format!("{name}.lora_up"), Tensor::zeros(&[d_out, rank]), true);
        Ok(Self {
            down,
            up,
            rank,
            scaling: 1.0,
        })
    }

    /// Adapter over explicitly provided factors. Only shape consistency is
    /// checked, so full-rank factors are accepted here.
    pub fn from_parts(
        store: &mut ParamStore,
        name: &str,
        down: Tensor,
        up: Tensor,
        scaling: f64,
    ) -> Result<Self> {
        let rank = down.rows();
        if down.shape().len() != 2 || up.shape().len() != 2 || up.cols() != rank {
            return Err(Error::config(format!(
                "LoRA factors {:?} and {:?} are inconsistent",
                down.shape(),
                up.shape()
            )));
        }
        let down = store.add(format!("{name}.lora_down"), down, true);
        let up = store.add(format!("{name}.lora_up"), up, true);
        Ok(Self {
            down,
            up,
            rank,
            scaling,
        })
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = x.matmul_t(b.param(self.down))?.matmul_t(b.param(self.up))?;
        if self.scaling == 1.0 {
            Ok(h)
        } else {
            Ok(h.scale(self.scaling)?)
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.down, self.up]
    }
}

/// Linear layer with an optional LoRA adapter on top of it.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        lora_linear_forward(b, x, &self.base, self.adapter.as_ref())
    }
}

/// `base(x) + scaling · up(down(x))`.
pub fn lora_linear_forward<'t>(
    b: &Binder<'t, '_>,
    x: Var<'t>,
    base: &Linear,
    adapter: Option<&LoraAdapter>,
) -> Result<Var<'t>> {
    let y = base.forward(b, x)?;
    match adapter {
        Some(a) => Ok(y.add(a.forward(b, x)?)?),
        None => Ok(y),
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm_rows(b.param(self.gamma), b.param(self.beta), Self::EPS)?)
    }
}

/// Multi-head self-attention with a causal mask.
#[derive(Debug, Clone)]
pub struct CausalSelfAttention {
    pub query: LoraLinear,
    pub key: LoraLinear,
    pub value: LoraLinear,
    pub output: LoraLinear,
    pub heads: usize,
    pub dim: usize,
}

impl CausalSelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        let mut proj = |suffix: &str| LoraLinear {
            base: Linear::new(store, &format!("{name}.{suffix}"), dim, dim, rng),
            adapter: None,
        };
        Ok(Self {
            query: proj("q"),
            key: proj("k"),
            value: proj("v"),
            output: proj("o"),
            heads,
            dim,
        })
    }

    pub fn projections_mut(&mut self) -> [(&'static str, &mut LoraLinear); 4] {
        [
            ("q", &mut self.query),
            ("k", &mut self.key),
            ("v", &mut self.value),
            ("o", &mut self.output),
        ]
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_weights(b, x)?.0)
    }

    /// Also returns each head's T×T attention weights.
    pub fn forward_with_weights<'t>(
        &self,
        b: &Binder<'t, '_>,
        x: Var<'t>,
    ) -> Result<(Var<'t>, Vec<Arc<Tensor>>)> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::config(format!(
                "attention expects T×{} input, got {shape:?}",
                self.dim
            )));
        }
        let t = shape[0];
        let dh = self.dim / self.heads;
        let q = self.query.forward(b, x)?;
        let k = self.key.forward(b, x)?;
        let v = self.value.forward(b, x)?;
        let mask = causal_mask(t);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(1, h * dh, dh)?;
            let kh = k.slice(1, h * dh, dh)?;
            let vh = v.slice(1, h * dh, dh)?;
            let att = qh
                .matmul_t(kh)?
                .scale(scale)?
                .add_const(&mask)?
                .softmax_rows()?;
            weights.push(att.value());
            heads.push(att.matmul(vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat(&heads, 1)?
        };
        Ok((self.output.forward(b, merged)?, weights))
    }
}

/// 0 on and below the diagonal, −∞ above it.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for i in 0..t {
        for j in i + 1..t {
            m.data_mut()[i * t + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Two-layer relu MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(b, x)?.relu()?;
        self.fc2.forward(b, h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]
    }
}

/// Mean negative log-likelihood over positions with nonzero `mask` weight.
///
/// Positions with zero weight may carry any target (they are ignored), but
/// every target must still be a valid class index.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[usize], mask: &[f64]) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || targets.len() != shape[0] || mask.len() != shape[0] {
        return Err(Error::config(format!(
            "cross_entropy: logits {shape:?} vs {} targets and {} mask weights",
            targets.len(),
            mask.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= shape[1]) {
        return Err(Error::config(format!(
            "cross_entropy: target {bad} outside vocabulary of {}",
            shape[1]
        )));
    }
    let total: f64 = mask.iter().sum();
    if total <= 0.0 {
        return Err(Error::config("cross_entropy: loss mask is all zero"));
    }
    let picked = logits.log_softmax_rows()?.select_per_row(targets)?;
    let weights = Arc::new(Tensor::vector(mask.to_vec()));
    Ok(picked.mul_const(weights)?.sum_all()?.scale(-1.0 / total)?)
}
