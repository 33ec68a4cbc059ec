use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Binder, CausalSelfAttention, FeedForward, LayerNorm, LoraAdapter, ParamId, ParamStore};

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub attn: CausalSelfAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let x = x.add(self.attn.forward(b, self.ln1.forward(b, x)?)?)?;
        Ok(x.add(self.ffn.forward(b, self.ln2.forward(b, x)?)?)?)
    }
}

/// Small causal LM whose output head is tied to the token embedding table.
#[derive(Debug, Clone)]
pub struct DecoderLM {
    pub embed: ParamId,
    pub positions: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_final: LayerNorm,
    pub vocab: usize,
    pub dim: usize,
    pub max_positions: usize,
}

impl DecoderLM {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let embed = store.add(
            "decoder.embed",
            Tensor::randn(&[cfg.vocab, cfg.dim], 1.0, rng),
            true,
        );
        let positions = store.add(
            "decoder.positions",
            Tensor::randn(&[cfg.max_positions, cfg.dim], 0.1, rng),
            true,
        );
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let name = format!("decoder.block{i}");
            blocks.push(DecoderBlock {
                ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.dim),
                attn: CausalSelfAttention::new(store, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.dim),
                ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.dim, cfg.ffn, cfg.dim, rng),
            });
        }
        let ln_final = LayerNorm::new(store, "decoder.ln_final", cfg.dim);
        Ok(Self {
            embed,
            positions,
            blocks,
            ln_final,
            vocab: cfg.vocab,
            dim: cfg.dim,
            max_positions: cfg.max_positions,
        })
    }

    /// Adds fresh adapters to every attention projection, or re-initializes
    /// the ones already present.
    pub fn attach_lora(&mut self, store: &mut ParamStore, rank: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let dim = self.dim;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (suffix, proj) in block.attn.projections_mut() {
                let name = format!("decoder.block{i}.attn.{suffix}");
                match &proj.adapter {
                    Some(a) => {
                        let std = 1.0 / (dim as f64).sqrt();
                        store.set_value(a.down, Tensor::randn(&[rank, dim], std, rng));
                        store.set_value(a.up, Tensor::zeros(&[dim, rank]));
                    }
                    None => {
                        proj.adapter = Some(LoraAdapter::new(store, &name, dim, dim, rank, rng)?);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| b.attn.query.adapter.is_some())
    }

    /// Next-token logits for an L×D block of input embeddings.
    pub fn forward_embeddings<'t>(&self, b: &Binder<'t, '_>, inputs: Var<'t>) -> Result<Var<'t>> {
        let shape = inputs.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::config(format!(
                "decoder expects L×{} inputs, got {shape:?}",
                self.dim
            )));
        }
        let len = shape[0];
        if len > self.max_positions {
            return Err(Error::data(format!(
                "sequence of {len} positions exceeds the decoder maximum of {}",
                self.max_positions
            )));
        }
        let pos = b.param(self.positions).slice(0, 0, len)?;
        let mut x = inputs.add(pos)?;
        for block in &self.blocks {
            x = block.forward(b, x)?;
        }
        let h = self.ln_final.forward(b, x)?;
        Ok(h.matmul_t(b.param(self.embed))?)
    }

    /// Text-only forward pass.
    pub fn forward_tokens<'t>(&self, b: &Binder<'t, '_>, tokens: &[usize]) -> Result<Var<'t>> {
        if tokens.is_empty() {
            return Err(Error::data("empty token sequence"));
        }
        let emb = b.param(self.embed).gather_rows(tokens)?;
        self.forward_embeddings(b, emb)
    }
}
