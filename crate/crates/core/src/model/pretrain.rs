use rand::seq::SliceRandom;

use super::{AsrModel, DecoderLM, ParamGroup};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Adam, Binder};
use crate::parallel::{batch_gradients, Exec};
use crate::rng::derived;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup: u64,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 16,
            peak_lr: 3e-3,
            warmup: 100,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

/// Mean next-token cross-entropy over every position of `tokens`.
pub fn lm_sequence_loss<'t>(b: &Binder<'t, '_>, decoder: &DecoderLM, tokens: &[usize]) -> Result<Var<'t>> {
    if tokens.len() < 2 {
        return Err(Error::data("language-model sequences need at least two tokens"));
    }
    let n = tokens.len() - 1;
    let logits = decoder.forward_tokens(b, &tokens[..n])?;
    cross_entropy(logits, &tokens[1..], &vec![1.0; n])
}

/// Trains the decoder (all base weights) on text, then freezes it and copies
/// its embedding table into the codebook. Returns the per-step batch losses.
pub fn pretrain_lm(model: &mut AsrModel, corpus: &[Vec<usize>], opts: &PretrainOptions) -> Result<Vec<f64>> {
    if corpus.is_empty() || opts.batch == 0 {
        return Err(Error::config("pretraining needs a non-empty corpus and batch"));
    }
    for seq in corpus {
        model.check_tokens(seq)?;
    }
    model.set_trainable(&[ParamGroup::DecoderBase]);
    let mut adam = Adam::new(opts.peak_lr, opts.warmup);
    let mut rng = derived(opts.seed, "pretrain-order");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch);
        while batch.len() < opts.batch.min(corpus.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].as_slice());
            cursor += 1;
        }
        let decoder = &model.decoder;
        let (loss, grads) = batch_gradients(opts.exec, &model.store, &batch, |b, seq| {
            lm_sequence_loss(b, decoder, seq)
        })?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("pretraining loss is {loss} at step {step}")));
        }
        adam.update(&mut model.store, &grads)?;
        losses.push(loss);
    }
    model.set_trainable(&[]);
    let table = model.store.value(model.decoder.embed).clone();
    model.store.set_value(model.codebook, table);
    Ok(losses)
}
