use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{AsrModel, ASSISTANT, END, USER};
use crate::nn::{Binder, ParamStore};
use crate::quantizer::QuantizerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// 1 means greedy.
    pub beam: usize,
    /// Cap on generated tokens, end token included.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 4, max_len: 12 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Transcript tokens, without the end token.
    pub tokens: Vec<usize>,
    /// Sum of next-token log-probabilities, end token included when present.
    pub log_prob: f64,
    /// False when the length cap was hit before an end token.
    pub terminated: bool,
}

/// Scores continuations of `[USER] audio [ASSISTANT]` with a frozen model.
struct Scorer<'m> {
    model: &'m AsrModel,
    store: ParamStore,
    prefix: Vec<f64>,
    prefix_rows: usize,
}

impl<'m> Scorer<'m> {
    fn new(model: &'m AsrModel, frames: &Tensor, quantizer: &QuantizerConfig) -> Result<Self> {
        let audio = model.quantized_audio(frames, quantizer)?.embeddings;
        let table = model.store.value(model.decoder.embed);
        let mut prefix = table.row(USER).to_vec();
        prefix.extend_from_slice(audio.data());
        prefix.extend_from_slice(table.row(ASSISTANT));
        Ok(Self {
            model,
            store: model.store.frozen_view(),
            prefix,
            prefix_rows: audio.rows() + 2,
        })
    }

    /// Log-probabilities of the next token after `tokens`.
    fn next_log_probs(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let table = self.store.value(self.model.decoder.embed);
        let mut data = self.prefix.clone();
        for &t in tokens {
            data.extend_from_slice(table.row(t));
        }
        let rows = self.prefix_rows + tokens.len();
        let inputs = Tensor::new(&[rows, table.cols()], data)?;
        let tape = Tape::new();
        let b = Binder::new(&tape, &self.store);
        let logits = self.model.decoder.forward_embeddings(&b, tape.constant(inputs))?;
        let logits = logits.value();
        Ok(log_softmax(logits.row(rows - 1)))
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// Argmax continuation at every step; ties go to the lowest token id.
pub fn greedy(model: &AsrModel, frames: &Tensor, quantizer: &QuantizerConfig, max_len: usize) -> Result<Hypothesis> {
    let scorer = Scorer::new(model, frames, quantizer)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(&tokens)?;
        let best = crate::quantizer::argmax(&lp);
        log_prob += lp[best];
        if best == END {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                terminated: true,
            });
        }
        tokens.push(best);
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        terminated: false,
    })
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

impl Beam {
    /// Emitted ids, end token included.
    fn emitted(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens.iter().copied().chain(self.finished.then_some(END))
    }
}

/// Higher score first; equal scores fall back to the emitted ids, lowest first.
fn rank(a: &Beam, b: &Beam) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.emitted().cmp(b.emitted()))
}

/// Beam search over summed log-probabilities, no length normalization.
///
/// Finished hypotheses stay in the beam and compete with open ones; the
/// search stops once every kept hypothesis is finished or the cap is hit.
pub fn beam_search(
    model: &AsrModel,
    frames: &Tensor,
    quantizer: &QuantizerConfig,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::config("beam size must be at least 1"));
    }
    let scorer = Scorer::new(model, frames, quantizer)?;
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..max_len {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates = Vec::new();
        for b in &beams {
            if b.finished {
                candidates.push(b.clone());
                continue;
            }
            let lp = scorer.next_log_probs(&b.tokens)?;
            for (t, &l) in lp.iter().enumerate() {
                let mut tokens = b.tokens.clone();
                let finished = t == END;
                if !finished {
                    tokens.push(t);
                }
                candidates.push(Beam {
                    tokens,
                    log_prob: b.log_prob + l,
                    finished,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beam);
        beams = candidates;
    }
    let best = beams.into_iter().min_by(rank).expect("beam is never empty");
    Ok(Hypothesis {
        tokens: best.tokens,
        log_prob: best.log_prob,
        terminated: best.finished,
    })
}

/// Greedy when `cfg.beam == 1`, beam search otherwise.
pub fn decode(model: &AsrModel, frames: &Tensor, quantizer: &QuantizerConfig, cfg: &DecodeConfig) -> Result<Hypothesis> {
    match cfg.beam {
        0 => Err(Error::config("beam size must be at least 1")),
        1 => greedy(model, frames, quantizer, cfg.max_len),
        b => beam_search(model, frames, quantizer, b, cfg.max_len),
    }
}
