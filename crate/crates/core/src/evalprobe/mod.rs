//! Decoding, WER, and embedding-space probes.

mod decode;
mod probe;

#[cfg(test)]
mod tests;

pub use decode::{beam_search, decode, greedy, DecodeConfig, Hypothesis};
pub use probe::{
    codebook_stats, modality_gap, nearest_tokens, project_2d, utterance_means, CodebookStats,
    UtteranceMeans,
};

use serde::Serialize;

use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::autograd::Tensor;
use crate::model::AsrModel;
use crate::parallel::{map, Exec};
use crate::quantizer::QuantizerConfig;

/// Word error rate: minimal edit distance over the reference length.
pub fn wer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::data("WER needs a non-empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub log_prob: f64,
    pub terminated: bool,
    pub edits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub utterances: Vec<UtteranceResult>,
    pub edits: usize,
    pub reference_tokens: usize,
}

impl EvalResult {
    /// Corpus-level WER: summed edits over summed reference lengths.
    pub fn wer(&self) -> f64 {
        self.edits as f64 / self.reference_tokens.max(1) as f64
    }
}

/// Decodes every utterance and scores it against its transcript.
pub fn evaluate(
    model: &AsrModel,
    utterances: &[&Utterance],
    quantizer: &QuantizerConfig,
    cfg: &DecodeConfig,
    exec: Exec,
) -> Result<EvalResult> {
    evaluate_with(utterances, exec, |frames| decode(model, frames, quantizer, cfg))
}

/// Scores the hypotheses `decoder` produces for every utterance.
pub fn evaluate_with<F>(utterances: &[&Utterance], exec: Exec, decoder: F) -> Result<EvalResult>
where
    F: Fn(&Tensor) -> Result<Hypothesis> + Sync + Send,
{
    let rows = map(exec, utterances, |u| -> Result<UtteranceResult> {
        let hyp = decoder(&u.frames)?;
        Ok(UtteranceResult {
            id: u.id.clone(),
            edits: edit_distance(&u.tokens, &hyp.tokens),
            reference: u.tokens.clone(),
            hypothesis: hyp.tokens,
            log_prob: hyp.log_prob,
            terminated: hyp.terminated,
        })
    });
    let mut out = EvalResult {
        utterances: Vec::with_capacity(rows.len()),
        edits: 0,
        reference_tokens: 0,
    };
    for r in rows {
        let r = r?;
        if r.reference.is_empty() {
            return Err(Error::data(format!("utterance {} has an empty transcript", r.id)));
        }
        out.edits += r.edits;
        out.reference_tokens += r.reference.len();
        out.utterances.push(r);
    }
    Ok(out)
}
