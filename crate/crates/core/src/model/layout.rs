use crate::autograd::Var;
use crate::error::{Error, Result};

use super::{ASSISTANT, END, PAD, USER};

/// Segment order: prefix, audio span, instruction, assistant marker,
/// transcript, end token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub prefix: Vec<usize>,
    pub audio_len: usize,
    pub instruction: Vec<usize>,
    pub assistant: Vec<usize>,
    pub transcript: Vec<usize>,
    pub end: usize,
}

impl PromptLayout {
    /// `[USER] audio… [ASSISTANT] transcript… [END]`.
    pub fn asr(audio_len: usize, transcript: Vec<usize>) -> Self {
        Self {
            prefix: vec![USER],
            audio_len,
            instruction: Vec::new(),
            assistant: vec![ASSISTANT],
            transcript,
            end: END,
        }
    }

    pub fn len(&self) -> usize {
        self.prefix_len() + self.transcript.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Positions before the first transcript token.
    pub fn prefix_len(&self) -> usize {
        self.prefix.len() + self.audio_len + self.instruction.len() + self.assistant.len()
    }

    /// Token id at each position, `None` inside the audio span.
    pub fn tokens(&self) -> Vec<Option<usize>> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.prefix.iter().map(|&t| Some(t)));
        out.extend(std::iter::repeat_n(None, self.audio_len));
        out.extend(self.instruction.iter().map(|&t| Some(t)));
        out.extend(self.assistant.iter().map(|&t| Some(t)));
        out.extend(self.transcript.iter().map(|&t| Some(t)));
        out.push(Some(self.end));
        out
    }

    /// Next-token targets and loss mask. Position `i` predicts position
    /// `i + 1`; the mask is 1 where that next token is a transcript token or
    /// the end token.
    pub fn targets_and_mask(&self) -> (Vec<usize>, Vec<f64>) {
        let tokens = self.tokens();
        let first_scored = self.prefix_len();
        let n = tokens.len();
        let mut targets = vec![PAD; n];
        let mut mask = vec![0.0; n];
        for i in 0..n - 1 {
            if let Some(t) = tokens[i + 1] {
                targets[i] = t;
            }
            if i + 1 >= first_scored {
                mask[i] = 1.0;
            }
        }
        (targets, mask)
    }
}

pub struct Assembled<'t> {
    /// L×D decoder inputs.
    pub inputs: Var<'t>,
    pub targets: Vec<usize>,
    pub mask: Vec<f64>,
    /// Index of the first audio position.
    pub audio_start: usize,
}

/// Concatenates text embeddings looked up in `table` with `audio` in layout order.
pub fn assemble_sequence<'t>(
    layout: &PromptLayout,
    audio: Var<'t>,
    table: Var<'t>,
    max_positions: usize,
) -> Result<Assembled<'t>> {
    let shape = audio.shape();
    if shape.len() != 2 || shape[0] != layout.audio_len {
        return Err(Error::config(format!(
            "audio span {shape:?} does not match the layout's {} positions",
            layout.audio_len
        )));
    }
    let len = layout.len();
    if len > max_positions {
        return Err(Error::data(format!(
            "assembled sequence of {len} positions exceeds the decoder maximum of {max_positions}"
        )));
    }
    let mut parts = Vec::with_capacity(3);
    let lookup = |ids: &[usize]| table.gather_rows(ids);
    if !layout.prefix.is_empty() {
        parts.push(lookup(&layout.prefix)?);
    }
    if layout.audio_len > 0 {
        parts.push(audio);
    }
    let mut tail = layout.instruction.clone();
    tail.extend(&layout.assistant);
    tail.extend(&layout.transcript);
    tail.push(layout.end);
    parts.push(lookup(&tail)?);
    let inputs = Var::concat(&parts, 0)?;
    let (targets, mask) = layout.targets_and_mask();
    Ok(Assembled {
        inputs,
        targets,
        mask,
        audio_start: layout.prefix.len(),
    })
}
