//! Line-delimited JSON corpus files.
//!
//! One object per line:
//!
//! ```text
//! {"id":"train-000000","split":"train","tokens":[17,5,40],"num_frames":14,"feat_dim":16,"frames":[...]}
//! ```
//!
//! `frames` is row-major with `num_frames * feat_dim` entries. Unknown fields
//! are rejected. Floats are written with round-trip precision, so a
//! save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Split, Utterance};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub split: Split,
    pub tokens: Vec<usize>,
    pub num_frames: usize,
    pub feat_dim: usize,
    pub frames: Vec<f64>,
}

impl CorpusRecord {
    fn from_utterance(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            split: u.split,
            tokens: u.tokens.clone(),
            num_frames: u.frames.rows(),
            feat_dim: u.frames.cols(),
            frames: u.frames.data().to_vec(),
        }
    }

    fn into_utterance(self) -> std::result::Result<Utterance, String> {
        if self.tokens.is_empty() {
            return Err("empty transcript".into());
        }
        if self.frames.len() != self.num_frames * self.feat_dim {
            return Err(format!(
                "declares {}x{} frames but carries {} values",
                self.num_frames,
                self.feat_dim,
                self.frames.len()
            ));
        }
        if self.frames.iter().any(|x| !x.is_finite()) {
            return Err("non-finite frame value".into());
        }
        let frames = Tensor::new(&[self.num_frames, self.feat_dim], self.frames).map_err(|e| e.to_string())?;
        Ok(Utterance {
            id: self.id,
            split: self.split,
            tokens: self.tokens,
            frames,
        })
    }
}

pub fn write_corpus<W: Write>(corpus: &[Utterance], mut out: W) -> Result<()> {
    for u in corpus {
        let line = serde_json::to_string(&CorpusRecord::from_utterance(u))
            .map_err(|e| Error::data(format!("serializing {}: {e}", u.id)))?;
        writeln!(out, "{line}").map_err(|e| Error::data(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::data(e.to_string()))
}

/// Parses a corpus stream; errors name the 1-based line (= record) number.
pub fn read_corpus<R: Read>(input: R) -> Result<Vec<Utterance>> {
    let mut corpus = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::data(format!("record {n}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| Error::data(format!("record {n}: {e}")))?;
        corpus.push(
            record
                .into_utterance()
                .map_err(|e| Error::data(format!("record {n}: {e}")))?,
        );
    }
    Ok(corpus)
}

pub fn save_corpus(corpus: &[Utterance], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(corpus, BufWriter::new(file))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(file).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
