//! Synthetic "speech" corpus: bigram transcripts rendered as noisy frame
//! sequences, with in-domain and out-of-domain test splits.

mod io;


pub use io::{load_corpus, read_corpus, save_corpus, write_corpus, CorpusRecord};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{ASSISTANT, END, FIRST_CONTENT, USER};
use crate::rng::derived;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test-id")]
    TestId,
    #[serde(rename = "test-ood")]
    TestOod,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestId, Split::TestOod];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestId => "test-id",
            Split::TestOod => "test-ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test-id" | "id" => Ok(Split::TestId),
            "test-ood" | "ood" => Ok(Split::TestOod),
            _ => Err(Error::config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    pub tokens: Vec<usize>,
    /// T×F_in frame matrix.
    pub frames: Tensor,
}

pub type Corpus = Vec<Utterance>;

pub fn split_of(corpus: &[Utterance], split: Split) -> Vec<&Utterance> {
    corpus.iter().filter(|u| u.split == split).collect()
}

/// Bigram language over content tokens `FIRST_CONTENT..vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrammarSpec {
    pub vocab: usize,
    /// Row 0 is the start distribution; row `1 + i` follows content token `i`.
    pub transitions: Vec<Vec<f64>>,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl GrammarSpec {
    pub fn content_count(&self) -> usize {
        self.vocab - FIRST_CONTENT
    }

    /// Sparse random bigram table: every row spreads its mass over
    /// `fan_out` successors with random weights.
    pub fn random(vocab: usize, fan_out: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Self> {
        if vocab <= FIRST_CONTENT + 1 {
            return Err(Error::config(format!("vocabulary {vocab} is too small for a grammar")));
        }
        let n = vocab - FIRST_CONTENT;
        let mut rng = derived(seed, "grammar");
        let transitions = (0..=n).map(|_| sparse_row(n, fan_out, &mut rng)).collect();
        let g = Self {
            vocab,
            transitions,
            min_len,
            max_len,
            seed,
        };
        g.validate()?;
        Ok(g)
    }

    /// Topic shift: each row is mixed with an independent random row.
    pub fn shifted(&self, weight: f64, fan_out: usize, seed: u64) -> Result<Self> {
        let n = self.content_count();
        let mut rng = derived(seed, "grammar-shift");
        let transitions = self
            .transitions
            .iter()
            .map(|row| {
                let other = sparse_row(n, fan_out, &mut rng);
                row.iter()
                    .zip(other)
                    .map(|(p, q)| (1.0 - weight) * p + weight * q)
                    .collect()
            })
            .collect();
        let g = Self {
            transitions,
            seed,
            ..self.clone()
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.content_count();
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "sentence length range {}..={} is invalid",
                self.min_len, self.max_len
            )));
        }
        if self.transitions.len() != n + 1 {
            return Err(Error::config(format!(
                "transition table has {} rows, expected {}",
                self.transitions.len(),
                n + 1
            )));
        }
        for (r, row) in self.transitions.iter().enumerate() {
            if row.len() != n || row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
                return Err(Error::config(format!("transition row {r} is malformed")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("transition row {r} sums to {sum}")));
            }
            // A token whose only successor is itself never leaves.
            if r > 0 && (row[r - 1] - 1.0).abs() < 1e-12 {
                return Err(Error::config(format!(
                    "token {} is an absorbing state with no exit",
                    r - 1 + FIRST_CONTENT
                )));
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let len = rng.random_range(self.min_len..=self.max_len);
        let mut out = Vec::with_capacity(len);
        let mut row = 0;
        for _ in 0..len {
            let i = sample_index(&self.transitions[row], rng);
            out.push(i + FIRST_CONTENT);
            row = i + 1;
        }
        out
    }

    /// Probability of a token sequence under the bigram model (length ignored).
    pub fn log_prob(&self, tokens: &[usize]) -> f64 {
        let mut row = 0;
        let mut lp = 0.0;
        for &t in tokens {
            let i = t - FIRST_CONTENT;
            lp += self.transitions[row][i].ln();
            row = i + 1;
        }
        lp
    }
}

fn sparse_row(n: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fan_out = fan_out.clamp(1, n);
    let mut row = vec![0.0; n];
    let mut picked = HashSet::new();
    while picked.len() < fan_out {
        picked.insert(rng.random_range(0..n));
    }
    let mut picked: Vec<_> = picked.into_iter().collect();
    picked.sort_unstable();
    for i in picked {
        row[i] = 0.2 + rng.random::<f64>();
    }
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= s);
    row
}

fn sample_index(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Affine map `x ↦ M·x + c` applied to every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    /// F×F.
    pub matrix: Tensor,
    pub offset: Vec<f64>,
}

impl Channel {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: Tensor::eye(dim),
            offset: vec![0.0; dim],
        }
    }

    /// `I + strength·G/√F` with gaussian `G`, plus a gaussian offset.
    pub fn random(dim: usize, strength: f64, offset_std: f64, seed: u64) -> Self {
        let mut rng = derived(seed, "channel");
        let g = Tensor::randn(&[dim, dim], strength / (dim as f64).sqrt(), &mut rng);
        let mut matrix = Tensor::eye(dim);
        matrix.add_assign(&g);
        let offset = Tensor::randn(&[dim], offset_std, &mut rng).into_data();
        Self { matrix, offset }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let f = x.len();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.matrix.data()[r * f..(r + 1) * f];
            *o = self.offset[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// How tokens sound: a signature per token, a duration range, noise and channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModelSpec {
    /// V×F_in, one row per token id (special rows unused).
    pub signatures: Tensor,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise: f64,
    pub channel: Channel,
    pub seed: u64,
}

impl AcousticModelSpec {
    pub fn random(vocab: usize, feat: usize, min_frames: usize, max_frames: usize, noise: f64, seed: u64) -> Result<Self> {
        let mut rng = derived(seed, "signatures");
        let spec = Self {
            signatures: Tensor::randn(&[vocab, feat], 1.0, &mut rng),
            min_frames,
            max_frames,
            noise,
            channel: Channel::identity(feat),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn feat_dim(&self) -> usize {
        self.signatures.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config(format!("noise σ must be ≥ 0, got {}", self.noise)));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::config(format!(
                "frames-per-token range {}..={} is invalid",
                self.min_frames, self.max_frames
            )));
        }
        let f = self.feat_dim();
        if self.channel.matrix.shape() != [f, f] || self.channel.offset.len() != f {
            return Err(Error::config("channel transform does not match the feature dimension"));
        }
        let v = self.signatures.rows();
        for a in FIRST_CONTENT..v {
            for b in a + 1..v {
                if self.signatures.row(a) == self.signatures.row(b) {
                    return Err(Error::config(format!("tokens {a} and {b} share a signature")));
                }
            }
        }
        Ok(())
    }

    /// Frames for one transcript: each token lasts `min..=max` frames of
    /// `channel(signature + noise)`.
    pub fn render(&self, tokens: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let f = self.feat_dim();
        let noise = Normal::new(0.0, self.noise).map_err(|e| Error::config(e.to_string()))?;
        let mut data = Vec::new();
        let mut clean = vec![0.0; f];
        let mut out = vec![0.0; f];
        for &t in tokens {
            if t >= self.signatures.rows() {
                return Err(Error::data(format!("token {t} has no acoustic signature")));
            }
            let n = rng.random_range(self.min_frames..=self.max_frames);
            for _ in 0..n {
                for (c, s) in clean.iter_mut().zip(self.signatures.row(t)) {
                    *c = s + noise.sample(rng);
                }
                self.channel.apply(&clean, &mut out);
                data.extend_from_slice(&out);
            }
        }
        if data.is_empty() {
            return Err(Error::data("cannot render an empty transcript"));
        }
        Ok(Tensor::new(&[data.len() / f, f], data)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub test_id: usize,
    pub test_ood: usize,
}

/// Everything needed to generate a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub grammar: GrammarSpec,
    pub acoustics: AcousticModelSpec,
    pub ood_grammar: GrammarSpec,
    pub ood_acoustics: AcousticModelSpec,
    pub counts: SplitCounts,
    pub seed: u64,
}

/// Knobs for [`CorpusSpec::synthetic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticOptions {
    pub vocab: usize,
    pub feat: usize,
    pub fan_out: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise: f64,
    pub ood_noise: f64,
    pub ood_channel: f64,
    pub ood_offset: f64,
    pub ood_topic_shift: f64,
    pub train: usize,
    pub test_id: usize,
    pub test_ood: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        Self {
            vocab: 64,
            feat: 16,
            fan_out: 6,
            min_len: 3,
            max_len: 8,
            min_frames: 3,
            max_frames: 8,
            noise: 0.5,
            ood_noise: 0.8,
            ood_channel: 0.6,
            ood_offset: 0.4,
            ood_topic_shift: 0.5,
            train: 2000,
            test_id: 200,
            test_ood: 200,
        }
    }
}

impl CorpusSpec {
    /// In-domain grammar and acoustics plus an OOD variant with a different
    /// channel, more noise and a shifted bigram table.
    pub fn synthetic(opts: &SyntheticOptions, seed: u64) -> Result<Self> {
        let grammar = GrammarSpec::random(opts.vocab, opts.fan_out, opts.min_len, opts.max_len, seed)?;
        let acoustics = AcousticModelSpec::random(
            opts.vocab,
            opts.feat,
            opts.min_frames,
            opts.max_frames,
            opts.noise,
            seed,
        )?;
        let ood_grammar = grammar.shifted(opts.ood_topic_shift, opts.fan_out, seed)?;
        let ood_acoustics = AcousticModelSpec {
            noise: opts.ood_noise,
            channel: Channel::random(opts.feat, opts.ood_channel, opts.ood_offset, seed),
            ..acoustics.clone()
        };
        ood_acoustics.validate()?;
        Ok(Self {
            grammar,
            acoustics,
            ood_grammar,
            ood_acoustics,
            counts: SplitCounts {
                train: opts.train,
                test_id: opts.test_id,
                test_ood: opts.test_ood,
            },
            seed,
        })
    }
}

const MAX_RESAMPLES: usize = 10_000;

/// Deterministic given the spec's seeds. Test transcripts never repeat a
/// training transcript.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.grammar.validate()?;
    spec.ood_grammar.validate()?;
    spec.acoustics.validate()?;
    spec.ood_acoustics.validate()?;
    let mut corpus = Vec::with_capacity(spec.counts.train + spec.counts.test_id + spec.counts.test_ood);
    let mut seen = HashSet::new();
    let plan = [
        (Split::Train, spec.counts.train, &spec.grammar, &spec.acoustics),
        (Split::TestId, spec.counts.test_id, &spec.grammar, &spec.acoustics),
        (Split::TestOod, spec.counts.test_ood, &spec.ood_grammar, &spec.ood_acoustics),
    ];
    for (split, count, grammar, acoustics) in plan {
        let mut text_rng = derived(spec.seed, &format!("{split}-text"));
        let mut audio_rng = derived(spec.seed, &format!("{split}-audio"));
        for i in 0..count {
            let mut tokens = grammar.sample(&mut text_rng);
            if split != Split::Train {
                let mut tries = 0;
                while seen.contains(&tokens) {
                    tries += 1;
                    if tries > MAX_RESAMPLES {
                        return Err(Error::config(format!(
                            "could not find a {split} transcript disjoint from training"
                        )));
                    }
                    tokens = grammar.sample(&mut text_rng);
                }
            }
            let frames = acoustics.render(&tokens, &mut audio_rng)?;
            if split == Split::Train {
                seen.insert(tokens.clone());
            }
            corpus.push(Utterance {
                id: format!("{split}-{i:06}"),
                split,
                tokens,
                frames,
            });
        }
    }
    Ok(corpus)
}

/// Text-only sequences for decoder pretraining, drawn from both grammars.
///
/// One in four is a plain sentence `[USER, ASSISTANT, w…, END]`; the rest are
/// copy prompts `[USER, s…, ASSISTANT, w…, END]`. In half of the copy prompts
/// the source `s` repeats each word once or twice.
pub fn lm_corpus(spec: &CorpusSpec, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = derived(seed, "lm-corpus");
    (0..count)
        .map(|i| {
            let grammar = if (i / 4) % 4 == 3 { &spec.ood_grammar } else { &spec.grammar };
            let words = grammar.sample(&mut rng);
            let mut seq = vec![USER];
            match i % 4 {
                0 => {}
                1 | 2 => seq.extend(&words),
                _ => {
                    for &w in &words {
                        let n = rng.random_range(1..=2);
                        seq.extend(std::iter::repeat_n(w, n));
                    }
                }
            }
            seq.push(ASSISTANT);
            seq.extend(&words);
            seq.push(END);
            seq
        })
        .collect()
}
