//! Discretization of projector outputs against a codebook copied from the
//! decoder's token embedding table.
//!
//! Three forward rules are provided:
//!
//! * [`hard_quantize_stage1`]: nearest entry by cosine similarity, with a
//!   straight-through gradient from the quantized vector to the query.
//! * [`soft_quantize`]: a weighted sum of entries, weighted by a softmax over
//!   cosine similarities and gated to the top-k entries per frame.
//! * [`hard_quantize_stage2`]: the same distribution hardened to one-hot in the
//!   forward pass, with a straight-through gradient onto the distribution so
//!   the codebook and the query both keep learning.
//!
//! With top-k gating, codebook rows outside a frame's top-k receive no
//! gradient from that frame, neither through the weighted sum nor through the
//! softmax normalizer.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{cosine_similarity_values, Tensor, Var};
use crate::error::{Error, Result};

#[cfg(test)]
mod tests;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Off,
    Hard,
    Soft,
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantMode::Off => "off",
            QuantMode::Hard => "hard",
            QuantMode::Soft => "soft",
        })
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(QuantMode::Off),
            "hard" => Ok(QuantMode::Hard),
            "soft" => Ok(QuantMode::Soft),
            other => Err(Error::config(format!(
                "unknown quantizer mode '{other}' (expected off|hard|soft)"
            ))),
        }
    }
}

/// Number of codebook entries kept per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopK {
    All,
    K(usize),
}

impl TopK {
    pub fn resolve(self, vocab: usize) -> usize {
        match self {
            TopK::All => vocab,
            TopK::K(k) => k,
        }
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::All => f.write_str("all"),
            TopK::K(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TopK::All);
        }
        s.parse::<usize>()
            .map(TopK::K)
            .map_err(|_| Error::config(format!("k must be a positive integer or 'all', got '{s}'")))
    }
}

/// Which straight-through rule a hard quantizer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Gradient passes from the quantized vector to the projector output.
    One,
    /// Gradient passes from the one-hot distribution to the soft distribution.
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    pub mode: QuantMode,
    pub k: TopK,
    /// Divide the retained top-k weights by their sum.
    pub renormalize_topk: bool,
    pub temperature: f64,
    pub codebook_trainable: bool,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            mode: QuantMode::Off,
            k: TopK::All,
            renormalize_topk: false,
            temperature: 1.0,
            codebook_trainable: false,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if let TopK::K(k) = self.k {
            if k == 0 || k > vocab {
                return Err(Error::config(format!("k={k} outside 1..={vocab}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Result of quantizing a T×D block of projector outputs.
pub struct QuantizerOutput<'t> {
    /// T×D vectors handed to the decoder.
    pub embeddings: Var<'t>,
    /// Full T×V similarity distribution (before top-k gating).
    pub distribution: Option<Var<'t>>,
    /// T×V coefficients actually applied to the codebook rows.
    pub weights: Option<Var<'t>>,
    /// Selected entry per frame (hard modes).
    pub indices: Option<Vec<usize>>,
    /// Number of codebook entries.
    pub codebook_size: usize,
}

impl QuantizerOutput<'_> {
    /// Per-frame usage rows for codebook statistics: one-hot selections in
    /// hard modes, applied weights normalized to sum to one in soft mode.
    pub fn usage_rows(&self) -> Option<Tensor> {
        if let Some(idx) = &self.indices {
            let v = self.codebook_size;
            let mut t = Tensor::zeros(&[idx.len(), v]);
            for (r, &i) in idx.iter().enumerate() {
                t.data_mut()[r * v + i] = 1.0;
            }
            return Some(t);
        }
        let w = self.weights?.value();
        let mut t = (*w).clone();
        for r in 0..t.rows() {
            let s: f64 = t.row(r).iter().sum();
            if s > 0.0 {
                for x in t.row_mut(r) {
                    *x /= s;
                }
            }
        }
        Some(t)
    }
}

/// Softmax over cosine similarities: `A[t,j] ∝ exp(sim(z_t, e_j) / τ)`.
///
/// `codebook_mask` (T×V of 0/1) limits which pairs pass gradient to the codebook.
pub fn similarity_distribution<'t>(
    z: Var<'t>,
    codebook: Var<'t>,
    temperature: f64,
    codebook_mask: Option<Arc<Tensor>>,
) -> Result<Var<'t>> {
    let sims = z.cosine_similarity(codebook, codebook_mask)?;
    let scaled = if temperature == 1.0 {
        sims
    } else {
        sims.scale(1.0 / temperature)?
    };
    Ok(scaled.softmax_rows()?)
}

/// Same distribution computed on plain values.
pub fn similarity_distribution_values(z: &Tensor, codebook: &Tensor, temperature: f64) -> Result<Tensor> {
    let mut a = cosine_similarity_values(z, codebook)?;
    for r in 0..a.rows() {
        let row = a.row_mut(r);
        if temperature != 1.0 {
            for x in row.iter_mut() {
                *x /= temperature;
            }
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    Ok(a)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest values in descending order; ties by lowest index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// 0/1 mask of each row's top-k entries, plus the smallest gap between the
/// k-th and (k+1)-th value over all rows.
pub fn top_k_mask(a: &Tensor, k: usize) -> Result<(Tensor, f64)> {
    let v = a.cols();
    if k == 0 || k > v {
        return Err(Error::config(format!("k={k} outside 1..={v}")));
    }
    let mut mask = Tensor::zeros(a.shape());
    let mut gap = f64::INFINITY;
    for r in 0..a.rows() {
        let row = a.row(r);
        let order = top_k_indices(row, v);
        for &i in &order[..k] {
            mask.data_mut()[r * v + i] = 1.0;
        }
        if k < v {
            gap = gap.min(row[order[k - 1]] - row[order[k]]);
        }
    }
    Ok((mask, gap))
}

/// Keeps each row's top-k entries of `a` and zeroes the rest; optionally
/// rescales the kept entries to sum to one. Zeroed entries get zero gradient.
pub fn topk_mask<'t>(a: Var<'t>, k: TopK, renormalize: bool) -> Result<Var<'t>> {
    let value = a.value();
    let k = k.resolve(value.cols());
    let (mask, gap) = top_k_mask(&value, k)?;
    if a.requires_grad() {
        a.tape().note_kink(gap);
    }
    apply_topk(a, Arc::new(mask), renormalize)
}

fn apply_topk<'t>(a: Var<'t>, mask: Arc<Tensor>, renormalize: bool) -> Result<Var<'t>> {
    // A full softmax row already sums to one.
    if mask.data().iter().all(|&m| m == 1.0) {
        return Ok(a);
    }
    let kept = a.mul_const(mask)?;
    if !renormalize {
        return Ok(kept);
    }
    let sums = kept.sum_axis(1)?;
    Ok(kept.div_col(sums)?)
}

/// Nearest codebook entry per frame with a straight-through gradient to `z`.
///
/// The forward value of each output row is bit-identical to the chosen
/// codebook row; the codebook itself receives no gradient.
pub fn hard_quantize_stage1<'t>(z: Var<'t>, codebook: &Tensor) -> Result<QuantizerOutput<'t>> {
    let sims = cosine_similarity_values(&z.value(), codebook)?;
    let mut indices = Vec::with_capacity(sims.rows());
    let mut quantized = Vec::with_capacity(sims.rows() * codebook.cols());
    let mut gap = f64::INFINITY;
    for r in 0..sims.rows() {
        let row = sims.row(r);
        let best = argmax(row);
        if row.len() > 1 {
            let order = top_k_indices(row, 2);
            gap = gap.min((row[order[0]] - row[order[1]]) / 2.0);
        }
        indices.push(best);
        quantized.extend_from_slice(codebook.row(best));
    }
    if z.requires_grad() {
        z.tape().note_kink(gap);
    }
    let q = Tensor::new(&[indices.len(), codebook.cols()], quantized)?;
    let embeddings = z.straight_through(&q)?;
    Ok(QuantizerOutput {
        embeddings,
        distribution: None,
        weights: None,
        indices: Some(indices),
        codebook_size: codebook.rows(),
    })
}

/// Top-k mask of the similarity distribution, computed on values up front so
/// the same mask can gate the codebook gradient inside the similarity op.
fn distribution_with_mask<'t>(
    z: Var<'t>,
    codebook: Var<'t>,
    cfg: &QuantizerConfig,
) -> Result<(Var<'t>, Arc<Tensor>)> {
    let v = codebook.shape()[0];
    let k = cfg.k.resolve(v);
    let a_values = similarity_distribution_values(&z.value(), &codebook.value(), cfg.temperature)?;
    let (mask, gap) = top_k_mask(&a_values, k)?;
    if z.requires_grad() || codebook.requires_grad() {
        z.tape().note_kink(gap);
    }
    let mask = Arc::new(mask);
    let grad_mask = (k < v).then(|| Arc::clone(&mask));
    let a = similarity_distribution(z, codebook, cfg.temperature, grad_mask)?;
    Ok((a, mask))
}

/// Weighted sum of codebook rows under the top-k gated similarity distribution.
pub fn soft_quantize<'t>(
    z: Var<'t>,
    codebook: Var<'t>,
    cfg: &QuantizerConfig,
) -> Result<QuantizerOutput<'t>> {
    cfg.validate(codebook.shape()[0])?;
    let (a, mask) = distribution_with_mask(z, codebook, cfg)?;
    let weights = apply_topk(a, mask, cfg.renormalize_topk)?;
    let embeddings = weights.matmul(codebook)?;
    Ok(QuantizerOutput {
        embeddings,
        distribution: Some(a),
        weights: Some(weights),
        indices: None,
        codebook_size: codebook.shape()[0],
    })
}

/// One-hot selection in the forward pass, straight-through onto the (top-k
/// gated) similarity distribution in the backward pass.
pub fn hard_quantize_stage2<'t>(
    z: Var<'t>,
    codebook: Var<'t>,
    cfg: &QuantizerConfig,
) -> Result<QuantizerOutput<'t>> {
    cfg.validate(codebook.shape()[0])?;
    let (a, mask) = distribution_with_mask(z, codebook, cfg)?;
    let gated = apply_topk(a, mask, cfg.renormalize_topk)?;
    let gated_values = gated.value();
    let (t, v) = (gated_values.rows(), gated_values.cols());
    let mut one_hot = Tensor::zeros(&[t, v]);
    let mut indices = Vec::with_capacity(t);
    for r in 0..t {
        let best = argmax(gated_values.row(r));
        one_hot.data_mut()[r * v + best] = 1.0;
        indices.push(best);
    }
    let weights = gated.straight_through(&one_hot)?;
    let embeddings = weights.matmul(codebook)?;
    Ok(QuantizerOutput {
        embeddings,
        distribution: Some(a),
        weights: Some(weights),
        indices: Some(indices),
        codebook_size: v,
    })
}

/// Dispatches on `cfg.mode`; `stage` picks the straight-through rule for hard mode.
pub fn quantize<'t>(
    z: Var<'t>,
    codebook: Var<'t>,
    cfg: &QuantizerConfig,
    stage: Stage,
) -> Result<QuantizerOutput<'t>> {
    cfg.validate(codebook.shape()[0])?;
    match (cfg.mode, stage) {
        (QuantMode::Off, _) => Ok(QuantizerOutput {
            embeddings: z,
            distribution: None,
            weights: None,
            indices: None,
            codebook_size: codebook.shape()[0],
        }),
        (QuantMode::Hard, Stage::One) => {
            if codebook.requires_grad() {
                return Err(Error::config(
                    "stage-1 hard quantization requires a frozen codebook",
                ));
            }
            hard_quantize_stage1(z, &codebook.value())
        }
        (QuantMode::Hard, Stage::Two) => hard_quantize_stage2(z, codebook, cfg),
        (QuantMode::Soft, _) => soft_quantize(z, codebook, cfg),
    }
}
