use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::autograd::{cosine_similarity_values, Tensor};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::model::AsrModel;
use crate::parallel::{map, Exec};
use crate::quantizer::QuantizerConfig;

/// Per frame, the `k` table rows with the highest cosine similarity,
/// descending, ties broken by lowest id.
pub fn nearest_tokens(audio: &Tensor, table: &Tensor, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let sims = cosine_similarity_values(audio, table)?;
    let k = k.min(table.rows());
    Ok((0..sims.rows())
        .map(|r| {
            let row = sims.row(r);
            let mut ids: Vec<usize> = (0..row.len()).collect();
            ids.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            ids.into_iter().take(k).map(|j| (j, row[j])).collect()
        })
        .collect())
}

/// PCA onto the two leading principal directions of the mean-centered points.
///
/// Each direction is signed so that its largest-magnitude loading is positive.
pub fn project_2d(points: &Tensor) -> Result<Tensor> {
    if points.shape().len() != 2 || points.rows() < 2 {
        return Err(Error::data("projection needs at least two points"));
    }
    let (n, d) = (points.rows(), points.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(points.row(r)) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |r, c| points.get2(r, c) - mean[c]);
    if centered.iter().all(|&x| x == 0.0) {
        return Err(Error::data("all points are identical; nothing to project"));
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0).max(1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; n * 2];
    for (slot, &c) in order.iter().take(2).enumerate() {
        let mut dir: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = dir
            .iter()
            .copied()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            dir.iter_mut().for_each(|x| *x = -*x);
        }
        for r in 0..n {
            out[r * 2 + slot] = centered.row(r).iter().zip(&dir).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Tensor::new(&[n, 2], out)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodebookStats {
    /// Selection counts (hard) or summed normalized weights (soft) per entry.
    pub histogram: Vec<f64>,
    pub frames: usize,
    /// Entropy of the normalized histogram, in nats.
    pub entropy: f64,
}

/// Aggregates per-frame usage rows (one-hot in hard mode, normalized weights
/// in soft mode).
pub fn codebook_stats<'a>(usage: impl IntoIterator<Item = &'a Tensor>) -> Result<CodebookStats> {
    let mut histogram: Vec<f64> = Vec::new();
    let mut frames = 0;
    for rows in usage {
        if histogram.is_empty() {
            histogram = vec![0.0; rows.cols()];
        }
        if rows.cols() != histogram.len() {
            return Err(Error::data("usage rows disagree on the codebook size"));
        }
        for r in 0..rows.rows() {
            for (h, x) in histogram.iter_mut().zip(rows.row(r)) {
                *h += x;
            }
        }
        frames += rows.rows();
    }
    let total: f64 = histogram.iter().sum();
    let entropy = if total > 0.0 {
        -histogram
            .iter()
            .filter(|&&h| h > 0.0)
            .map(|&h| {
                let p = h / total;
                p * p.ln()
            })
            .sum::<f64>()
    } else {
        0.0
    };
    Ok(CodebookStats {
        histogram,
        frames,
        entropy: entropy.max(0.0),
    })
}

/// Time-averaged audio span and transcript embeddings of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceMeans {
    pub id: String,
    pub audio: Vec<f64>,
    pub text: Vec<f64>,
}

fn row_mean(t: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        for (a, x) in m.iter_mut().zip(t.row(r)) {
            *a += x;
        }
    }
    m.iter_mut().for_each(|a| *a /= t.rows() as f64);
    m
}

pub fn utterance_means(
    model: &AsrModel,
    utterances: &[&Utterance],
    quantizer: &QuantizerConfig,
    exec: Exec,
) -> Result<Vec<UtteranceMeans>> {
    let table = model.store.value(model.decoder.embed);
    map(exec, utterances, |u| -> Result<UtteranceMeans> {
        model.check_tokens(&u.tokens)?;
        let audio = model.quantized_audio(&u.frames, quantizer)?.embeddings;
        let text = Tensor::from_rows(&u.tokens.iter().map(|&t| table.row(t).to_vec()).collect::<Vec<_>>())?;
        Ok(UtteranceMeans {
            id: u.id.clone(),
            audio: row_mean(&audio),
            text: row_mean(&text),
        })
    })
    .into_iter()
    .collect()
}

/// Mean cosine distance between each utterance's averaged audio span and
/// its averaged transcript embeddings.
pub fn modality_gap(means: &[UtteranceMeans]) -> Result<f64> {
    if means.is_empty() {
        return Err(Error::data("modality gap needs at least one utterance"));
    }
    let mut total = 0.0;
    for m in means {
        let dot: f64 = m.audio.iter().zip(&m.text).map(|(a, b)| a * b).sum();
        let na = m.audio.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nt = m.text.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nt == 0.0 {
            return Err(Error::data(format!("utterance {} has a zero mean embedding", m.id)));
        }
        total += 1.0 - dot / (na * nt);
    }
    Ok(total / means.len() as f64)
}
