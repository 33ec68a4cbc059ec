use proptest::prelude::*;

use super::*;
use crate::autograd::Tensor;
use crate::data::Split;
use crate::model::ModelConfig;
use crate::quantizer::{QuantMode, TopK};
use crate::rng::seeded;

/// Minimum cost over every alignment path, enumerated without memoization.
fn alignment_oracle(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let diag = usize::from(x != y) + alignment_oracle(ra, rb);
            let del = 1 + alignment_oracle(ra, b);
            let ins = 1 + alignment_oracle(a, rb);
            diag.min(del).min(ins)
        }
    }
}

fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..alphabet {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn wer_examples() {
    assert_eq!(wer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
    assert_eq!(wer(&[1, 2, 3, 4], &[1, 9, 3]).unwrap(), 0.5);
    assert_eq!(wer(&[1, 2, 3, 4, 5], &[]).unwrap(), 1.0);
    assert!(wer(&[], &[1]).is_err());
}

#[test]
fn edit_distance_matches_alignment_oracle_up_to_length_4() {
    let seqs = all_sequences(4, 3);
    for a in &seqs {
        for b in &seqs {
            assert_eq!(edit_distance(a, b), alignment_oracle(a, b), "{a:?} vs {b:?}");
        }
    }
}

fn example_codebook() -> Tensor {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]]).unwrap()
}

#[test]
fn nearest_tokens_examples() {
    let e = example_codebook();
    let z = Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap();
    let top = nearest_tokens(&z, &e, 2).unwrap();
    assert_eq!(top[0].len(), 2);
    assert_eq!(top[0][0].0, 0);
    assert_eq!(top[0][1].0, 2);
    assert!((top[0][0].1 - 0.9939).abs() < 1e-4);
    assert!((top[0][1].1 - 0.7809).abs() < 1e-4);

    let table = Tensor::randn(&[9, 5], 1.0, &mut seeded(1));
    let frames = Tensor::from_rows(&[table.row(6).to_vec()]).unwrap();
    let all = nearest_tokens(&frames, &table, 9).unwrap();
    assert_eq!(all[0][0].0, 6);
    assert!((all[0][0].1 - 1.0).abs() < 1e-12);
    assert_eq!(all[0].len(), 9);
    assert!(all[0].windows(2).all(|w| w[0].1 >= w[1].1));

    let zero = Tensor::zeros(&[1, 5]);
    assert!(nearest_tokens(&zero, &table, 1).is_err());
}

#[test]
fn nearest_tokens_breaks_ties_by_id() {
    let table = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let z = Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap();
    let top = nearest_tokens(&z, &table, 2).unwrap();
    assert_eq!(top[0].iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 2]);
}

fn pairwise(t: &Tensor) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..t.rows() {
        for j in i + 1..t.rows() {
            let d: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            out.push(d.sqrt());
        }
    }
    out
}

#[test]
fn projection_of_centered_2d_points_preserves_distances() {
    let mut pts = Tensor::randn(&[7, 2], 1.0, &mut seeded(3));
    let n = pts.rows() as f64;
    for c in 0..2 {
        let mean: f64 = (0..pts.rows()).map(|r| pts.get2(r, c)).sum::<f64>() / n;
        for r in 0..pts.rows() {
            pts.row_mut(r)[c] -= mean;
        }
    }
    let out = project_2d(&pts).unwrap();
    for (a, b) in pairwise(&pts).iter().zip(pairwise(&out)) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(out.bit_eq(&project_2d(&pts).unwrap()));
}

#[test]
fn collinear_points_have_zero_second_coordinate() {
    let dir = [0.3, -1.2, 0.5];
    let base = [1.0, 2.0, -0.5];
    let rows: Vec<Vec<f64>> = [-1.5, 0.2, 2.0]
        .iter()
        .map(|t| base.iter().zip(dir).map(|(b, d)| b + t * d).collect())
        .collect();
    let out = project_2d(&Tensor::from_rows(&rows).unwrap()).unwrap();
    // Residual variance off the line is zero, so the second axis carries nothing.
    for r in 0..3 {
        assert!(out.get2(r, 1).abs() < 1e-9, "{:?}", out.row(r));
    }
    assert!(project_2d(&Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap()).is_err());
    assert!(project_2d(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).is_err());
}

#[test]
fn codebook_stats_examples() {
    let mut collapse = Tensor::zeros(&[6, 4]);
    for r in 0..6 {
        collapse.row_mut(r)[2] = 1.0;
    }
    let s = codebook_stats([&collapse]).unwrap();
    assert_eq!(s.entropy, 0.0);
    assert_eq!(s.histogram.iter().sum::<f64>(), 6.0);

    let uniform = Tensor::eye(8);
    let s = codebook_stats([&uniform, &uniform]).unwrap();
    assert!((s.entropy - 8f64.ln()).abs() < 1e-12);
    assert_eq!(s.frames, 16);
}

fn tiny_model(seed: u64) -> AsrModel {
    let config = ModelConfig {
        vocab: 12,
        dim: 12,
        feat_in: 4,
        feat_enc: 4,
        projector_hidden: 16,
        layers: 1,
        heads: 2,
        ffn: 16,
        max_positions: 64,
        lora_rank: 2,
    };
    let mut m = AsrModel::new(config, seed).unwrap();
    m.prepare_asr(seed).unwrap();
    m
}

fn utterances(n: usize) -> Vec<Utterance> {
    let mut rng = seeded(5);
    (0..n)
        .map(|i| Utterance {
            id: format!("u{i}"),
            split: Split::TestId,
            tokens: vec![4 + i % 8, 5, 6],
            frames: Tensor::randn(&[6 + i, 4], 1.0, &mut rng),
        })
        .collect()
}

#[test]
fn beam_one_equals_greedy_and_wider_beams_dominate() {
    let m = tiny_model(2);
    let cfg = QuantizerConfig {
        mode: QuantMode::Soft,
        k: TopK::K(3),
        ..QuantizerConfig::default()
    };
    for u in utterances(6) {
        let g = greedy(&m, &u.frames, &cfg, 6).unwrap();
        let b1 = beam_search(&m, &u.frames, &cfg, 1, 6).unwrap();
        assert_eq!(g, b1);
        assert_eq!(g.log_prob.to_bits(), b1.log_prob.to_bits());
        let b4 = beam_search(&m, &u.frames, &cfg, 4, 6).unwrap();
        assert!(b4.log_prob >= g.log_prob, "{b4:?} vs {g:?}");
        assert_eq!(b4, beam_search(&m, &u.frames, &cfg, 4, 6).unwrap());
    }
}

#[test]
fn length_cap_flags_unterminated_hypotheses() {
    let m = tiny_model(3);
    let u = &utterances(1)[0];
    let h = greedy(&m, &u.frames, &QuantizerConfig::default(), 1).unwrap();
    if h.terminated {
        assert!(h.tokens.is_empty());
    } else {
        assert_eq!(h.tokens.len(), 1);
    }
    assert!(decode(&m, &u.frames, &QuantizerConfig::default(), &DecodeConfig { beam: 0, max_len: 3 }).is_err());
}

#[test]
fn nearest_token_on_hard_embeddings_recovers_indices() {
    let m = tiny_model(4);
    let cfg = QuantizerConfig {
        mode: QuantMode::Hard,
        ..QuantizerConfig::default()
    };
    for u in utterances(5) {
        let q = m.quantized_audio(&u.frames, &cfg).unwrap();
        let top = nearest_tokens(&q.embeddings, m.store.value(m.codebook), 1).unwrap();
        let got: Vec<usize> = top.iter().map(|r| r[0].0).collect();
        assert_eq!(&got, q.indices.as_ref().unwrap());
    }
}

#[test]
fn evaluation_aggregates_edits() {
    let m = tiny_model(5);
    let utts = utterances(4);
    let refs: Vec<&Utterance> = utts.iter().collect();
    let cfg = QuantizerConfig::default();
    let greedy_eval = evaluate(&m, &refs, &cfg, &DecodeConfig { beam: 1, max_len: 5 }, Exec::Sequential).unwrap();
    let par = evaluate(&m, &refs, &cfg, &DecodeConfig { beam: 1, max_len: 5 }, Exec::default()).unwrap();
    assert_eq!(greedy_eval, par);
    assert_eq!(greedy_eval.reference_tokens, 12);
    let sum: usize = greedy_eval.utterances.iter().map(|u| u.edits).sum();
    assert_eq!(sum, greedy_eval.edits);

    let means = utterance_means(&m, &refs, &cfg, Exec::Sequential).unwrap();
    let gap = modality_gap(&means).unwrap();
    assert!((0.0..=2.0).contains(&gap));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wer_is_a_bounded_metric(a in prop::collection::vec(0usize..4, 1..8), b in prop::collection::vec(0usize..4, 0..8)) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, edit_distance(&b, &a));
        prop_assert!(d <= a.len().max(b.len()));
        prop_assert!(d >= a.len().abs_diff(b.len()));
        prop_assert_eq!(edit_distance(&a, &a), 0);
    }
}
