use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::autograd::{Tape, Tensor};

fn example_codebook() -> Tensor {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]]).unwrap()
}

/// Direct cosine similarity, no shared code with the implementation.
fn oracle_sim(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn oracle_distribution(z: &[f64], e: &Tensor, tau: f64) -> Vec<f64> {
    let exps: Vec<f64> = (0..e.rows())
        .map(|j| (oracle_sim(z, e.row(j)) / tau).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|x| x / total).collect()
}

fn oracle_soft(z: &[f64], e: &Tensor, tau: f64) -> Vec<f64> {
    let a = oracle_distribution(z, e, tau);
    let mut out = vec![0.0; e.cols()];
    for (j, w) in a.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(e.row(j)) {
            *o += w * x;
        }
    }
    out
}

fn oracle_argmax(z: &[f64], e: &Tensor) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for j in 0..e.rows() {
        let s = oracle_sim(z, e.row(j));
        if s > best_sim {
            best = j;
            best_sim = s;
        }
    }
    best
}

fn soft_cfg(k: TopK, renormalize: bool, trainable: bool) -> QuantizerConfig {
    QuantizerConfig {
        mode: QuantMode::Soft,
        k,
        renormalize_topk: renormalize,
        temperature: 1.0,
        codebook_trainable: trainable,
    }
}

#[test]
fn distribution_matches_worked_example() {
    let e = example_codebook();
    let z = Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap();
    let sims = cosine_similarity_values(&z, &e).unwrap();
    for (got, want) in sims.data().iter().zip([0.9939, 0.1104, 0.7809]) {
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }
    let a = similarity_distribution_values(&z, &e, 1.0).unwrap();
    let oracle = oracle_distribution(&[0.9, 0.1], &e, 1.0);
    // Values from direct evaluation of the softmax over the three similarities.
    for ((got, want), frozen) in a.data().iter().zip(&oracle).zip([0.45015, 0.18607, 0.36378]) {
        assert!((got - want).abs() < 1e-12);
        assert!((got - frozen).abs() < 1e-5);
    }
}

#[test]
fn equal_similarities_give_uniform_row() {
    let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    let z = Tensor::from_rows(&[vec![0.0, 3.0]]).unwrap();
    let a = similarity_distribution_values(&z, &e, 1.0).unwrap();
    assert_eq!(a.data(), &[0.5, 0.5]);
}

#[test]
fn zero_norm_rows_are_rejected_with_index() {
    let e = example_codebook();
    let z = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
    let err = similarity_distribution_values(&z, &e, 1.0).unwrap_err();
    assert!(err.to_string().contains("row 1"), "{err}");
    let bad_e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let z = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
    let err = similarity_distribution_values(&z, &bad_e, 1.0).unwrap_err();
    assert!(err.to_string().contains("codebook"), "{err}");
}

#[test]
fn hard_stage1_self_match_and_worked_example() {
    let tape = Tape::new();
    let e = Tensor::randn(&[8, 4], 1.0, &mut crate::rng::seeded(3));
    let z = tape.leaf(Tensor::new(&[1, 4], e.row(5).to_vec()).unwrap(), true);
    let out = hard_quantize_stage1(z, &e).unwrap();
    assert_eq!(out.indices.as_deref(), Some(&[5][..]));
    assert!(out.embeddings.value().data() == e.row(5));

    let e = example_codebook();
    let z = tape.leaf(Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap(), true);
    let out = hard_quantize_stage1(z, &e).unwrap();
    assert_eq!(out.indices.as_deref(), Some(&[0][..]));
    assert_eq!(out.embeddings.value().data(), &[1.0, 0.0]);
}

#[test]
fn hard_stage1_usage_rows_are_one_hot() {
    let tape = Tape::new();
    let e = example_codebook();
    let z = tape.leaf(Tensor::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap(), false);
    let out = hard_quantize_stage1(z, &e).unwrap();
    let usage = out.usage_rows().expect("hard mode reports usage");
    assert_eq!(usage.shape(), &[2, e.rows()]);
    for (r, &i) in out.indices.as_ref().unwrap().iter().enumerate() {
        assert_eq!(usage.row(r).iter().sum::<f64>(), 1.0);
        assert_eq!(usage.get2(r, i), 1.0);
    }
}

#[test]
fn hard_stage1_ties_pick_lowest_index() {
    let e = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let tape = Tape::new();
    let z = tape.leaf(Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap(), false);
    let out = hard_quantize_stage1(z, &e).unwrap();
    assert_eq!(out.indices.unwrap(), vec![1]);
}

#[test]
fn hard_stage1_straight_through_is_exact() {
    let mut rng = crate::rng::seeded(11);
    let e_val = Tensor::randn(&[6, 3], 1.0, &mut rng);
    let z_val = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let upstream = Arc::new(Tensor::randn(&[4, 3], 1.0, &mut rng));
    let tape = Tape::new();
    let z = tape.leaf(z_val, true);
    let e = tape.leaf(e_val.clone(), true);
    let out = quantize(z, e.stop_gradient(), &QuantizerConfig { mode: QuantMode::Hard, ..Default::default() }, Stage::One).unwrap();
    let loss = out.embeddings.mul_const(Arc::clone(&upstream)).unwrap().sum_all().unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(z).unwrap().bit_eq(&upstream));
    assert!(grads.get(e).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn hard_stage1_rejects_trainable_codebook() {
    let tape = Tape::new();
    let z = tape.leaf(Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap(), true);
    let e = tape.leaf(example_codebook(), true);
    let cfg = QuantizerConfig { mode: QuantMode::Hard, ..Default::default() };
    assert!(quantize(z, e, &cfg, Stage::One).is_err());
}

#[test]
fn topk_examples() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[vec![0.5, 0.3, 0.2]]).unwrap(), true);
    let plain = topk_mask(a, TopK::K(1), false).unwrap();
    assert_eq!(plain.value().data(), &[0.5, 0.0, 0.0]);
    let renorm = topk_mask(a, TopK::K(1), true).unwrap();
    assert_eq!(renorm.value().data(), &[1.0, 0.0, 0.0]);
    for flag in [false, true] {
        let full = topk_mask(a, TopK::K(3), flag).unwrap();
        assert!(full.value().bit_eq(&a.value()));
    }
    assert!(topk_mask(a, TopK::K(0), false).is_err());
    assert!(topk_mask(a, TopK::K(4), false).is_err());
}

#[test]
fn topk_zeroes_gradient_of_dropped_entries() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::from_rows(&[vec![0.1, 0.5, 0.3, 0.1]]).unwrap(), true);
    for renormalize in [false, true] {
        let kept = topk_mask(a, TopK::K(2), renormalize).unwrap();
        let w = Arc::new(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap());
        let loss = kept.mul_const(w).unwrap().sum_all().unwrap();
        let g = tape.backward(loss).unwrap();
        let g = g.get(a).unwrap().data().to_vec();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[3], 0.0);
        assert!(g[1] != 0.0 && g[2] != 0.0);
    }
}

#[test]
fn topk_ties_break_to_lowest_index() {
    let a = Tensor::from_rows(&[vec![0.2, 0.4, 0.4]]).unwrap();
    let (mask, _) = top_k_mask(&a, 1).unwrap();
    assert_eq!(mask.data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn soft_uniform_weights_average_the_codebook() {
    let e = example_codebook();
    let tape = Tape::new();
    let z = tape.leaf(Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap(), false);
    let ev = tape.leaf(e, false);
    let cfg = QuantizerConfig { temperature: 1e12, ..soft_cfg(TopK::All, false, false) };
    let out = soft_quantize(z, ev, &cfg).unwrap();
    let zt = out.embeddings.value();
    for x in zt.data() {
        assert!((x - 0.5690).abs() < 1e-4, "{x}");
    }
    let want = (1.0 + std::f64::consts::FRAC_1_SQRT_2) / 3.0;
    assert!((zt.data()[0] - want).abs() < 1e-9);
}

#[test]
fn soft_top1_renormalized_is_hard_selection() {
    let mut rng = crate::rng::seeded(5);
    let e_val = Tensor::randn(&[12, 5], 1.0, &mut rng);
    let z_val = Tensor::randn(&[7, 5], 1.0, &mut rng);
    let tape = Tape::new();
    let z = tape.leaf(z_val, true);
    let e = tape.leaf(e_val.clone(), false);
    let soft = soft_quantize(z, e, &soft_cfg(TopK::K(1), true, false)).unwrap();
    let hard = hard_quantize_stage1(z, &e_val).unwrap();
    assert!(soft.embeddings.value().bit_eq(&hard.embeddings.value()));
}

#[test]
fn soft_frozen_codebook_gets_no_gradient() {
    let mut rng = crate::rng::seeded(8);
    let tape = Tape::new();
    let z = tape.leaf(Tensor::randn(&[3, 4], 1.0, &mut rng), true);
    let e = tape.leaf(Tensor::randn(&[6, 4], 1.0, &mut rng), false);
    let out = soft_quantize(z, e, &soft_cfg(TopK::K(3), false, false)).unwrap();
    let loss = out.embeddings.sum_all().unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(e).is_none());
    assert!(grads.get(z).unwrap().data().iter().any(|&g| g != 0.0));
}

#[test]
fn soft_topk_codebook_gradient_is_confined_to_selected_rows() {
    let mut rng = crate::rng::seeded(21);
    let tape = Tape::new();
    let z = tape.leaf(Tensor::randn(&[2, 4], 1.0, &mut rng), true);
    let e = tape.leaf(Tensor::randn(&[16, 4], 1.0, &mut rng), true);
    let out = soft_quantize(z, e, &soft_cfg(TopK::K(3), false, true)).unwrap();
    let w = Arc::new(Tensor::randn(&[2, 4], 1.0, &mut rng));
    let loss = out.embeddings.mul_const(w).unwrap().sum_all().unwrap();
    let grads = tape.backward(loss).unwrap();
    let ge = grads.get(e).unwrap();
    let touched = (0..16)
        .filter(|&j| ge.row(j).iter().any(|&g| g != 0.0))
        .count();
    assert!(touched <= 6, "{touched} rows touched");
    let weights = out.weights.unwrap().value();
    for j in 0..16 {
        let used = (0..2).any(|t| weights.get2(t, j) != 0.0);
        if !used {
            assert!(ge.row(j).iter().all(|&g| g == 0.0));
        }
    }
}

#[test]
fn hard_stage2_matches_stage1_forward() {
    let mut rng = crate::rng::seeded(13);
    let e_val = Tensor::randn(&[10, 4], 1.0, &mut rng);
    let z_val = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let tape = Tape::new();
    let z = tape.leaf(z_val, true);
    let e = tape.leaf(e_val.clone(), true);
    let cfg = QuantizerConfig { mode: QuantMode::Hard, k: TopK::K(3), codebook_trainable: true, ..Default::default() };
    let two = hard_quantize_stage2(z, e, &cfg).unwrap();
    let one = hard_quantize_stage1(z, &e_val).unwrap();
    assert_eq!(two.indices, one.indices);
    assert!(two.embeddings.value().bit_eq(&one.embeddings.value()));
}

#[test]
fn hard_stage2_one_hot_of_example_distribution() {
    assert_eq!(argmax(&[0.2, 0.7, 0.1]), 1);
    // z pointing at e₂ gives a distribution whose argmax is entry 1.
    let tape = Tape::new();
    let z = tape.leaf(Tensor::from_rows(&[vec![0.05, 1.0]]).unwrap(), true);
    let e = tape.leaf(example_codebook(), true);
    let cfg = QuantizerConfig { mode: QuantMode::Hard, k: TopK::All, codebook_trainable: true, ..Default::default() };
    let out = hard_quantize_stage2(z, e, &cfg).unwrap();
    assert_eq!(out.indices.unwrap(), vec![1]);
    assert_eq!(out.embeddings.value().data(), &[0.0, 1.0]);
}

#[test]
fn hard_stage2_distribution_gradient_matches_manual_chain_rule() {
    let e_val = example_codebook();
    let g = Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap();
    let tape = Tape::new();
    let z = tape.leaf(Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap(), true);
    let e = tape.leaf(e_val.clone(), true);
    let cfg = QuantizerConfig { mode: QuantMode::Hard, k: TopK::All, codebook_trainable: true, ..Default::default() };
    let out = hard_quantize_stage2(z, e, &cfg).unwrap();
    let a = out.distribution.unwrap();
    // Route the loss through a probe on A so its gradient can be read back.
    let loss = out.embeddings.mul_const(Arc::new(g.clone())).unwrap().sum_all().unwrap();
    let grads = tape.backward(loss).unwrap();

    // Manual chain rule with Ã = one-hot: dL/dÃ_j = g·e_j; STE passes it to A.
    let d_a: Vec<f64> = (0..3).map(|j| g.row(0).iter().zip(e_val.row(j)).map(|(x, y)| x * y).sum()).collect();
    // Softmax Jacobian over τ=1 sims, then cosine Jacobian to z.
    let av = a.value();
    let av = av.row(0);
    let dot: f64 = d_a.iter().zip(av).map(|(x, y)| x * y).sum();
    let d_sim: Vec<f64> = (0..3).map(|j| av[j] * (d_a[j] - dot)).collect();
    let zv = [0.9, 0.1];
    let nz = (0.82f64).sqrt();
    let mut dz = [0.0; 2];
    for j in 0..3 {
        let ej = e_val.row(j);
        let ne = (ej[0] * ej[0] + ej[1] * ej[1]).sqrt();
        let s = oracle_sim(&zv, ej);
        for d in 0..2 {
            dz[d] += d_sim[j] * (ej[d] / (nz * ne) - s * zv[d] / (nz * nz));
        }
    }
    let gz = grads.get(z).unwrap();
    for d in 0..2 {
        assert!((gz.data()[d] - dz[d]).abs() < 1e-12, "{:?} vs {dz:?}", gz.data());
    }
    // Codebook: the selected row gets g directly, plus the similarity path.
    let ge = grads.get(e).unwrap();
    let mut de0 = [g.data()[0], g.data()[1]];
    let e0 = e_val.row(0);
    let s0 = oracle_sim(&zv, e0);
    for d in 0..2 {
        de0[d] += d_sim[0] * (zv[d] / nz - s0 * e0[d]);
    }
    for d in 0..2 {
        assert!((ge.row(0)[d] - de0[d]).abs() < 1e-12);
    }
}

#[test]
fn quantize_off_is_identity() {
    let tape = Tape::new();
    let z = tape.leaf(Tensor::from_rows(&[vec![0.9, 0.1]]).unwrap(), true);
    let e = tape.leaf(example_codebook(), false);
    let out = quantize(z, e, &QuantizerConfig::default(), Stage::One).unwrap();
    assert_eq!(out.embeddings.id, z.id);
}

#[test]
fn config_validation() {
    let mut cfg = soft_cfg(TopK::K(65), false, true);
    assert!(cfg.validate(64).is_err());
    cfg.k = TopK::K(64);
    assert!(cfg.validate(64).is_ok());
    cfg.temperature = 0.0;
    assert!(cfg.validate(64).is_err());
    assert_eq!("all".parse::<TopK>().unwrap(), TopK::All);
    assert_eq!("10".parse::<TopK>().unwrap(), TopK::K(10));
    assert!("ten".parse::<TopK>().is_err());
    assert!("medium".parse::<QuantMode>().is_err());
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
        .prop_filter("no tiny rows", move |v| {
            v.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        })
        .prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_are_stochastic_and_scale_invariant(z in matrix(3, 4), e in matrix(9, 4), alpha in 0.01f64..100.0) {
        let a = similarity_distribution_values(&z, &e, 1.0).unwrap();
        for r in 0..3 {
            prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let scaled = z.map(|x| x * alpha);
        let b = similarity_distribution_values(&scaled, &e, 1.0).unwrap();
        for r in 0..3 {
            prop_assert_eq!(argmax(a.row(r)), argmax(b.row(r)));
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_matches_brute_force(z in matrix(2, 3), e in matrix(7, 3), tau in 0.2f64..2.0) {
        let tape = Tape::new();
        let zv = tape.leaf(z.clone(), false);
        let ev = tape.leaf(e.clone(), false);
        let cfg = QuantizerConfig { temperature: tau, ..soft_cfg(TopK::All, false, false) };
        let out = soft_quantize(zv, ev, &cfg).unwrap().embeddings.value();
        for r in 0..2 {
            let want = oracle_soft(z.row(r), &e, tau);
            for (x, y) in out.row(r).iter().zip(&want) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hard_output_is_a_codebook_row(z in matrix(4, 3), e in matrix(8, 3)) {
        let tape = Tape::new();
        let zv = tape.leaf(z.clone(), true);
        let out = hard_quantize_stage1(zv, &e).unwrap();
        let emb = out.embeddings.value();
        for (r, &i) in out.indices.as_ref().unwrap().iter().enumerate() {
            prop_assert_eq!(i, oracle_argmax(z.row(r), &e));
            prop_assert!(emb.row(r).iter().zip(e.row(i)).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn soft_topk_is_convex_combination(z in matrix(3, 3), e in matrix(8, 3), k in 1usize..=8) {
        let tape = Tape::new();
        let zv = tape.leaf(z, false);
        let ev = tape.leaf(e, false);
        for renormalize in [true, false] {
            let out = soft_quantize(zv, ev, &soft_cfg(TopK::K(k), renormalize, false)).unwrap();
            let w = out.weights.unwrap().value();
            for r in 0..3 {
                let row = w.row(r);
                let nonzero = row.iter().filter(|&&x| x != 0.0).count();
                prop_assert_eq!(nonzero, k);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                let s: f64 = row.iter().sum();
                if renormalize {
                    prop_assert!((s - 1.0).abs() < 1e-9);
                } else {
                    prop_assert!(s <= 1.0 + 1e-12);
                }
            }
        }
    }
}
