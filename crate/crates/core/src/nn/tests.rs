use std::sync::Arc;

use super::*;
use crate::autograd::{grad_check, Tape, Tensor};
use crate::rng::seeded;

#[test]
fn fresh_lora_adapter_leaves_base_output_unchanged() {
    let mut rng = seeded(1);
    let mut store = ParamStore::new();
    let base = Linear::new(&mut store, "l", 6, 5, &mut rng);
    let adapter = LoraAdapter::new(&mut store, "l", 6, 5, 2, &mut rng).unwrap();
    let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
    let tape = Tape::new();
    let b = Binder::new(&tape, &store);
    let xv = tape.constant(x);
    let plain = base.forward(&b, xv).unwrap().value();
    let adapted = lora_linear_forward(&b, xv, &base, Some(&adapter)).unwrap().value();
    assert!(plain.bit_eq(&adapted));
}

#[test]
fn lora_rank_must_be_below_layer_dims() {
    let mut rng = seeded(1);
    let mut store = ParamStore::new();
    assert!(LoraAdapter::new(&mut store, "a", 4, 6, 4, &mut rng).is_err());
    assert!(LoraAdapter::new(&mut store, "b", 4, 6, 0, &mut rng).is_err());
    assert!(LoraAdapter::new(&mut store, "c", 4, 6, 3, &mut rng).is_ok());
}

#[test]
fn identity_adapter_adds_the_input() {
    let mut rng = seeded(2);
    let mut store = ParamStore::new();
    let base = Linear::new(&mut store, "l", 4, 4, &mut rng);
    let adapter = LoraAdapter::from_parts(&mut store, "l", Tensor::eye(4), Tensor::eye(4), 1.0).unwrap();
    let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let tape = Tape::new();
    let b = Binder::new(&tape, &store);
    let xv = tape.constant(x.clone());
    let plain = base.forward(&b, xv).unwrap().value();
    let adapted = lora_linear_forward(&b, xv, &base, Some(&adapter)).unwrap().value();
    for i in 0..8 {
        assert!((adapted.data()[i] - plain.data()[i] - x.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn frozen_base_is_bit_identical_after_a_step() {
    let mut rng = seeded(3);
    let mut store = ParamStore::new();
    let base = Linear::new(&mut store, "l", 4, 4, &mut rng);
    let adapter = LoraAdapter::new(&mut store, "l", 4, 4, 2, &mut rng).unwrap();
    for id in base.params() {
        store.set_trainable(id, false);
    }
    let before = store.value(base.weight).clone();
    let up_before = store.value(adapter.up).clone();
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let grads = {
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let y = lora_linear_forward(&b, tape.constant(x), &base, Some(&adapter)).unwrap();
        let loss = y.mul(y).unwrap().sum_all().unwrap();
        b.collect(tape.backward(loss).unwrap())
    };
    assert!(grads[base.weight.index()].is_none());
    let mut adam = Adam::new(1e-2, 0);
    adam.update(&mut store, &grads).unwrap();
    assert!(store.value(base.weight).bit_eq(&before));
    assert!(!store.value(adapter.up).bit_eq(&up_before));
}

fn attention_fixture(t: usize) -> (ParamStore, CausalSelfAttention, Tensor) {
    let mut rng = seeded(4);
    let mut store = ParamStore::new();
    let attn = CausalSelfAttention::new(&mut store, "attn", 8, 2, &mut rng).unwrap();
    let x = Tensor::randn(&[t, 8], 1.0, &mut rng);
    (store, attn, x)
}

#[test]
fn attention_is_causal() {
    let (store, attn, x) = attention_fixture(5);
    let run = |input: Tensor| {
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let out = attn.forward(&b, tape.constant(input)).unwrap().value();
        (*out).clone()
    };
    let base = run(x.clone());
    for t in 0..4 {
        let mut perturbed = x.clone();
        for v in perturbed.row_mut(t + 1) {
            *v += 3.7;
        }
        let out = run(perturbed);
        for r in 0..=t {
            assert!(out.row(r).iter().zip(base.row(r)).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(out.row(t + 1) != base.row(t + 1));
    }
}

#[test]
fn single_position_attends_to_itself() {
    let (store, attn, x) = attention_fixture(1);
    let tape = Tape::new();
    let b = Binder::new(&tape, &store);
    let (_, weights) = attn.forward_with_weights(&b, tape.constant(x)).unwrap();
    for w in weights {
        assert_eq!(w.data(), &[1.0]);
    }
}

#[test]
fn attention_rejects_indivisible_heads() {
    let mut store = ParamStore::new();
    assert!(CausalSelfAttention::new(&mut store, "a", 10, 4, &mut seeded(0)).is_err());
}

#[test]
fn attention_passes_grad_check() {
    let (store, attn, x) = attention_fixture(4);
    let w = Arc::new(Tensor::randn(&[4, 8], 1.0, &mut seeded(7)));
    let report = grad_check(
        |xv| {
            let b = Binder::new(xv.tape(), &store);
            let y = attn.forward(&b, xv).map_err(|e| match e {
                crate::Error::Autograd(a) => a,
                other => panic!("{other}"),
            })?;
            y.mul_const(Arc::clone(&w))?.sum_all()
        },
        &x,
        1e-6,
        1e-4,
    );
    assert!(report.passed, "{report:?}");
}

#[test]
fn cross_entropy_examples() {
    let tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[3, 7]));
    let loss = cross_entropy(uniform, &[0, 3, 6], &[1.0, 1.0, 1.0]).unwrap();
    assert!((loss.item() - (7f64).ln()).abs() < 1e-12);

    let logits = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
    let loss = cross_entropy(logits, &[2], &[1.0]).unwrap().item();
    let oracle = (1.0 + (-1f64).exp() + (-2f64).exp()).ln();
    assert!((loss - oracle).abs() < 1e-14);
    assert!((loss - 0.4076).abs() < 1e-4);

    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let logits = tape.constant(Tensor::from_rows(&[vec![margin, 0.0, 0.0]]).unwrap());
        let l = cross_entropy(logits, &[0], &[1.0]).unwrap().item();
        assert!(l >= 0.0 && l < last);
        last = l;
    }
    assert!(last < 1e-20);
}

#[test]
fn cross_entropy_ignores_masked_positions_and_rejects_empty_mask() {
    let tape = Tape::new();
    let logits = tape.constant(Tensor::from_rows(&[vec![5.0, 0.0], vec![0.0, 0.0]]).unwrap());
    let l = cross_entropy(logits, &[1, 0], &[0.0, 1.0]).unwrap().item();
    assert!((l - 2f64.ln()).abs() < 1e-12);
    assert!(cross_entropy(logits, &[1, 0], &[0.0, 0.0]).is_err());
    assert!(cross_entropy(logits, &[2, 0], &[1.0, 1.0]).is_err());
}

#[test]
fn lr_schedule_examples() {
    assert_eq!(lr_at(0, 1e-3, 100), 0.0);
    assert_eq!(lr_at(100, 1e-3, 100), 1e-3);
    assert_eq!(lr_at(50, 1e-3, 100), 5e-4);
    assert_eq!(lr_at(5000, 1e-3, 100), 1e-3);
    let mut prev = 0.0;
    for s in 0..300 {
        let lr = lr_at(s, 2e-4, 120);
        assert!(lr >= prev);
        prev = lr;
    }
}

fn single_param_store(value: Tensor) -> (ParamStore, ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("p", value, true);
    (store, id)
}

#[test]
fn adam_zero_gradient_leaves_parameters_unchanged() {
    let (mut store, id) = single_param_store(Tensor::vector(vec![0.5, -1.0]));
    let before = store.value(id).clone();
    let mut adam = Adam::new(1e-3, 0);
    adam.update(&mut store, &vec![Some(Tensor::zeros(&[2]))]).unwrap();
    assert!(store.value(id).bit_eq(&before));
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    let (mut store, id) = single_param_store(Tensor::vector(vec![0.5, -1.0, 2.0]));
    let mut adam = Adam::new(1e-3, 0);
    let g = Tensor::vector(vec![0.3, -4.0, 1e-3]);
    adam.update(&mut store, &vec![Some(g.clone())]).unwrap();
    for ((p, p0), gi) in store.value(id).data().iter().zip([0.5, -1.0, 2.0]).zip(g.data()) {
        let closed_form = -1e-3 * gi / (gi.abs() + 1e-8);
        assert!(((p - p0) - closed_form).abs() < 1e-15);
        assert!(((p - p0) + 1e-3 * gi.signum()).abs() < 1e-7);
    }
}

#[test]
fn adam_skips_frozen_groups_and_rejects_nan() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::vector(vec![1.0]), true);
    let b = store.add("b", Tensor::vector(vec![1.0]), false);
    let mut adam = Adam::new(1e-2, 0);
    let grads = vec![Some(Tensor::vector(vec![1.0])), Some(Tensor::vector(vec![1.0]))];
    adam.update(&mut store, &grads).unwrap();
    assert_eq!(store.value(b).data(), &[1.0]);
    assert!(store.value(a).data()[0] < 1.0);
    let bad = vec![Some(Tensor::vector(vec![f64::NAN])), None];
    let err = adam.update(&mut store, &bad).unwrap_err().to_string();
    assert!(err.contains("parameter a"), "{err}");
}

#[test]
fn reduce_grads_sums_in_order() {
    let parts = vec![
        vec![Some(Tensor::vector(vec![1.0])), None],
        vec![Some(Tensor::vector(vec![2.0])), Some(Tensor::vector(vec![4.0]))],
    ];
    let r = reduce_grads(parts, 0.5);
    assert_eq!(r[0].as_ref().unwrap().data(), &[1.5]);
    assert_eq!(r[1].as_ref().unwrap().data(), &[2.0]);
}
