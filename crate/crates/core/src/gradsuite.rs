//! Finite-difference checks of every differentiable building block.
//!
//! Each case reduces its output to a scalar through a fixed random weighting,
//! so every output coordinate contributes to the checked gradient.

use std::sync::Arc;

use serde::Serialize;

use crate::autograd::{grad_check, AutogradError, Tape, Tensor, Var};
use crate::error::Error;
use crate::model::{DecoderBlock, DecoderLM, ModelConfig};
use crate::nn::{cross_entropy, Binder, CausalSelfAttention, FeedForward, LoraAdapter, ParamId, ParamStore};
use crate::parallel::{map, Exec};
use crate::quantizer::{
    hard_quantize_stage2, similarity_distribution, soft_quantize, topk_mask, QuantMode, QuantizerConfig, TopK,
};
use crate::rng::{derived, seeded};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub kink_distance: f64,
    pub passed: bool,
    pub failure: Option<String>,
}

type LossFn = Box<dyn for<'t> Fn(Var<'t>) -> Result<Var<'t>, AutogradError> + Send + Sync>;

enum Check {
    /// Analytic and numeric gradient of the same function.
    Plain(LossFn),
    /// Analytic gradient of the first function against central differences
    /// of the second (a straight-through rule against its surrogate).
    Surrogate(LossFn, LossFn),
}

struct Case {
    name: String,
    point: Tensor,
    check: Check,
}

fn lift(e: Error) -> AutogradError {
    match e {
        Error::Autograd(a) => a,
        other => AutogradError::InvalidShape {
            op: "module",
            detail: other.to_string(),
        },
    }
}

/// Weighted sum of all entries with weights fixed by the output shape.
fn probe(y: Var<'_>) -> Result<Var<'_>, AutogradError> {
    let shape = y.shape();
    let seed = shape.iter().fold(17u64, |h, &d| h.wrapping_mul(31).wrapping_add(d as u64));
    let w = Tensor::randn(&shape, 1.0, &mut seeded(seed));
    y.mul_const(Arc::new(w))?.sum_all()
}

fn away_from_zero(t: Tensor, margin: f64) -> Tensor {
    t.map(|x| if x >= 0.0 { x + margin } else { x - margin })
}

/// Closure that sees `other` as a constant on the checked variable's tape.
fn with(
    other: &Tensor,
    f: impl for<'t> Fn(Var<'t>, Var<'t>) -> Result<Var<'t>, AutogradError> + Send + Sync + 'static,
) -> impl for<'t> Fn(Var<'t>) -> Result<Var<'t>, AutogradError> + Send + Sync + 'static {
    let other = other.clone();
    move |x| f(x, x.tape().constant(other.clone()))
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn run(case: &Case) -> CheckOutcome {
    let outcome = |max_rel_error, kink_distance, passed, failure| CheckOutcome {
        name: case.name.clone(),
        max_rel_error,
        kink_distance,
        passed,
        failure,
    };
    match &case.check {
        Check::Plain(f) => {
            let r = grad_check(f, &case.point, STEP, TOLERANCE);
            outcome(r.max_rel_error, r.kink_distance, r.passed, r.failure)
        }
        Check::Surrogate(rule, surrogate) => {
            let tape = Tape::new();
            let x = tape.leaf(case.point.clone(), true);
            let analytic = match rule(x).and_then(|l| tape.backward(l)) {
                Ok(g) => g.get(x).cloned().expect("leaf gradient"),
                Err(e) => return outcome(f64::INFINITY, 0.0, false, Some(e.to_string())),
            };
            let kink = tape.kink_distance();
            let r = grad_check(surrogate, &case.point, STEP, TOLERANCE);
            if let Some(f) = r.failure {
                return outcome(f64::INFINITY, kink, false, Some(f));
            }
            let worst = analytic
                .data()
                .iter()
                .zip(&r.numeric)
                .map(|(&a, &n)| rel_error(a, n))
                .fold(0.0, f64::max);
            outcome(worst, kink.min(r.kink_distance), worst < TOLERANCE, None)
        }
    }
}

fn plain(name: &str, point: Tensor, f: impl for<'t> Fn(Var<'t>) -> Result<Var<'t>, AutogradError> + Send + Sync + 'static) -> Case {
    Case {
        name: name.to_string(),
        point,
        check: Check::Plain(Box::new(f)),
    }
}

fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = derived(seed, "gradsuite-primitives");
    let mut randn = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let a = randn(&[3, 4]);
    let b = randn(&[3, 4]);
    let m = randn(&[4, 5]);
    let row = randn(&[4]);
    let col = randn(&[3]);
    let divisors = away_from_zero(randn(&[3]), 0.5);
    let positive = randn(&[3, 4]).map(|x| x.abs() + 0.5);
    let gamma = randn(&[4]);
    let beta = randn(&[4]);
    let codebook = randn(&[6, 4]);
    let mask = Arc::new(Tensor::from_rows(&[
        vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0],
        vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0],
        vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    ])
    .unwrap());

    vec![
        plain("add", a.clone(), with(&b, |x, o| probe(x.add(o)?))),
        plain("sub/rhs", b.clone(), with(&a, |x, o| probe(o.sub(x)?))),
        plain("mul/lhs", a.clone(), with(&b, |x, o| probe(x.mul(o)?))),
        plain("mul/self", a.clone(), |x| probe(x.mul(x)?)),
        plain("scale", a.clone(), |x| probe(x.scale(-1.7)?)),
        plain("add_row/matrix", a.clone(), with(&row, |x, o| probe(x.add_row(o)?))),
        plain("add_row/bias", row.clone(), with(&a, |x, o| probe(o.add_row(x)?))),
        plain("mul_col/matrix", a.clone(), with(&col, |x, o| probe(x.mul_col(o)?))),
        plain("mul_col/scales", col.clone(), with(&a, |x, o| probe(o.mul_col(x)?))),
        plain("div_col/matrix", a.clone(), with(&divisors, |x, o| probe(x.div_col(o)?))),
        plain("div_col/divisors", divisors.clone(), with(&a, |x, o| probe(o.div_col(x)?))),
        plain("mul_const", a.clone(), {
            let c = Arc::new(b.clone());
            move |x| probe(x.mul_const(Arc::clone(&c))?)
        }),
        plain("add_const", a.clone(), {
            let c = b.clone();
            move |x| probe(x.add_const(&c)?)
        }),
        plain("matmul/lhs", a.clone(), with(&m, |x, o| probe(x.matmul(o)?))),
        plain("matmul/rhs", m.clone(), with(&a, |x, o| probe(o.matmul(x)?))),
        plain("matmul_t/lhs", a.clone(), with(&b, |x, o| probe(x.matmul_t(o)?))),
        plain("matmul_t/rhs", b.clone(), with(&m, |x, o| probe(o.transpose()?.matmul_t(x)?))),
        plain("transpose", a.clone(), |x| probe(x.transpose()?)),
        plain("reshape", a.clone(), |x| probe(x.reshape(&[2, 6])?)),
        plain("concat/rows", a.clone(), |x| probe(Var::concat(&[x, x.scale(2.0)?], 0)?)),
        plain("concat/cols", a.clone(), |x| probe(Var::concat(&[x.scale(0.5)?, x], 1)?)),
        plain("slice/rows", a.clone(), |x| probe(x.slice(0, 1, 2)?)),
        plain("slice/cols", a.clone(), |x| probe(x.slice(1, 1, 3)?)),
        plain("gather_rows", codebook.clone(), |x| probe(x.gather_rows(&[2, 0, 2, 5])?)),
        plain("select_per_row", a.clone(), |x| probe(x.select_per_row(&[3, 0, 3])?)),
        plain("sum_all", a.clone(), |x| x.sum_all()?.scale(1.3)),
        plain("mean_all", a.clone(), |x| x.mul(x)?.mean_all()),
        plain("sum_axis/0", a.clone(), |x| probe(x.sum_axis(0)?)),
        plain("sum_axis/1", a.clone(), |x| probe(x.sum_axis(1)?)),
        plain("mean_axis/0", a.clone(), |x| probe(x.mean_axis(0)?)),
        plain("mean_axis/1", a.clone(), |x| probe(x.mean_axis(1)?)),
        plain("exp", a.clone(), |x| probe(x.exp()?)),
        plain("log", positive.clone(), |x| probe(x.log()?)),
        plain("relu", away_from_zero(a.clone(), 0.1), |x| probe(x.relu()?)),
        plain("tanh", a.clone(), |x| probe(x.tanh()?)),
        plain("recip", positive.clone(), |x| probe(x.recip()?)),
        plain("softmax_rows", a.clone(), |x| probe(x.softmax_rows()?)),
        plain("log_softmax_rows", a.clone(), |x| probe(x.log_softmax_rows()?)),
        plain("layer_norm_rows/input", a.clone(), {
            let (g, bt) = (gamma.clone(), beta.clone());
            move |x| {
                let t = x.tape();
                probe(x.layer_norm_rows(t.constant(g.clone()), t.constant(bt.clone()), 1e-5)?)
            }
        }),
        plain("layer_norm_rows/gamma", gamma.clone(), {
            let (z, bt) = (a.clone(), beta.clone());
            move |x| {
                let t = x.tape();
                probe(t.constant(z.clone()).layer_norm_rows(x, t.constant(bt.clone()), 1e-5)?)
            }
        }),
        plain("layer_norm_rows/beta", beta.clone(), {
            let (z, g) = (a.clone(), gamma.clone());
            move |x| {
                let t = x.tape();
                probe(t.constant(z.clone()).layer_norm_rows(t.constant(g.clone()), x, 1e-5)?)
            }
        }),
        plain("l2_norm_rows", a.clone(), |x| probe(x.l2_norm_rows()?)),
        plain("cosine_similarity/query", a.clone(), with(&codebook, |x, o| probe(x.cosine_similarity(o, None)?))),
        plain("cosine_similarity/codebook", codebook.clone(), with(&a, |x, o| probe(o.cosine_similarity(x, None)?))),
        plain("cosine_similarity/masked-query", a.clone(), {
            let e = codebook.clone();
            move |x| probe(x.cosine_similarity(x.tape().constant(e.clone()), Some(Arc::clone(&mask)))?)
        }),
    ]
}

/// Replaces `id` with the checked variable inside a module pass.
fn param_case<M: Send + Sync + 'static>(
    name: &str,
    store: Arc<ParamStore>,
    module: Arc<M>,
    id: ParamId,
    input: Tensor,
    forward: for<'t> fn(&M, &Binder<'t, '_>, Var<'t>) -> crate::Result<Var<'t>>,
) -> Case {
    let point = store.value(id).clone();
    plain(name, point, move |w| {
        let b = Binder::new(w.tape(), &store);
        b.bind(id, w);
        let x = w.tape().constant(input.clone());
        probe(forward(&module, &b, x).map_err(lift)?)
    })
}

fn input_case<M: Send + Sync + 'static>(
    name: &str,
    store: Arc<ParamStore>,
    module: Arc<M>,
    input: Tensor,
    forward: for<'t> fn(&M, &Binder<'t, '_>, Var<'t>) -> crate::Result<Var<'t>>,
) -> Case {
    plain(name, input, move |x| {
        let b = Binder::new(x.tape(), &store);
        probe(forward(&module, &b, x).map_err(lift)?)
    })
}

fn module_cases(seed: u64) -> Vec<Case> {
    let mut rng = derived(seed, "gradsuite-modules");
    let mut store = ParamStore::new();
    let projector = FeedForward::new(&mut store, "projector", 10, 12, 6, &mut rng);
    let mut attn = CausalSelfAttention::new(&mut store, "attn", 8, 2, &mut rng).unwrap();
    let down = Tensor::randn(&[2, 8], 0.5, &mut rng);
    let up = Tensor::randn(&[8, 2], 0.5, &mut rng);
    let adapter = LoraAdapter::from_parts(&mut store, "attn.query", down, up, 0.5).unwrap();
    attn.query.adapter = Some(adapter.clone());
    let cfg = ModelConfig {
        vocab: 9,
        dim: 8,
        feat_in: 4,
        feat_enc: 4,
        projector_hidden: 8,
        layers: 1,
        heads: 2,
        ffn: 12,
        max_positions: 16,
        lora_rank: 2,
    };
    let decoder = DecoderLM::new(&mut store, &cfg, &mut rng).unwrap();
    let block = Arc::new(decoder.blocks[0].clone());

    // Pre-activations well away from the relu kink for the checked input.
    let proj_in = Tensor::randn(&[4, 10], 1.0, &mut rng);
    let attn_in = Tensor::randn(&[5, 8], 1.0, &mut rng);
    let block_in = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let logits = Tensor::randn(&[5, 7], 1.0, &mut rng);

    let store = Arc::new(store);
    let projector = Arc::new(projector);
    let attn = Arc::new(attn);
    let adapter = Arc::new(adapter);
    let ff: for<'t> fn(&FeedForward, &Binder<'t, '_>, Var<'t>) -> crate::Result<Var<'t>> = FeedForward::forward;
    let at: for<'t> fn(&CausalSelfAttention, &Binder<'t, '_>, Var<'t>) -> crate::Result<Var<'t>> =
        CausalSelfAttention::forward;

    let mut cases = vec![
        input_case("projector/input", Arc::clone(&store), Arc::clone(&projector), proj_in.clone(), ff),
        input_case("attention/input", Arc::clone(&store), Arc::clone(&attn), attn_in.clone(), at),
        input_case("decoder_block/input", Arc::clone(&store), block, block_in, DecoderBlock::forward),
        input_case("lora_adapter/input", Arc::clone(&store), Arc::clone(&adapter), attn_in.clone(), LoraAdapter::forward),
    ];
    for (label, id) in [
        ("projector/fc1.weight", projector.fc1.weight),
        ("projector/fc1.bias", projector.fc1.bias),
        ("projector/fc2.weight", projector.fc2.weight),
        ("projector/fc2.bias", projector.fc2.bias),
    ] {
        cases.push(param_case(label, Arc::clone(&store), Arc::clone(&projector), id, proj_in.clone(), ff));
    }
    for (label, id) in [
        ("attention/query.weight", attn.query.base.weight),
        ("attention/value.weight", attn.value.base.weight),
        ("attention/output.bias", attn.output.base.bias),
        ("attention/lora_down", adapter.down),
        ("attention/lora_up", adapter.up),
    ] {
        cases.push(param_case(label, Arc::clone(&store), Arc::clone(&attn), id, attn_in.clone(), at));
    }
    let targets = [0usize, 3, 6, 2, 2];
    let weights = [1.0, 0.0, 1.0, 1.0, 0.5];
    cases.push(plain("cross_entropy/masked", logits.clone(), move |x| {
        cross_entropy(x, &targets, &weights).map_err(lift)
    }));
    cases.push(plain("cross_entropy/full", logits, move |x| {
        cross_entropy(x, &targets, &[1.0; 5]).map_err(lift)
    }));
    cases
}

fn quantizer_cases(seed: u64) -> Vec<Case> {
    let mut rng = derived(seed, "gradsuite-quantizer");
    let v = 8;
    let z = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let codebook = Tensor::randn(&[v, 5], 1.0, &mut rng);
    let soft = |k: TopK, renormalize_topk: bool| QuantizerConfig {
        mode: QuantMode::Soft,
        k,
        renormalize_topk,
        temperature: 0.5,
        codebook_trainable: true,
    };
    let mut cases = Vec::new();
    for (label, cfg) in [
        ("soft_quantize/k=V", soft(TopK::All, false)),
        ("soft_quantize/k=3", soft(TopK::K(3), false)),
        ("soft_quantize/k=3-renormalized", soft(TopK::K(3), true)),
    ] {
        let e = codebook.clone();
        cases.push(plain(&format!("{label}/query"), z.clone(), move |x| {
            let e = x.tape().constant(e.clone());
            probe(soft_quantize(x, e, &cfg).map_err(lift)?.embeddings)
        }));
    }
    // With top-k gating the codebook gradient is deliberately confined to the
    // retained pairs, so only the ungated case is a true gradient.
    let cfg = soft(TopK::All, false);
    let zc = z.clone();
    cases.push(plain("soft_quantize/k=V/codebook", codebook.clone(), move |x| {
        let z = x.tape().constant(zc.clone());
        probe(soft_quantize(z, x, &cfg).map_err(lift)?.embeddings)
    }));

    // Hard stage 2: the query gradient must equal the gradient of the upstream
    // signal pushed through the gated distribution, U = C·Eᵀ.
    for (label, k) in [("hard_quantize_stage2/A-path/k=V", TopK::All), ("hard_quantize_stage2/A-path/k=3", TopK::K(3))] {
        let cfg = QuantizerConfig {
            mode: QuantMode::Hard,
            k,
            renormalize_topk: false,
            temperature: 0.5,
            codebook_trainable: true,
        };
        let c = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let upstream = c.matmul(&codebook, true).unwrap();
        let (e1, e2, c1) = (codebook.clone(), codebook.clone(), c.clone());
        cases.push(Case {
            name: label.to_string(),
            point: z.clone(),
            check: Check::Surrogate(
                Box::new(move |x| {
                    let e = x.tape().constant(e1.clone());
                    let out = hard_quantize_stage2(x, e, &cfg).map_err(lift)?;
                    out.embeddings.mul_const(Arc::new(c1.clone()))?.sum_all()
                }),
                Box::new(move |x| {
                    let e = x.tape().constant(e2.clone());
                    let a = similarity_distribution(x, e, cfg.temperature, None).map_err(lift)?;
                    let gated = topk_mask(a, cfg.k, cfg.renormalize_topk).map_err(lift)?;
                    gated.mul_const(Arc::new(upstream.clone()))?.sum_all()
                }),
            ),
        });
    }
    cases
}

/// Runs every check; results are in a fixed order.
pub fn gradient_suite(seed: u64, exec: Exec) -> Vec<CheckOutcome> {
    let mut cases = primitive_cases(seed);
    cases.extend(module_cases(seed));
    cases.extend(quantizer_cases(seed));
    map(exec, &cases, run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let results = gradient_suite(0, Exec::default());
        assert!(results.len() > 60, "{}", results.len());
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn a_straight_through_rule_against_the_wrong_surrogate_fails() {
        let z = Tensor::randn(&[2, 3], 1.0, &mut seeded(2));
        let case = Case {
            name: "wrong".into(),
            point: z,
            check: Check::Surrogate(Box::new(|x| x.sum_all()), Box::new(|x| x.mul(x)?.sum_all())),
        };
        assert!(!run(&case).passed);
    }
}
