use std::collections::BTreeSet;

use super::*;
use crate::autograd::Tape;
use crate::data::{generate_corpus, split_of, CorpusSpec, Split, SyntheticOptions, Utterance};
use crate::error::Error;
use crate::model::{AsrModel, ModelConfig, ParamGroup};
use crate::nn::Binder;
use crate::parallel::Exec;
use crate::quantizer::{QuantMode, QuantizerConfig, Stage, TopK};

fn config() -> ModelConfig {
    ModelConfig {
        vocab: 24,
        dim: 16,
        feat_in: 4,
        feat_enc: 4,
        projector_hidden: 24,
        layers: 1,
        heads: 2,
        ffn: 32,
        max_positions: 64,
        lora_rank: 2,
    }
}

fn corpus() -> Vec<Utterance> {
    let opts = SyntheticOptions {
        vocab: 24,
        feat: 4,
        train: 40,
        test_id: 6,
        test_ood: 6,
        ..SyntheticOptions::default()
    };
    generate_corpus(&CorpusSpec::synthetic(&opts, 3).unwrap()).unwrap()
}

fn plan(pairs: &[(&str, &str)]) -> StagePlan {
    let mut all = vec![("batch", "4"), ("warmup", "2"), ("epochs", "1")];
    all.extend_from_slice(pairs);
    StagePlan::from_pairs(all.iter().copied()).unwrap()
}

fn stage1_state(pairs: &[(&str, &str)]) -> TrainState {
    TrainState::from_pretrained(AsrModel::new(config(), 1).unwrap(), plan(pairs)).unwrap()
}

fn values_of(model: &AsrModel, group: ParamGroup) -> Vec<(String, Vec<u64>)> {
    model
        .store
        .iter()
        .filter(|(_, p)| ParamGroup::of(&p.name) == group)
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

fn batch_loss(state: &TrainState, batch: &[&Utterance]) -> f64 {
    step_gradients(state, batch, Exec::Sequential).unwrap().loss
}

#[test]
fn stage_one_changes_only_projector_and_lora() {
    let data = corpus();
    let train = split_of(&data, Split::Train);
    let mut state = stage1_state(&[("mode", "hard"), ("lr", "1e-2"), ("epochs", "4")]);
    let before: Vec<_> = [ParamGroup::Codebook, ParamGroup::DecoderBase, ParamGroup::Encoder, ParamGroup::Projector]
        .iter()
        .map(|&g| values_of(&state.model, g))
        .collect();
    let opts = TrainOptions {
        exec: Exec::default(),
        max_steps: Some(10),
    };
    let metrics = train_stage(&mut state, &train, &opts).unwrap();
    assert_eq!(metrics.len(), 10);
    assert_eq!(state.adam.step, 10);
    assert_eq!(values_of(&state.model, ParamGroup::Codebook), before[0]);
    assert_eq!(values_of(&state.model, ParamGroup::DecoderBase), before[1]);
    assert_eq!(values_of(&state.model, ParamGroup::Encoder), before[2]);
    assert_ne!(values_of(&state.model, ParamGroup::Projector), before[3]);
    assert!(metrics.iter().all(|m| m.codebook_usage_entropy.is_some()));
}

#[test]
fn stage_two_topk_touches_few_codebook_rows() {
    let data = corpus();
    let train = split_of(&data, Split::Train);
    let s1 = stage1_state(&[("mode", "hard")]);
    let state = s1
        .continue_with(plan(&[("stage", "2"), ("mode", "soft"), ("k", "10"), ("codebook", "trainable")]))
        .unwrap();
    let mut state = state;
    let groups = state.trainable_groups();
    state.model.set_trainable(&groups);
    for batch in train.chunks(4).take(5) {
        let step = step_gradients(&state, batch, Exec::Sequential).unwrap();
        let g = step.grads[state.model.codebook.index()].as_ref().expect("codebook gradient");
        let touched: BTreeSet<usize> = (0..g.rows()).filter(|&r| g.row(r).iter().any(|&x| x != 0.0)).collect();
        let mut allowed = BTreeSet::new();
        let mut frames = 0;
        for u in step.usage.iter().flatten() {
            frames += u.rows();
            for r in 0..u.rows() {
                assert!(u.row(r).iter().filter(|&&w| w != 0.0).count() <= 10);
                allowed.extend((0..u.cols()).filter(|&c| u.get2(r, c) != 0.0));
            }
        }
        assert!(!touched.is_empty());
        assert!(touched.is_subset(&allowed), "{touched:?} vs {allowed:?}");
        assert!(touched.len() <= 10 * frames);
    }
}

#[test]
fn fresh_lora_with_quantizer_off_reproduces_the_lm_loss() {
    let data = corpus();
    let train = split_of(&data, Split::Train);
    let lm = AsrModel::new(config(), 4).unwrap();
    let state = TrainState::from_pretrained(lm.clone(), plan(&[("mode", "off")])).unwrap();
    // Same encoder and projector, no adapters.
    let mut bare = lm;
    for (_, p) in state.model.store.iter() {
        if let Some(id) = bare.store.find(&p.name) {
            bare.store.set_value(id, (*p.value).clone());
        }
    }
    assert!(!bare.decoder.has_lora());
    let q = QuantizerConfig::default();
    for u in train.iter().take(4) {
        let loss = |m: &AsrModel| {
            let tape = Tape::new();
            let b = Binder::new(&tape, &m.store);
            m.forward_asr(&b, &u.frames, &u.tokens, &q, Stage::One).unwrap().loss.item()
        };
        assert_eq!(loss(&state.model).to_bits(), loss(&bare).to_bits());
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let data = corpus();
    let train = split_of(&data, Split::Train);
    let mut state = stage1_state(&[("mode", "soft"), ("k", "5"), ("lr", "1e-2")]);
    let opts = TrainOptions {
        exec: Exec::Sequential,
        max_steps: Some(3),
    };
    train_stage(&mut state, &train, &opts).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.ckpt");
    save_checkpoint(&path, &state.model, &state.adam, Some(&state.plan)).unwrap();
    let loaded = load_checkpoint(&path).unwrap().into_state().unwrap();
    assert_eq!(loaded.plan, state.plan);
    assert_eq!(loaded.adam.step, 3);
    for ((_, a), (_, b)) in state.model.store.iter().zip(loaded.model.store.iter()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.bit_eq(&b.value), "{}", a.name);
    }
    let batch: Vec<_> = train.iter().take(4).copied().collect();
    assert_eq!(batch_loss(&state, &batch).to_bits(), batch_loss(&loaded, &batch).to_bits());

    // Optimizer state survives too: continuing both gives the same numbers.
    let mut a = state;
    let mut b = loaded;
    let opts = TrainOptions {
        exec: Exec::Sequential,
        max_steps: Some(2),
    };
    let ma = train_stage(&mut a, &train, &opts).unwrap();
    let mb = train_stage(&mut b, &train, &opts).unwrap();
    assert_eq!(ma, mb);
}

fn array_length_offset(bytes: &[u8], name: &str) -> usize {
    let needle = name.as_bytes();
    let start = bytes.windows(needle.len()).position(|w| w == needle).unwrap() + needle.len();
    let rank = u32::from_le_bytes(bytes[start..start + 4].try_into().unwrap()) as usize;
    start + 4 + 8 * rank
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let state = stage1_state(&[("mode", "hard")]);
    let bytes = encode_checkpoint(&state.model, &state.adam, Some(&state.plan)).unwrap();
    assert!(decode_checkpoint(&bytes).is_ok());

    let mut tampered = bytes.clone();
    let off = array_length_offset(&tampered, "projector.fc2.weight");
    let len = u64::from_le_bytes(tampered[off..off + 8].try_into().unwrap());
    tampered[off..off + 8].copy_from_slice(&(len + 7).to_le_bytes());
    let msg = decode_checkpoint(&tampered).unwrap_err().to_string();
    assert!(msg.contains("projector.fc2.weight"), "{msg}");

    let mut version = bytes.clone();
    version[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let msg = decode_checkpoint(&version).unwrap_err().to_string();
    assert!(msg.contains("version"), "{msg}");

    let mut flipped = bytes.clone();
    let n = flipped.len();
    flipped[n - 100] ^= 1;
    let msg = decode_checkpoint(&flipped).unwrap_err().to_string();
    assert!(msg.contains("checksum"), "{msg}");

    assert!(decode_checkpoint(&bytes[..bytes.len() / 2]).is_err());
    assert!(decode_checkpoint(b"not a checkpoint at all, just text....").is_err());
}

#[test]
fn stage_two_starts_where_stage_one_ended() {
    let data = corpus();
    let train = split_of(&data, Split::Train);
    let mut s1 = stage1_state(&[("mode", "hard"), ("lr", "1e-2")]);
    let opts = TrainOptions {
        exec: Exec::Sequential,
        max_steps: Some(4),
    };
    train_stage(&mut s1, &train, &opts).unwrap();
    let batch: Vec<_> = train.iter().take(6).copied().collect();
    let end_of_stage1 = batch_loss(&s1, &batch);

    let bytes = encode_checkpoint(&s1.model, &s1.adam, Some(&s1.plan)).unwrap();
    let resumed = decode_checkpoint(&bytes).unwrap().into_state().unwrap();
    let s2 = resumed
        .continue_with(plan(&[("stage", "2"), ("mode", "hard"), ("codebook", "trainable")]))
        .unwrap();
    for g in [ParamGroup::Projector, ParamGroup::Lora, ParamGroup::Codebook] {
        assert_eq!(values_of(&s2.model, g), values_of(&s1.model, g));
    }
    assert_eq!(s2.adam.step, 0);
    let start_of_stage2 = batch_loss(&s2, &batch);
    assert!((start_of_stage2 - end_of_stage1).abs() <= 1e-12 * end_of_stage1.abs());

    let lm_only = TrainState {
        model: AsrModel::new(config(), 1).unwrap(),
        adam: crate::nn::Adam::new(1e-3, 0),
        plan: s1.plan.clone(),
    };
    assert!(lm_only.continue_with(s2.plan.clone()).is_err());
}

#[test]
fn training_is_deterministic_and_execution_independent() {
    let data = corpus();
    let train = split_of(&data, Split::Train);
    let run = |exec| {
        let mut s = stage1_state(&[("mode", "soft"), ("k", "all"), ("epochs", "2")]);
        let m = train_stage(&mut s, &train, &TrainOptions { exec, max_steps: None }).unwrap();
        (m, s)
    };
    let (ma, sa) = run(Exec::Sequential);
    let (mb, sb) = run(Exec::Sequential);
    let (mc, sc) = run(Exec::default());
    assert_eq!(ma.len(), 20);
    assert_eq!(ma, mb);
    assert_eq!(ma, mc);
    for ((_, a), ((_, b), (_, c))) in sa.model.store.iter().zip(sb.model.store.iter().zip(sc.model.store.iter())) {
        assert!(a.value.bit_eq(&b.value) && a.value.bit_eq(&c.value));
    }
    assert_eq!(ma[0].lr, 5e-5);
    assert_eq!(ma[5].lr, 1e-4);
}

#[test]
fn non_finite_loss_aborts_before_updating() {
    let data = corpus();
    let train = split_of(&data, Split::Train);
    let mut state = stage1_state(&[("mode", "off")]);
    let id = state.model.projector.fc1.bias;
    let mut poisoned = state.model.store.value(id).clone();
    poisoned.data_mut()[0] = f64::NAN;
    state.model.store.set_value(id, poisoned);
    let before = values_of(&state.model, ParamGroup::Lora);
    let err = train_stage(&mut state, &train, &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert_eq!(state.adam.step, 0);
    assert_eq!(values_of(&state.model, ParamGroup::Lora), before);
}

#[test]
fn plan_parsing_and_validation() {
    let p = StagePlan::from_pairs([("stage", "2")]).unwrap();
    assert_eq!(p.peak_lr, 1e-5);
    assert_eq!(p.epochs, 2);
    assert_eq!(p.quantizer.k, TopK::K(10));
    assert!(p.quantizer.codebook_trainable);
    let p1 = StagePlan::defaults(1);
    assert_eq!((p1.peak_lr, p1.epochs, p1.warmup, p1.batch_size), (1e-4, 10, 100, 16));
    assert_eq!(p1.quantizer.mode, QuantMode::Hard);

    let err = StagePlan::from_pairs([("stage", "1"), ("codebook", "trainable")]).unwrap_err();
    assert!(err.to_string().contains("fixed codebook"), "{err}");
    assert!(StagePlan::from_pairs([("stage", "3")]).is_err());
    assert!(StagePlan::from_pairs([("colour", "red")]).is_err());
    assert!(StagePlan::from_pairs([("k", "ten")]).is_err());

    let text = "# stage two\nstage = 2\nmode=hard  # comment\n\nk = all\nseed = 7\n";
    let pairs = parse_config(text).unwrap();
    let p = StagePlan::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
    assert_eq!(p.quantizer.mode, QuantMode::Hard);
    assert_eq!(p.seed, 7);
    let again = parse_config(&p.to_config()).unwrap();
    let q = StagePlan::from_pairs(again.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
    assert_eq!(p, q);
    let err = parse_config("stage = 2\nmode hard\n").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");

    let merged = merge_pairs(&[
        vec![("a".into(), "1".into()), ("b".into(), "2".into())],
        vec![("a".into(), "3".into())],
    ]);
    assert_eq!(merged, vec![("a".to_string(), "3".to_string()), ("b".to_string(), "2".to_string())]);
}

#[test]
fn metrics_csv_has_the_expected_columns() {
    let rows = vec![
        MetricRow {
            step: 1,
            loss: 2.5,
            lr: 1e-4,
            codebook_usage_entropy: Some(0.5),
        },
        MetricRow {
            step: 2,
            loss: 2.0,
            lr: 1e-4,
            codebook_usage_entropy: None,
        },
    ];
    let mut out = Vec::new();
    write_metrics_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,loss,lr,codebook_usage_entropy");
    assert_eq!(lines[1], "1,2.5,0.0001,0.5");
    assert_eq!(lines[2], "2,2.0,0.0001,");
}

const MATRIX: &str = "
seeds = 5, 6
beam = 2
max_len = 10
stage1.batch = 4
stage1.lr = 1e-2
stage1.warmup = 1
stage2.batch = 4
stage2.warmup = 1
chain baseline = mode=off
chain hard = mode=hard
chain hard-soft = mode=hard -> mode=soft k=10 codebook=trainable
";

#[test]
fn matrix_spec_parsing() {
    let spec = MatrixSpec::parse(MATRIX).unwrap();
    assert_eq!(spec.seeds, vec![5, 6]);
    assert_eq!(spec.decode.beam, 2);
    assert_eq!(spec.chains.len(), 3);
    let (p1, p2) = spec.plans(&spec.chains[2], 6).unwrap();
    assert_eq!(p1.quantizer.mode, QuantMode::Hard);
    assert_eq!((p1.seed, p1.batch_size, p1.peak_lr), (6, 4, 1e-2));
    let p2 = p2.unwrap();
    assert_eq!((p2.stage, p2.quantizer.k, p2.peak_lr), (2, TopK::K(10), 1e-5));

    assert!(MatrixSpec::parse("seeds = 1\n").is_err());
    assert!(MatrixSpec::parse("seeds = 1\nchain a = mode=off\nchain a = mode=hard\n").is_err());
    let err = MatrixSpec::parse("seeds = 1\nchain a = mode=hard codebook=trainable\n").unwrap_err();
    assert!(err.to_string().contains("chain a"), "{err}");
    let err = MatrixSpec::parse("seeds = 1\nwhat = 3\nchain a = mode=off\n").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn matrix_runs_every_chain_for_every_seed() {
    let data = corpus();
    let spec = MatrixSpec::parse(MATRIX).unwrap();
    let lm = AsrModel::new(config(), 2).unwrap();
    let opts = MatrixOptions {
        exec: Exec::default(),
        max_steps: Some(3),
    };
    let mut lines = Vec::new();
    let out = run_matrix(&spec, &lm, &data, &opts, &mut |l| lines.push(l.to_string())).unwrap();
    assert_eq!(out.rows.len(), 6);
    let names: Vec<&str> = out.rows.iter().map(|r| r.chain.as_str()).collect();
    assert_eq!(names, ["baseline", "hard", "hard-soft", "baseline", "hard", "hard-soft"]);
    // Stage-1 runs shared by `hard` and `hard-soft` happen once per seed.
    assert_eq!(lines.iter().filter(|l| l.contains("stage1-hard") && !l.contains("->")).count(), 2);
    assert_eq!(out.metrics[2].len(), 6);
    assert_eq!(out.metrics[1][..], out.metrics[2][..3]);
    assert!(out.rows[0].codebook_entropy.is_none() && out.rows[1].codebook_entropy.is_some());
    for r in &out.rows {
        assert!(r.id_wer >= 0.0 && r.ood_wer >= 0.0 && r.id_gap >= 0.0);
    }
    let summaries = out.summaries();
    assert_eq!(summaries.len(), 3);
    assert_eq!(summaries[2].seeds, 2);
    let mean = (out.rows[2].ood_wer + out.rows[5].ood_wer) / 2.0;
    assert!((summaries[2].ood_wer - mean).abs() < 1e-15);

    let again = run_matrix(&spec, &lm, &data, &opts, &mut |_| {}).unwrap();
    assert_eq!(again.rows, out.rows);

    let mut csv = Vec::new();
    write_rows_csv(&out.rows, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("chain,seed,stages,mode,k,codebook,id_wer,ood_wer,id_gap,ood_gap,codebook_entropy,final_loss"));
    assert_eq!(text.lines().count(), 7);
}
