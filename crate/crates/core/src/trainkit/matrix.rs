//! Ablation matrix: named chains of stage plans run over shared seeds.
//!
//! Spec file syntax, one directive per line (`#` comments):
//!
//! ```text
//! seeds = 1, 2, 3
//! beam = 4
//! max_len = 12
//! stage1.epochs = 10          # applied to every chain's stage 1
//! stage2.lr = 1e-5            # applied to every chain's stage 2
//! chain baseline = mode=off
//! chain hard-soft = mode=hard -> mode=soft k=10 codebook=trainable
//! ```
//!
//! A chain is a stage-1 override list, optionally followed by `->` and a
//! stage-2 override list. Chains whose stage 1 resolves to the same plan
//! share one stage-1 run per seed.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{parse_config, train_stage, MetricRow, StagePlan, TrainOptions, TrainState};
use crate::data::{split_of, Split, Utterance};
use crate::error::{Error, Result};
use crate::evalprobe::{codebook_stats, evaluate, modality_gap, utterance_means, DecodeConfig};
use crate::model::AsrModel;
use crate::parallel::{map, Exec};
use crate::quantizer::{QuantMode, QuantizerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    pub name: String,
    pub stage1: Vec<(String, String)>,
    pub stage2: Option<Vec<(String, String)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSpec {
    pub seeds: Vec<u64>,
    pub decode: DecodeConfig,
    pub stage1: Vec<(String, String)>,
    pub stage2: Vec<(String, String)>,
    pub chains: Vec<ChainSpec>,
}

fn pairs_of(text: &str) -> Result<Vec<(String, String)>> {
    text.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::config(format!("expected key=value, got {kv:?}")))
        })
        .collect()
}

impl MatrixSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = MatrixSpec {
            seeds: Vec::new(),
            decode: DecodeConfig::default(),
            stage1: Vec::new(),
            stage2: Vec::new(),
            chains: Vec::new(),
        };
        for (lineno, raw) in text.lines().enumerate() {
            let at = |e: Error| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("chain ") {
                let (name, body) = rest
                    .split_once('=')
                    .ok_or_else(|| at(Error::config("expected `chain NAME = ...`")))?;
                let name = name.trim().to_string();
                if name.is_empty() || spec.chains.iter().any(|c| c.name == name) {
                    return Err(at(Error::config(format!("chain name {name:?} is empty or repeated"))));
                }
                let (s1, s2) = match body.split_once("->") {
                    Some((a, b)) => (a, Some(b)),
                    None => (body, None),
                };
                spec.chains.push(ChainSpec {
                    name,
                    stage1: pairs_of(s1).map_err(at)?,
                    stage2: s2.map(pairs_of).transpose().map_err(at)?,
                });
                continue;
            }
            let (k, v) = parse_config(line).map_err(at)?.remove(0);
            let bad = |what: &str| at(Error::config(format!("invalid {what} {v:?}")));
            match k.as_str() {
                "seeds" => {
                    spec.seeds = v
                        .split(',')
                        .map(|s| s.trim().parse().map_err(|_| bad("seed list")))
                        .collect::<Result<_>>()?
                }
                "beam" => spec.decode.beam = v.parse().map_err(|_| bad("beam"))?,
                "max_len" => spec.decode.max_len = v.parse().map_err(|_| bad("max_len"))?,
                _ => match k.split_once('.') {
                    Some(("stage1", key)) => spec.stage1.push((key.to_string(), v.clone())),
                    Some(("stage2", key)) => spec.stage2.push((key.to_string(), v.clone())),
                    _ => return Err(at(Error::config(format!("unknown matrix key {k:?}")))),
                },
            }
        }
        if spec.seeds.is_empty() || spec.chains.is_empty() {
            return Err(Error::config("a matrix needs `seeds = ...` and at least one chain"));
        }
        for seed in spec.seeds.clone() {
            for c in &spec.chains {
                spec.plans(c, seed)?;
            }
        }
        Ok(spec)
    }

    /// Resolved stage plans of one chain for one seed.
    pub fn plans(&self, chain: &ChainSpec, seed: u64) -> Result<(StagePlan, Option<StagePlan>)> {
        let resolve = |stage: &str, shared: &[(String, String)], own: &[(String, String)]| {
            let seed = seed.to_string();
            let pairs: Vec<(&str, &str)> = [("stage", stage)]
                .into_iter()
                .chain(shared.iter().chain(own).map(|(k, v)| (k.as_str(), v.as_str())))
                .chain([("seed", seed.as_str())])
                .collect();
            StagePlan::from_pairs(pairs.iter().copied()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("chain {}: {m}", chain.name)),
                other => other,
            })
        };
        let s1 = resolve("1", &self.stage1, &chain.stage1)?;
        let s2 = chain
            .stage2
            .as_ref()
            .map(|own| resolve("2", &self.stage2, own))
            .transpose()?;
        Ok((s1, s2))
    }
}

/// One (chain, seed) result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixRow {
    pub chain: String,
    pub seed: u64,
    pub stages: String,
    pub mode: String,
    pub k: String,
    pub codebook: String,
    pub id_wer: f64,
    pub ood_wer: f64,
    pub id_gap: f64,
    pub ood_gap: f64,
    pub codebook_entropy: Option<f64>,
    pub final_loss: f64,
}

/// Seed-averaged results of one chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSummary {
    pub chain: String,
    pub stages: String,
    pub seeds: usize,
    pub id_wer: f64,
    pub ood_wer: f64,
    /// `ood_wer / id_wer`, with the denominator floored at 0.01.
    pub degradation: f64,
    pub id_gap: f64,
    pub ood_gap: f64,
}

/// Floor for the in-domain WER when forming degradation ratios.
pub const DEGRADATION_FLOOR: f64 = 0.01;

pub struct MatrixOutcome {
    pub rows: Vec<MatrixRow>,
    /// Final state of every (chain, seed), in row order.
    pub states: Vec<TrainState>,
    /// Training metrics of every (chain, seed), stage 1 followed by stage 2.
    pub metrics: Vec<Vec<MetricRow>>,
}

impl MatrixOutcome {
    pub fn summaries(&self) -> Vec<ChainSummary> {
        summarize(&self.rows)
    }
}

pub fn summarize(rows: &[MatrixRow]) -> Vec<ChainSummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&MatrixRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.chain.as_str()) {
            order.push(&r.chain);
        }
        groups.entry(&r.chain).or_default().push(r);
    }
    order
        .into_iter()
        .map(|name| {
            let g = &groups[name];
            let n = g.len() as f64;
            let mean = |f: fn(&MatrixRow) -> f64| g.iter().map(|r| f(r)).sum::<f64>() / n;
            let id_wer = mean(|r| r.id_wer);
            let ood_wer = mean(|r| r.ood_wer);
            ChainSummary {
                chain: name.to_string(),
                stages: g[0].stages.clone(),
                seeds: g.len(),
                id_wer,
                ood_wer,
                degradation: ood_wer / id_wer.max(DEGRADATION_FLOOR),
                id_gap: mean(|r| r.id_gap),
                ood_gap: mean(|r| r.ood_gap),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MatrixOptions {
    pub exec: Exec,
    /// Cap on updates per stage (full epochs when `None`).
    pub max_steps: Option<u64>,
}

fn evaluate_state(
    chain: &str,
    seed: u64,
    stages: String,
    state: &TrainState,
    final_loss: f64,
    corpus: &[Utterance],
    decode: &DecodeConfig,
    exec: Exec,
) -> Result<MatrixRow> {
    let model = &state.model;
    let q = state.plan.quantizer;
    let id = split_of(corpus, Split::TestId);
    let ood = split_of(corpus, Split::TestOod);
    if id.is_empty() || ood.is_empty() {
        return Err(Error::data("the matrix needs non-empty test-id and test-ood splits"));
    }
    let id_eval = evaluate(model, &id, &q, decode, exec)?;
    let ood_eval = evaluate(model, &ood, &q, decode, exec)?;
    let id_gap = modality_gap(&utterance_means(model, &id, &q, exec)?)?;
    let ood_gap = modality_gap(&utterance_means(model, &ood, &q, exec)?)?;
    let entropy = match q.mode {
        QuantMode::Off => None,
        _ => {
            let usage = map(exec, &id, |u| model.quantized_audio(&u.frames, &q).map(|a| a.usage));
            let usage: Vec<_> = usage.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
            Some(codebook_stats(usage.iter())?.entropy)
        }
    };
    Ok(MatrixRow {
        chain: chain.to_string(),
        seed,
        stages,
        mode: q.mode.to_string(),
        k: q.k.to_string(),
        codebook: book(&q).to_string(),
        id_wer: id_eval.wer(),
        ood_wer: ood_eval.wer(),
        id_gap,
        ood_gap,
        codebook_entropy: entropy,
        final_loss,
    })
}

fn book(q: &QuantizerConfig) -> &'static str {
    if q.codebook_trainable {
        "trainable"
    } else {
        "frozen"
    }
}

/// Runs every chain for every seed from the same pretrained LM.
///
/// `progress` receives one line per finished stage.
pub fn run_matrix(
    spec: &MatrixSpec,
    pretrained: &AsrModel,
    corpus: &[Utterance],
    opts: &MatrixOptions,
    progress: &mut dyn FnMut(&str),
) -> Result<MatrixOutcome> {
    let train = split_of(corpus, Split::Train);
    let train_opts = TrainOptions {
        exec: opts.exec,
        max_steps: opts.max_steps,
    };
    let mut out = MatrixOutcome {
        rows: Vec::new(),
        states: Vec::new(),
        metrics: Vec::new(),
    };
    for &seed in &spec.seeds {
        let mut stage1_cache: BTreeMap<String, (TrainState, Vec<MetricRow>)> = BTreeMap::new();
        for chain in &spec.chains {
            let (p1, p2) = spec.plans(chain, seed)?;
            let key = p1.to_config();
            if !stage1_cache.contains_key(&key) {
                let mut state = TrainState::from_pretrained(pretrained.clone(), p1.clone())?;
                let metrics = train_stage(&mut state, &train, &train_opts)?;
                progress(&format!(
                    "seed {seed} {}: final loss {:.4}",
                    p1.label(),
                    metrics.last().map_or(f64::NAN, |m| m.loss)
                ));
                stage1_cache.insert(key.clone(), (state, metrics));
            }
            let (s1, m1) = &stage1_cache[&key];
            let (state, metrics, stages) = match p2 {
                None => (s1.clone(), m1.clone(), p1.label()),
                Some(p2) => {
                    let mut state = s1.clone().continue_with(p2.clone())?;
                    let m2 = train_stage(&mut state, &train, &train_opts)?;
                    progress(&format!(
                        "seed {seed} {} -> {}: final loss {:.4}",
                        p1.label(),
                        p2.label(),
                        m2.last().map_or(f64::NAN, |m| m.loss)
                    ));
                    let mut all = m1.clone();
                    all.extend(m2);
                    (state, all, format!("{} -> {}", p1.label(), p2.label()))
                }
            };
            let final_loss = metrics.last().map_or(f64::NAN, |m| m.loss);
            let row = evaluate_state(&chain.name, seed, stages, &state, final_loss, corpus, &spec.decode, opts.exec)?;
            progress(&format!(
                "seed {seed} chain {}: id WER {:.4}, ood WER {:.4}, gap {:.4}",
                chain.name, row.id_wer, row.ood_wer, row.id_gap
            ));
            out.rows.push(row);
            out.states.push(state);
            out.metrics.push(metrics);
        }
    }
    Ok(out)
}

pub fn write_rows_csv<W: std::io::Write, R: Serialize>(rows: &[R], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::data(e.to_string()))
}
