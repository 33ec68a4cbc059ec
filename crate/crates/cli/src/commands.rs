//! Command implementations. Each runs from fully resolved settings, so a
//! manifest's `config` block is enough to repeat it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vqbridge::autograd::Tensor;
use vqbridge::data::{generate_corpus, lm_corpus, read_corpus, split_of, write_corpus, CorpusSpec, Split, SyntheticOptions, Utterance};
use vqbridge::evalprobe::{
    beam_search, codebook_stats, evaluate_with, greedy, modality_gap, nearest_tokens, project_2d, utterance_means,
};
use vqbridge::gradsuite::{gradient_suite, STEP, TOLERANCE};
use vqbridge::model::{pretrain_lm, AsrModel, ModelConfig, PretrainOptions};
use vqbridge::nn::Adam;
use vqbridge::parallel::Exec;
use vqbridge::quantizer::QuantMode;
use vqbridge::trainkit::{
    decode_checkpoint, encode_checkpoint, run_matrix, train_stage, Checkpoint, MatrixOptions, MatrixSpec, StagePlan,
    TrainOptions, TrainState, PLAN_KEYS,
};

use crate::error::{CliError, CliResult, Kind};
use crate::run::Run;
use crate::settings::{get, get_opt, pairs_of, typed, Settings};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const CORPUS_OPTIONS_FILE: &str = "corpus_options.json";

/// Settings schema of one command.
pub struct Schema {
    pub defaults: Vec<(String, String)>,
    pub known: Vec<&'static str>,
    pub required: Vec<&'static str>,
}

fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Model settings the pretraining command exposes; vocabulary and feature
/// sizes come from the corpus.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelSettings {
    dim: usize,
    feat_enc: usize,
    projector_hidden: usize,
    layers: usize,
    heads: usize,
    ffn: usize,
    max_positions: usize,
    lora_rank: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            dim: m.dim,
            feat_enc: m.feat_enc,
            projector_hidden: m.projector_hidden,
            layers: m.layers,
            heads: m.heads,
            ffn: m.ffn,
            max_positions: m.max_positions,
            lora_rank: m.lora_rank,
        }
    }
}

const SYNTHETIC_KEYS: [&str; 15] = [
    "vocab",
    "feat",
    "fan_out",
    "min_len",
    "max_len",
    "min_frames",
    "max_frames",
    "noise",
    "ood_noise",
    "ood_channel",
    "ood_offset",
    "ood_topic_shift",
    "train",
    "test_id",
    "test_ood",
];

const MODEL_KEYS: [&str; 8] = [
    "dim",
    "feat_enc",
    "projector_hidden",
    "layers",
    "heads",
    "ffn",
    "max_positions",
    "lora_rank",
];

pub fn schema(command: &str) -> CliResult<Schema> {
    let s = match command {
        "gen-data" => {
            let mut known = vec!["seed"];
            known.extend(SYNTHETIC_KEYS);
            Schema {
                defaults: pairs_of(&SyntheticOptions::default()),
                known,
                required: vec!["seed"],
            }
        }
        "pretrain-lm" => {
            let p = PretrainOptions::default();
            let mut defaults = kv(&[
                ("steps", &p.steps.to_string()),
                ("batch", &p.batch.to_string()),
                ("lr", &p.peak_lr.to_string()),
                ("warmup", &p.warmup.to_string()),
                ("sentences", "4000"),
            ]);
            defaults.extend(pairs_of(&ModelSettings::default()));
            let mut known = vec!["data", "seed", "steps", "batch", "lr", "warmup", "sentences"];
            known.extend(MODEL_KEYS);
            Schema {
                defaults,
                known,
                required: vec!["data", "seed"],
            }
        }
        "train" => {
            let mut known = vec!["data", "max_steps"];
            known.extend(PLAN_KEYS);
            Schema {
                defaults: kv(&[("stage", "1"), ("max_steps", "")]),
                known,
                required: vec!["data", "init", "seed"],
            }
        }
        "eval" => Schema {
            defaults: kv(&[("split", "id"), ("beam", "4"), ("max_len", "12"), ("greedy", "false")]),
            known: vec!["ckpt", "data", "split", "beam", "max_len", "greedy"],
            required: vec!["ckpt", "data"],
        },
        "probe-tokens" | "probe-project" | "probe-stats" => Schema {
            defaults: kv(&[("split", "id"), ("k", "5"), ("limit", "20"), ("source", "projected")]),
            known: vec!["ckpt", "data", "split", "k", "limit", "source"],
            required: vec!["ckpt", "data"],
        },
        "gradcheck" => Schema {
            defaults: kv(&[("seed", "0")]),
            known: vec!["seed"],
            required: vec![],
        },
        "matrix" => Schema {
            defaults: kv(&[("max_steps", "")]),
            known: vec!["spec", "data", "lm", "max_steps"],
            required: vec!["spec", "data", "lm"],
        },
        other => return Err(CliError::usage(format!("unknown command {other:?}"))),
    };
    Ok(s)
}

/// Command-specific normalization after layering, e.g. stage-dependent defaults.
pub fn finalize(command: &str, mut settings: Settings) -> CliResult<Settings> {
    if command == "train" {
        let plan = plan_from(&settings)?;
        for (k, v) in plan.to_pairs() {
            settings.insert(k.to_string(), v);
        }
    }
    Ok(settings)
}

fn plan_from(s: &Settings) -> CliResult<StagePlan> {
    let pairs: Vec<(&str, &str)> = PLAN_KEYS
        .iter()
        .filter_map(|k| s.get(*k).map(|v| (*k, v.as_str())))
        .collect();
    Ok(StagePlan::from_pairs(pairs.iter().copied())?)
}

/// Seeds a run depends on, for the manifest.
pub fn seeds_of(command: &str, s: &Settings, extra: &[u64]) -> Vec<u64> {
    let mut seeds: Vec<u64> = s.get("seed").and_then(|v| v.parse().ok()).into_iter().collect();
    if command == "matrix" {
        seeds.extend(extra);
    }
    seeds
}

/// Runs `command`; returns extra seeds discovered while running.
pub fn execute(command: &str, s: &Settings, run: &mut Run) -> CliResult<Vec<u64>> {
    match command {
        "gen-data" => gen_data(s, run),
        "pretrain-lm" => pretrain(s, run),
        "train" => train(s, run),
        "eval" => eval(s, run),
        "probe-tokens" => probe_tokens(s, run),
        "probe-project" => probe_project(s, run),
        "probe-stats" => probe_stats(s, run),
        "gradcheck" => gradcheck(s, run),
        "matrix" => matrix(s, run),
        other => Err(CliError::usage(format!("unknown command {other:?}"))),
    }
    .map(|extra| extra.unwrap_or_default())
}

fn corpus_path(data: &str) -> PathBuf {
    let p = PathBuf::from(data);
    if p.is_dir() {
        p.join(CORPUS_FILE)
    } else {
        p
    }
}

fn load_corpus(run: &mut Run, s: &Settings) -> CliResult<Vec<Utterance>> {
    let path = corpus_path(&get::<String>(s, "data")?);
    let bytes = run.read_input(&path)?;
    read_corpus(bytes.as_slice()).map_err(|e| CliError::data(format!("{}: {}", path.display(), CliError::from(e).message)))
}

fn load_ckpt(run: &mut Run, path: &Path) -> CliResult<Checkpoint> {
    let bytes = run.read_input(path)?;
    decode_checkpoint(&bytes).map_err(|e| {
        let e = CliError::from(e);
        CliError {
            kind: e.kind,
            message: format!("{}: {}", path.display(), e.message),
        }
    })
}

fn split_arg(s: &Settings) -> CliResult<Split> {
    get::<Split>(s, "split")
}

fn tokens_text(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

#[derive(Serialize)]
struct SplitRow {
    split: &'static str,
    utterances: usize,
    tokens: usize,
    frames: usize,
}

#[derive(Serialize, Deserialize)]
struct CorpusOptions {
    seed: u64,
    options: SyntheticOptions,
}

fn gen_data(s: &Settings, run: &mut Run) -> CliResult<Option<Vec<u64>>> {
    let seed: u64 = get(s, "seed")?;
    let options: SyntheticOptions = typed(s)?;
    let spec = CorpusSpec::synthetic(&options, seed)?;
    let corpus = generate_corpus(&spec)?;
    let mut bytes = Vec::new();
    write_corpus(&corpus, &mut bytes)?;
    run.write(CORPUS_FILE, &bytes)?;
    let opts = serde_json::to_vec_pretty(&CorpusOptions { seed, options }).expect("options serialize");
    run.write(CORPUS_OPTIONS_FILE, &opts)?;
    let rows: Vec<SplitRow> = [Split::Train, Split::TestId, Split::TestOod]
        .into_iter()
        .map(|split| {
            let utts = split_of(&corpus, split);
            SplitRow {
                split: split.as_str(),
                utterances: utts.len(),
                tokens: utts.iter().map(|u| u.tokens.len()).sum(),
                frames: utts.iter().map(|u| u.frames.rows()).sum(),
            }
        })
        .collect();
    run.write_csv("splits.csv", &rows)?;
    println!("wrote {} utterances to {}", corpus.len(), run.dir().join(CORPUS_FILE).display());
    Ok(None)
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

fn pretrain(s: &Settings, run: &mut Run) -> CliResult<Option<Vec<u64>>> {
    let seed: u64 = get(s, "seed")?;
    let data = PathBuf::from(get::<String>(s, "data")?);
    let dir = if data.is_dir() {
        data
    } else {
        data.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let raw = run.read_input(&dir.join(CORPUS_OPTIONS_FILE))?;
    let corpus: CorpusOptions = serde_json::from_slice(&raw)
        .map_err(|e| CliError::data(format!("{}: {e}", dir.join(CORPUS_OPTIONS_FILE).display())))?;
    let spec = CorpusSpec::synthetic(&corpus.options, corpus.seed)?;
    let m: ModelSettings = typed(s)?;
    let config = ModelConfig {
        vocab: corpus.options.vocab,
        feat_in: corpus.options.feat,
        dim: m.dim,
        feat_enc: m.feat_enc,
        projector_hidden: m.projector_hidden,
        layers: m.layers,
        heads: m.heads,
        ffn: m.ffn,
        max_positions: m.max_positions,
        lora_rank: m.lora_rank,
    };
    let opts = PretrainOptions {
        steps: get(s, "steps")?,
        batch: get(s, "batch")?,
        peak_lr: get(s, "lr")?,
        warmup: get(s, "warmup")?,
        seed,
        exec: Exec::default(),
    };
    let text = lm_corpus(&spec, get(s, "sentences")?, seed);
    let mut model = AsrModel::new(config, seed)?;
    let losses = pretrain_lm(&mut model, &text, &opts)?;
    let adam = Adam::new(opts.peak_lr, opts.warmup);
    run.write("lm.ckpt", &encode_checkpoint(&model, &adam, None)?)?;
    let rows: Vec<LossRow> = losses.iter().enumerate().map(|(i, &loss)| LossRow { step: i + 1, loss }).collect();
    run.write_csv("metrics.csv", &rows)?;
    println!("pretrained LM: final batch loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
    Ok(None)
}

fn train(s: &Settings, run: &mut Run) -> CliResult<Option<Vec<u64>>> {
    let plan = plan_from(s)?;
    let init = PathBuf::from(plan.init.clone().unwrap_or_default());
    let ckpt = load_ckpt(run, &init)?;
    let mut state = match (plan.stage, &ckpt.plan) {
        (1, None) => TrainState::from_pretrained(ckpt.model, plan.clone())?,
        (1, Some(_)) => {
            return Err(CliError::usage(format!(
                "stage 1 starts from a pretrained LM checkpoint, but {} is a training checkpoint",
                init.display()
            )))
        }
        (_, None) => {
            return Err(CliError::usage(format!(
                "stage 2 starts from a stage-1 checkpoint, but {} is a pretrained LM",
                init.display()
            )))
        }
        (_, Some(_)) => ckpt.into_state()?.continue_with(plan.clone())?,
    };
    let corpus = load_corpus(run, s)?;
    let train = split_of(&corpus, Split::Train);
    let opts = TrainOptions {
        exec: Exec::default(),
        max_steps: get_opt(s, "max_steps")?,
    };
    let metrics = match train_stage(&mut state, &train, &opts) {
        Ok(m) => m,
        Err(e) => {
            let e = CliError::from(e);
            if e.kind == Kind::Numerical {
                let bytes = encode_checkpoint(&state.model, &state.adam, Some(&state.plan))?;
                run.write("last_good.ckpt", &bytes)?;
            }
            return Err(e);
        }
    };
    run.write("model.ckpt", &encode_checkpoint(&state.model, &state.adam, Some(&state.plan))?)?;
    run.write_csv("metrics.csv", &metrics)?;
    run.write("plan.cfg", state.plan.to_config().as_bytes())?;
    println!(
        "{}: {} steps, final loss {:.4}",
        state.plan.label(),
        metrics.len(),
        metrics.last().map_or(f64::NAN, |m| m.loss)
    );
    Ok(None)
}

fn trained(ckpt: Checkpoint, path: &str) -> CliResult<TrainState> {
    if ckpt.plan.is_none() {
        return Err(CliError::usage(format!("{path} is a pretrained LM; evaluate a trained checkpoint")));
    }
    Ok(ckpt.into_state()?)
}

#[derive(Serialize)]
struct EvalRow {
    id: String,
    reference: String,
    hypothesis: String,
    log_prob: f64,
    terminated: bool,
    edits: usize,
}

#[derive(Serialize)]
struct EvalSummary {
    split: &'static str,
    decoder: String,
    utterances: usize,
    reference_tokens: usize,
    edits: usize,
    wer: f64,
}

fn eval(s: &Settings, run: &mut Run) -> CliResult<Option<Vec<u64>>> {
    let ckpt_path: String = get(s, "ckpt")?;
    let state = trained(load_ckpt(run, Path::new(&ckpt_path))?, &ckpt_path)?;
    let corpus = load_corpus(run, s)?;
    let split = split_arg(s)?;
    let utts = split_of(&corpus, split);
    if utts.is_empty() {
        return Err(CliError::data(format!("split {} is empty", split.as_str())));
    }
    let max_len: usize = get(s, "max_len")?;
    let beam: usize = get(s, "beam")?;
    let use_greedy: bool = get(s, "greedy")?;
    let (model, q) = (&state.model, state.plan.quantizer);
    let result = if use_greedy {
        evaluate_with(&utts, Exec::default(), |f| greedy(model, f, &q, max_len))?
    } else {
        evaluate_with(&utts, Exec::default(), |f| beam_search(model, f, &q, beam, max_len))?
    };
    let rows: Vec<EvalRow> = result
        .utterances
        .iter()
        .map(|u| EvalRow {
            id: u.id.clone(),
            reference: tokens_text(&u.reference),
            hypothesis: tokens_text(&u.hypothesis),
            log_prob: u.log_prob,
            terminated: u.terminated,
            edits: u.edits,
        })
        .collect();
    run.write_csv("utterances.csv", &rows)?;
    let decoder = if use_greedy { "greedy".to_string() } else { format!("beam{beam}") };
    let summary = EvalSummary {
        split: split.as_str(),
        decoder,
        utterances: rows.len(),
        reference_tokens: result.reference_tokens,
        edits: result.edits,
        wer: result.wer(),
    };
    println!("{} {} WER {:.6}", summary.split, summary.decoder, summary.wer);
    run.write_csv("summary.csv", &[summary])?;
    Ok(None)
}

struct ProbeInputs {
    state: TrainState,
    utts: Vec<Utterance>,
    source: String,
}

fn probe_inputs(s: &Settings, run: &mut Run) -> CliResult<ProbeInputs> {
    let ckpt_path: String = get(s, "ckpt")?;
    let state = trained(load_ckpt(run, Path::new(&ckpt_path))?, &ckpt_path)?;
    let corpus = load_corpus(run, s)?;
    let limit: usize = get(s, "limit")?;
    let utts: Vec<Utterance> = split_of(&corpus, split_arg(s)?).into_iter().take(limit).cloned().collect();
    if utts.is_empty() {
        return Err(CliError::data("no utterances to probe"));
    }
    let source: String = get(s, "source")?;
    if source != "projected" && source != "quantized" {
        return Err(CliError::usage(format!("source must be projected or quantized, got {source:?}")));
    }
    Ok(ProbeInputs { state, utts, source })
}

fn audio_rows(p: &ProbeInputs, u: &Utterance) -> CliResult<Tensor> {
    let q = p.state.model.quantized_audio(&u.frames, &p.state.plan.quantizer)?;
    Ok(if p.source == "projected" { q.projected } else { q.embeddings })
}

#[derive(Serialize)]
struct TokenRow {
    utterance: String,
    reference: String,
    position: usize,
    rank: usize,
    token: usize,
    similarity: f64,
}

fn probe_tokens(s: &Settings, run: &mut Run) -> CliResult<Option<Vec<u64>>> {
    let p = probe_inputs(s, run)?;
    let k: usize = get(s, "k")?;
    let table = p.state.model.store.value(p.state.model.decoder.embed);
    let mut rows = Vec::new();
    for u in &p.utts {
        let top = nearest_tokens(&audio_rows(&p, u)?, table, k)?;
        for (position, list) in top.iter().enumerate() {
            for (rank, &(token, similarity)) in list.iter().enumerate() {
                rows.push(TokenRow {
                    utterance: u.id.clone(),
                    reference: tokens_text(&u.tokens),
                    position,
                    rank: rank + 1,
                    token,
                    similarity,
                });
            }
        }
    }
    run.write_csv("tokens.csv", &rows)?;
    println!("{} nearest-token rows", rows.len());
    Ok(None)
}

#[derive(Serialize)]
struct ProjectionRow {
    kind: &'static str,
    utterance: String,
    position: usize,
    token: Option<usize>,
    x: f64,
    y: f64,
}

fn probe_project(s: &Settings, run: &mut Run) -> CliResult<Option<Vec<u64>>> {
    let p = probe_inputs(s, run)?;
    let table = p.state.model.store.value(p.state.model.decoder.embed);
    let mut points: Vec<Vec<f64>> = Vec::new();
    let mut meta = Vec::new();
    for u in &p.utts {
        let audio = audio_rows(&p, u)?;
        for r in 0..audio.rows() {
            points.push(audio.row(r).to_vec());
            meta.push(("audio", u.id.clone(), r, None));
        }
        for (i, &t) in u.tokens.iter().enumerate() {
            points.push(table.row(t).to_vec());
            meta.push(("text", u.id.clone(), i, Some(t)));
        }
    }
    let xy = project_2d(&Tensor::from_rows(&points).map_err(vqbridge::Error::from)?)?;
    let rows: Vec<ProjectionRow> = meta
        .into_iter()
        .enumerate()
        .map(|(i, (kind, utterance, position, token))| ProjectionRow {
            kind,
            utterance,
            position,
            token,
            x: xy.get2(i, 0),
            y: xy.get2(i, 1),
        })
        .collect();
    run.write_csv("projection.csv", &rows)?;
    println!("projected {} points", rows.len());
    Ok(None)
}

#[derive(Serialize)]
struct UsageRow {
    token: usize,
    usage: f64,
    share: f64,
}

#[derive(Serialize)]
struct StatsSummary {
    mode: String,
    usage_source: &'static str,
    frames: usize,
    entropy: f64,
    modality_gap: f64,
}

fn probe_stats(s: &Settings, run: &mut Run) -> CliResult<Option<Vec<u64>>> {
    let p = probe_inputs(s, run)?;
    let model = &p.state.model;
    let q = p.state.plan.quantizer;
    let table = model.store.value(model.decoder.embed);
    // With the quantizer off, usage falls back to nearest-entry assignment.
    let mut usage = Vec::new();
    let usage_source = if q.mode == QuantMode::Off { "nearest" } else { "quantizer" };
    for u in &p.utts {
        let quant = model.quantized_audio(&u.frames, &q)?;
        match quant.usage {
            Some(rows) => usage.push(rows),
            None => {
                let top = nearest_tokens(&quant.projected, table, 1)?;
                let mut rows = Tensor::zeros(&[top.len(), table.rows()]);
                for (r, list) in top.iter().enumerate() {
                    rows.row_mut(r)[list[0].0] = 1.0;
                }
                usage.push(rows);
            }
        }
    }
    let stats = codebook_stats(usage.iter())?;
    let total: f64 = stats.histogram.iter().sum();
    let rows: Vec<UsageRow> = stats
        .histogram
        .iter()
        .enumerate()
        .map(|(token, &h)| UsageRow {
            token,
            usage: h,
            share: if total > 0.0 { h / total } else { 0.0 },
        })
        .collect();
    run.write_csv("codebook.csv", &rows)?;
    let refs: Vec<&Utterance> = p.utts.iter().collect();
    let gap = modality_gap(&utterance_means(model, &refs, &q, Exec::default())?)?;
    let summary = StatsSummary {
        mode: q.mode.to_string(),
        usage_source,
        frames: stats.frames,
        entropy: stats.entropy,
        modality_gap: gap,
    };
    println!(
        "codebook entropy {:.4} nats over {} frames, modality gap {:.4}",
        summary.entropy, summary.frames, summary.modality_gap
    );
    run.write_csv("summary.csv", &[summary])?;
    Ok(None)
}

fn gradcheck(s: &Settings, run: &mut Run) -> CliResult<Option<Vec<u64>>> {
    let results = gradient_suite(get(s, "seed")?, Exec::default());
    run.write_csv("gradcheck.csv", &results)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    println!(
        "{} of {} gradient checks passed (step {STEP:e}, tolerance {TOLERANCE:e})",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        return Err(CliError::numerical(format!("gradient checks failed: {}", failed.join(", "))));
    }
    Ok(None)
}

fn matrix(s: &Settings, run: &mut Run) -> CliResult<Option<Vec<u64>>> {
    let spec_path = PathBuf::from(get::<String>(s, "spec")?);
    let text = String::from_utf8(run.read_input(&spec_path)?)
        .map_err(|_| CliError::data(format!("{} is not UTF-8", spec_path.display())))?;
    let spec = MatrixSpec::parse(&text)
        .map_err(|e| CliError::usage(format!("{}: {}", spec_path.display(), CliError::from(e).message)))?;
    let lm_path = PathBuf::from(get::<String>(s, "lm")?);
    let lm = load_ckpt(run, &lm_path)?;
    if lm.plan.is_some() {
        return Err(CliError::usage(format!("{} is not a pretrained LM checkpoint", lm_path.display())));
    }
    let corpus = load_corpus(run, s)?;
    let opts = MatrixOptions {
        exec: Exec::default(),
        max_steps: get_opt(s, "max_steps")?,
    };
    let out = run_matrix(&spec, &lm.model, &corpus, &opts, &mut |line| eprintln!("{line}"))?;
    run.write_csv("matrix.csv", &out.rows)?;
    let summaries = out.summaries();
    run.write_csv("summary.csv", &summaries)?;
    for (row, metrics) in out.rows.iter().zip(&out.metrics) {
        run.write_csv(&format!("metrics/{}-seed{}.csv", row.chain, row.seed), metrics)?;
    }
    for c in &summaries {
        println!(
            "{:<16} id WER {:.4}  ood WER {:.4}  degradation {:.3}  gap {:.4}",
            c.chain, c.id_wer, c.ood_wer, c.degradation, c.id_gap
        );
    }
    Ok(Some(spec.seeds))
}
