mod commands;
mod error;
mod run;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::run::{hash_file, Manifest, Run};
use crate::settings::{pairs_of, read_config, resolve, Settings};

#[derive(Parser)]
#[command(name = "vqbridge", version, about = "Quantized speech-to-LM bridge: data, training, evaluation and probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Fresh directory that receives outputs and manifest.json.
    #[arg(long)]
    run_dir: PathBuf,
    /// key = value file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train, test-id and test-ood splits.
    GenData(GenData),
    /// Pretrain the decoder LM on text sampled from the corpus grammar.
    PretrainLm(PretrainLm),
    /// Run one training stage.
    Train(Train),
    /// Decode a split and report WER.
    Eval(Eval),
    /// Inspect audio embeddings of a trained checkpoint.
    Probe {
        #[command(subcommand)]
        probe: Probe,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck(Gradcheck),
    /// Train and evaluate every chain of a matrix spec for each seed.
    Matrix(Matrix),
    /// Repeat a recorded run and compare its outputs byte for byte.
    Replay(Replay),
}

#[derive(Subcommand)]
enum Probe {
    /// Nearest embedding-table tokens for each audio position.
    Tokens(ProbeArgs),
    /// 2-D PCA of audio positions and transcript embeddings.
    Project(ProbeArgs),
    /// Codebook usage histogram, entropy and modality gap.
    Stats(ProbeArgs),
}

#[derive(Args, Serialize)]
struct GenData {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    feat: Option<usize>,
    #[arg(long)]
    fan_out: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    min_frames: Option<usize>,
    #[arg(long)]
    max_frames: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    ood_noise: Option<f64>,
    #[arg(long)]
    ood_channel: Option<f64>,
    #[arg(long)]
    ood_offset: Option<f64>,
    #[arg(long)]
    ood_topic_shift: Option<f64>,
    /// Training utterances.
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    test_id: Option<usize>,
    #[arg(long)]
    test_ood: Option<usize>,
}

#[derive(Args, Serialize)]
struct PretrainLm {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// gen-data run directory.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    /// Number of sampled training sentences.
    #[arg(long)]
    sentences: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    feat_enc: Option<usize>,
    #[arg(long)]
    projector_hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long)]
    lora_rank: Option<usize>,
}

#[derive(Args, Serialize)]
struct Train {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Corpus file or gen-data run directory.
    #[arg(long)]
    data: Option<String>,
    /// Starting checkpoint: a pretrained LM for stage 1, a stage-1 model for stage 2.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stage: Option<u8>,
    /// off, hard or soft.
    #[arg(long)]
    mode: Option<String>,
    /// Top-k entries (a number or "all").
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    renormalize: Option<bool>,
    #[arg(long)]
    temperature: Option<f64>,
    /// frozen or trainable.
    #[arg(long)]
    codebook: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Stop after this many updates.
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args, Serialize)]
struct Eval {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    #[arg(long)]
    ckpt: Option<String>,
    #[arg(long)]
    data: Option<String>,
    /// id or ood.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Greedy decoding instead of beam search.
    #[arg(long, conflicts_with = "beam")]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    greedy: bool,
}

#[derive(Args, Serialize)]
struct ProbeArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    #[arg(long)]
    ckpt: Option<String>,
    #[arg(long)]
    data: Option<String>,
    /// id, ood or train.
    #[arg(long)]
    split: Option<String>,
    /// Nearest tokens per position.
    #[arg(long)]
    k: Option<usize>,
    /// Utterances to probe.
    #[arg(long)]
    limit: Option<usize>,
    /// projected (before quantization) or quantized.
    #[arg(long)]
    source: Option<String>,
}

#[derive(Args, Serialize)]
struct Gradcheck {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct Matrix {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Matrix spec file.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long)]
    data: Option<String>,
    /// Pretrained LM checkpoint.
    #[arg(long)]
    lm: Option<String>,
    /// Cap on updates per stage.
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Args)]
struct Replay {
    /// manifest.json of the run to repeat.
    #[arg(long)]
    manifest: PathBuf,
    /// Fresh directory for the repeated run.
    #[arg(long)]
    run_dir: PathBuf,
}

fn flags<T: Serialize>(args: &T) -> Vec<(String, String)> {
    pairs_of(args)
}

fn dispatch(command: Command) -> CliResult<(String, Common, Vec<(String, String)>)> {
    Ok(match command {
        Command::GenData(a) => ("gen-data".into(), a.common.clone(), flags(&a)),
        Command::PretrainLm(a) => ("pretrain-lm".into(), a.common.clone(), flags(&a)),
        Command::Train(a) => ("train".into(), a.common.clone(), flags(&a)),
        Command::Eval(a) => ("eval".into(), a.common.clone(), flags(&a)),
        Command::Probe { probe } => {
            let (name, a) = match probe {
                Probe::Tokens(a) => ("probe-tokens", a),
                Probe::Project(a) => ("probe-project", a),
                Probe::Stats(a) => ("probe-stats", a),
            };
            (name.into(), a.common.clone(), flags(&a))
        }
        Command::Gradcheck(a) => ("gradcheck".into(), a.common.clone(), flags(&a)),
        Command::Matrix(a) => ("matrix".into(), a.common.clone(), flags(&a)),
        Command::Replay(_) => unreachable!("replay is handled before dispatch"),
    })
}

fn execute_settled(command: &str, settings: Settings, run_dir: &Path, argv: Vec<String>) -> CliResult<Manifest> {
    let mut run = Run::create(run_dir)?;
    let extra = commands::execute(command, &settings, &mut run)?;
    let seeds = commands::seeds_of(command, &settings, &extra);
    run.finish(command, argv, settings, seeds)
}

fn replay(args: &Replay, argv: Vec<String>) -> CliResult<()> {
    let recorded = Manifest::load(&args.manifest)?;
    for input in &recorded.inputs {
        let now = hash_file(Path::new(&input.path))?;
        if now != input.sha256 {
            return Err(CliError::data(format!("input {} changed since the recorded run", input.path)));
        }
    }
    let s = commands::schema(&recorded.command)?;
    let settings = resolve(Vec::new(), Vec::new(), recorded.config.clone().into_iter().collect(), &s.known, &s.required)?;
    let fresh = execute_settled(&recorded.command, settings, &args.run_dir, argv)?;
    let mut mismatched = Vec::new();
    for out in &recorded.outputs {
        match fresh.outputs.iter().find(|a| a.path == out.path) {
            Some(a) if a.sha256 == out.sha256 => {}
            _ => mismatched.push(out.path.clone()),
        }
    }
    if !mismatched.is_empty() || fresh.outputs.len() != recorded.outputs.len() {
        return Err(CliError::numerical(format!(
            "replay differs from the recorded run: {}",
            mismatched.join(", ")
        )));
    }
    println!("replay matches: {} outputs identical", fresh.outputs.len());
    Ok(())
}

fn real_main(cli: Cli, argv: Vec<String>) -> CliResult<()> {
    if let Command::Replay(r) = &cli.command {
        return replay(r, argv);
    }
    let (command, common, flag_pairs) = dispatch(cli.command)?;
    let s = commands::schema(&command)?;
    let file = read_config(common.config.as_deref())?;
    let settings = resolve(s.defaults, file, flag_pairs, &s.known, &s.required)?;
    let settings = commands::finalize(&command, settings)?;
    execute_settled(&command, settings, &common.run_dir, argv)?;
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match real_main(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
