//! Encoder stub → stack-5 downsampler → projector → quantizer → causal decoder.

mod decoder;
mod layout;
mod pretrain;


pub use decoder::{DecoderBlock, DecoderLM};
pub use layout::{assemble_sequence, Assembled, PromptLayout};
pub use pretrain::{lm_sequence_loss, pretrain_lm, PretrainOptions};

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Binder, FeedForward, ParamId, ParamStore};
use crate::quantizer::{hard_quantize_stage1, quantize, QuantMode, QuantizerConfig, QuantizerOutput, Stage};
use crate::rng::derived;

pub const PAD: usize = 0;
pub const USER: usize = 1;
pub const ASSISTANT: usize = 2;
pub const END: usize = 3;
/// First non-special token id.
pub const FIRST_CONTENT: usize = 4;

/// Frames stacked per downsampled position.
pub const STACK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub feat_in: usize,
    pub feat_enc: usize,
    pub projector_hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub lora_rank: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            dim: 64,
            feat_in: 16,
            feat_enc: 16,
            projector_hidden: 128,
            layers: 2,
            heads: 4,
            ffn: 256,
            max_positions: 256,
            lora_rank: 8,
        }
    }
}

/// Parameter families that training stages switch on and off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Projector,
    DecoderBase,
    Lora,
    Codebook,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name == "codebook" {
            ParamGroup::Codebook
        } else if name.starts_with("encoder.") {
            ParamGroup::Encoder
        } else if name.starts_with("projector.") {
            ParamGroup::Projector
        } else if name.contains(".lora_") {
            ParamGroup::Lora
        } else {
            ParamGroup::DecoderBase
        }
    }
}

/// Frozen per-frame featurizer: `tanh(x·Wᵀ + b)`.
#[derive(Debug, Clone)]
pub struct EncoderStub {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl EncoderStub {
    pub fn encode(&self, store: &ParamStore, frames: &Tensor) -> Result<Tensor> {
        let w = store.value(self.weight);
        if frames.shape().len() != 2 || frames.cols() != w.cols() {
            return Err(Error::data(format!(
                "encoder expects T×{} frames, got {:?}",
                w.cols(),
                frames.shape()
            )));
        }
        let mut out = frames.matmul(w, true)?;
        let bias = store.value(self.bias).data();
        let cols = out.cols();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x = (*x + bias[i % cols]).tanh();
        }
        Ok(out)
    }
}

/// Concatenates each run of [`STACK`] consecutive frames feature-wise; the
/// last group is zero-padded.
pub fn downsample(frames: &Tensor) -> Result<Tensor> {
    if frames.shape().len() != 2 || frames.rows() == 0 {
        return Err(Error::data(format!(
            "downsample needs a non-empty T×F matrix, got {:?}",
            frames.shape()
        )));
    }
    let (t, f) = (frames.rows(), frames.cols());
    let groups = t.div_ceil(STACK);
    let mut data = vec![0.0; groups * STACK * f];
    data[..t * f].copy_from_slice(frames.data());
    Ok(Tensor::new(&[groups, STACK * f], data)?)
}

/// Linear → relu → linear, from stacked features to the decoder width.
pub type Projector = FeedForward;

/// Value-only quantizer result for one utterance.
#[derive(Debug, Clone)]
pub struct QuantizedAudio {
    /// Projector output before quantization.
    pub projected: Tensor,
    /// Audio span handed to the decoder.
    pub embeddings: Tensor,
    pub indices: Option<Vec<usize>>,
    pub usage: Option<Tensor>,
}

/// Everything the decoder consumed and produced for one utterance.
pub struct AsrForward<'t> {
    pub quant: QuantizerOutput<'t>,
    pub assembled: Assembled<'t>,
    pub logits: Var<'t>,
    /// Masked cross-entropy over transcript and end positions.
    pub loss: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct AsrModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderStub,
    pub projector: Projector,
    pub decoder: DecoderLM,
    pub codebook: ParamId,
}

impl AsrModel {
    /// Randomly initialized model with LoRA disabled. Every parameter except
    /// the encoder starts trainable.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.vocab <= FIRST_CONTENT {
            return Err(Error::config(format!(
                "vocabulary of {} leaves no content tokens",
                config.vocab
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = derived(seed, "decoder");
        let decoder = DecoderLM::new(&mut store, &config, &mut rng)?;

        let mut rng = derived(seed, "encoder");
        let enc_std = 1.0 / (config.feat_in as f64).sqrt();
        let encoder = EncoderStub {
            weight: store.add(
                "encoder.weight",
                Tensor::randn(&[config.feat_enc, config.feat_in], enc_std, &mut rng),
                false,
            ),
            bias: store.add(
                "encoder.bias",
                Tensor::randn(&[config.feat_enc], 0.1, &mut rng),
                false,
            ),
        };
        let mut rng = derived(seed, "projector");
        let projector = Projector::new(
            &mut store,
            "projector",
            STACK * config.feat_enc,
            config.projector_hidden,
            config.dim,
            &mut rng,
        );
        let table = store.value(decoder.embed).clone();
        let codebook = store.add("codebook", table, false);
        Ok(Self {
            config,
            store,
            encoder,
            projector,
            decoder,
            codebook,
        })
    }

    /// Turns a pretrained LM into a stage-1-ready ASR model: re-seeds the
    /// encoder stub, projector and fresh LoRA adapters, copies the embedding
    /// table into the codebook, and freezes the decoder base.
    pub fn prepare_asr(&mut self, seed: u64) -> Result<()> {
        let cfg = self.config;
        let mut rng = derived(seed, "encoder");
        let enc_std = 1.0 / (cfg.feat_in as f64).sqrt();
        self.store.set_value(
            self.encoder.weight,
            Tensor::randn(&[cfg.feat_enc, cfg.feat_in], enc_std, &mut rng),
        );
        self.store
            .set_value(self.encoder.bias, Tensor::randn(&[cfg.feat_enc], 0.1, &mut rng));
        let mut rng = derived(seed, "projector");
        for fc in [&self.projector.fc1, &self.projector.fc2] {
            let std = 1.0 / (fc.d_in as f64).sqrt();
            self.store
                .set_value(fc.weight, Tensor::randn(&[fc.d_out, fc.d_in], std, &mut rng));
            self.store.set_value(fc.bias, Tensor::zeros(&[fc.d_out]));
        }
        let mut rng = derived(seed, "lora");
        self.decoder.attach_lora(&mut self.store, cfg.lora_rank, &mut rng)?;
        let table = self.store.value(self.decoder.embed).clone();
        self.store.set_value(self.codebook, table);
        self.set_trainable(&[ParamGroup::Projector, ParamGroup::Lora]);
        Ok(())
    }

    /// Marks exactly the parameters in `groups` as trainable.
    pub fn set_trainable(&mut self, groups: &[ParamGroup]) {
        let ids: Vec<_> = self
            .store
            .iter()
            .map(|(id, p)| (id, groups.contains(&ParamGroup::of(&p.name))))
            .collect();
        for (id, on) in ids {
            self.store.set_trainable(id, on);
        }
    }

    /// Encoder and downsampler outputs; neither carries gradient.
    pub fn stacked_features(&self, frames: &Tensor) -> Result<Tensor> {
        downsample(&self.encoder.encode(&self.store, frames)?)
    }

    /// Quantized audio span for one utterance.
    pub fn audio_embeddings<'t>(
        &self,
        b: &Binder<'t, '_>,
        frames: &Tensor,
        cfg: &QuantizerConfig,
        stage: Stage,
    ) -> Result<QuantizerOutput<'t>> {
        let stacked = b.tape().constant(self.stacked_features(frames)?);
        let z = self.projector.forward(b, stacked)?;
        quantize(z, b.param(self.codebook), cfg, stage)
    }

    pub fn forward_asr<'t>(
        &self,
        b: &Binder<'t, '_>,
        frames: &Tensor,
        transcript: &[usize],
        cfg: &QuantizerConfig,
        stage: Stage,
    ) -> Result<AsrForward<'t>> {
        self.check_tokens(transcript)?;
        let quant = self.audio_embeddings(b, frames, cfg, stage)?;
        let layout = PromptLayout::asr(quant.embeddings.shape()[0], transcript.to_vec());
        let assembled = assemble_sequence(
            &layout,
            quant.embeddings,
            b.param(self.decoder.embed),
            self.config.max_positions,
        )?;
        let logits = self.decoder.forward_embeddings(b, assembled.inputs)?;
        let loss = cross_entropy(logits, &assembled.targets, &assembled.mask)?;
        Ok(AsrForward {
            quant,
            assembled,
            logits,
            loss,
        })
    }

    /// Quantized audio span as plain values, for decoding and probing.
    /// Every parameter is treated as a constant.
    pub fn quantized_audio(&self, frames: &Tensor, cfg: &QuantizerConfig) -> Result<QuantizedAudio> {
        let tape = Tape::new();
        let frozen = self.store.frozen_view();
        let b = Binder::new(&tape, &frozen);
        let stacked = tape.constant(self.stacked_features(frames)?);
        let z = self.projector.forward(&b, stacked)?;
        let codebook = self.store.value(self.codebook);
        let out = match cfg.mode {
            QuantMode::Hard => hard_quantize_stage1(z, codebook)?,
            _ => quantize(z, tape.constant(codebook.clone()), cfg, Stage::Two)?,
        };
        Ok(QuantizedAudio {
            projected: (*z.value()).clone(),
            embeddings: (*out.embeddings.value()).clone(),
            usage: out.usage_rows(),
            indices: out.indices,
        })
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab) {
            Some(t) => Err(Error::data(format!(
                "token id {t} is outside the vocabulary of {}",
                self.config.vocab
            ))),
            None => Ok(()),
        }
    }
}
