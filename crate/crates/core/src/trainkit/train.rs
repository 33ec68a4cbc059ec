use rand::seq::SliceRandom;
use serde::Serialize;

use super::StagePlan;
use crate::autograd::Tensor;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::evalprobe::codebook_stats;
use crate::model::{AsrModel, ParamGroup};
use crate::nn::{Adam, ParamGrads};
use crate::parallel::{batch_gradients_with, Exec};
use crate::quantizer::QuantMode;
use crate::rng::derived;

/// Model, optimizer and the plan they are being trained under.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: AsrModel,
    pub adam: Adam,
    pub plan: StagePlan,
}

impl TrainState {
    /// Stage-1 start from a pretrained LM: fresh projector, encoder stub and
    /// LoRA seeded from the plan, codebook copied from the embedding table.
    pub fn from_pretrained(mut model: AsrModel, plan: StagePlan) -> Result<Self> {
        plan.validate()?;
        model.prepare_asr(plan.seed)?;
        let adam = Adam::new(plan.peak_lr, plan.warmup);
        Ok(Self { model, adam, plan })
    }

    /// Continues from a trained state under a new plan with a fresh optimizer.
    /// Parameter values carry over unchanged.
    pub fn continue_with(mut self, plan: StagePlan) -> Result<Self> {
        plan.validate()?;
        if !self.model.decoder.has_lora() {
            return Err(Error::config("stage 2 must start from a stage-1 checkpoint"));
        }
        self.adam = Adam::new(plan.peak_lr, plan.warmup);
        self.plan = plan;
        Ok(self)
    }

    /// Trainable groups for the current plan.
    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        let mut groups = vec![ParamGroup::Projector, ParamGroup::Lora];
        if self.plan.stage == 2 && self.plan.quantizer.codebook_trainable {
            groups.push(ParamGroup::Codebook);
        }
        groups
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Empty when the quantizer is off.
    pub codebook_usage_entropy: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub exec: Exec,
    /// Stop after this many updates (all epochs when `None`).
    pub max_steps: Option<u64>,
}

/// Loss, gradients and per-utterance usage rows for one batch.
pub struct StepResult {
    pub loss: f64,
    pub grads: ParamGrads,
    pub usage: Vec<Option<Tensor>>,
}

/// Gradients of the mean batch loss under the state's plan, without updating.
pub fn step_gradients(state: &TrainState, batch: &[&Utterance], exec: Exec) -> Result<StepResult> {
    let model = &state.model;
    let q = state.plan.quantizer;
    let stage = state.plan.quant_stage();
    let (loss, grads, usage) = batch_gradients_with(exec, &model.store, batch, |b, u| {
        let out = model.forward_asr(b, &u.frames, &u.tokens, &q, stage)?;
        let usage = out.quant.usage_rows();
        Ok((out.loss, usage))
    })?;
    Ok(StepResult { loss, grads, usage })
}

/// Runs the state's plan over `train`.
///
/// Only the plan's trainable set changes. A non-finite loss or gradient stops
/// the run before any update from that batch is applied, so `state` holds the
/// last good step when an error is returned.
pub fn train_stage(state: &mut TrainState, train: &[&Utterance], opts: &TrainOptions) -> Result<Vec<MetricRow>> {
    let plan = state.plan.clone();
    plan.validate()?;
    plan.quantizer.validate(state.model.config.vocab)?;
    if train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    if !state.model.decoder.has_lora() {
        return Err(Error::config("the model has no LoRA adapters; start from a pretrained LM"));
    }
    let groups = state.trainable_groups();
    state.model.set_trainable(&groups);

    let mut rng = derived(plan.seed, &format!("stage{}-order", plan.stage));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut metrics = Vec::new();
    let mut done = 0u64;
    'epochs: for _ in 0..plan.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(plan.batch_size) {
            if opts.max_steps.is_some_and(|m| done >= m) {
                break 'epochs;
            }
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| train[i]).collect();
            let step = step_gradients(state, &batch, opts.exec)?;
            if !step.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss is {} at step {}",
                    step.loss,
                    state.adam.step + 1
                )));
            }
            state.adam.update(&mut state.model.store, &step.grads)?;
            done += 1;
            let entropy = match plan.quantizer.mode {
                QuantMode::Off => None,
                _ => Some(codebook_stats(step.usage.iter().flatten())?.entropy),
            };
            metrics.push(MetricRow {
                step: state.adam.step,
                loss: step.loss,
                lr: crate::nn::lr_at(state.adam.step, plan.peak_lr, plan.warmup),
                codebook_usage_entropy: entropy,
            });
        }
    }
    Ok(metrics)
}

pub fn write_metrics_csv<W: std::io::Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::data(e.to_string()))
}
