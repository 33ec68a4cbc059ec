use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::{QuantMode, QuantizerConfig, Stage, TopK};

/// One training stage: what is quantized, what trains, and for how long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub stage: u8,
    pub quantizer: QuantizerConfig,
    pub peak_lr: f64,
    pub warmup: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Checkpoint the stage starts from.
    pub init: Option<String>,
    pub seed: u64,
}

/// Recognized config keys, in canonical order.
pub const PLAN_KEYS: [&str; 12] = [
    "stage",
    "mode",
    "k",
    "renormalize",
    "temperature",
    "codebook",
    "lr",
    "warmup",
    "epochs",
    "batch",
    "init",
    "seed",
];

impl StagePlan {
    /// Stage defaults: 10 epochs at peak 1e-4 for stage 1, 2 epochs at 1e-5
    /// for stage 2; 100 warmup steps and batches of 16 for both.
    pub fn defaults(stage: u8) -> Self {
        let two = stage == 2;
        Self {
            stage,
            quantizer: QuantizerConfig {
                mode: if two { QuantMode::Soft } else { QuantMode::Hard },
                k: if two { TopK::K(10) } else { TopK::All },
                renormalize_topk: false,
                temperature: 1.0,
                codebook_trainable: two,
            },
            peak_lr: if two { 1e-5 } else { 1e-4 },
            warmup: 100,
            epochs: if two { 2 } else { 10 },
            batch_size: 16,
            init: None,
            seed: 0,
        }
    }

    /// Builds a plan from `key=value` pairs; later pairs win. The stage
    /// defaults are chosen from the last `stage` pair (1 when absent).
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)> + Clone) -> Result<Self> {
        let mut stage = 1;
        for (k, v) in pairs.clone() {
            if k == "stage" {
                stage = parse::<u8>(k, v)?;
            }
        }
        let mut plan = Self::defaults(stage);
        for (k, v) in pairs {
            plan.set(k, v)?;
        }
        plan.validate()?;
        Ok(plan)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let q = &mut self.quantizer;
        match key {
            "stage" => self.stage = parse(key, value)?,
            "mode" => q.mode = value.parse()?,
            "k" => q.k = value.parse()?,
            "renormalize" => q.renormalize_topk = parse(key, value)?,
            "temperature" => q.temperature = parse(key, value)?,
            "codebook" => {
                q.codebook_trainable = match value {
                    "trainable" => true,
                    "frozen" => false,
                    _ => {
                        return Err(Error::config(format!(
                            "codebook must be frozen or trainable, got {value:?}"
                        )))
                    }
                }
            }
            "lr" => self.peak_lr = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch_size = parse(key, value)?,
            "init" => self.init = (!value.is_empty()).then(|| value.to_string()),
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown plan key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.stage == 1 && self.quantizer.codebook_trainable {
            return Err(Error::config(
                "stage 1 trains against a fixed codebook; a trainable codebook needs stage 2",
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.peak_lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be at least 1"));
        }
        if !(self.quantizer.temperature > 0.0 && self.quantizer.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }

    pub fn quant_stage(&self) -> Stage {
        if self.stage == 1 {
            Stage::One
        } else {
            Stage::Two
        }
    }

    /// Canonical `key=value` lines.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let q = &self.quantizer;
        vec![
            ("stage", self.stage.to_string()),
            ("mode", q.mode.to_string()),
            ("k", q.k.to_string()),
            ("renormalize", q.renormalize_topk.to_string()),
            ("temperature", q.temperature.to_string()),
            ("codebook", if q.codebook_trainable { "trainable" } else { "frozen" }.to_string()),
            ("lr", self.peak_lr.to_string()),
            ("warmup", self.warmup.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch_size.to_string()),
            ("init", self.init.clone().unwrap_or_default()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_config(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Short human label, e.g. `stage2-soft(k=10,trainable)`.
    pub fn label(&self) -> String {
        let q = &self.quantizer;
        let book = if q.codebook_trainable { "trainable" } else { "frozen" };
        match q.mode {
            QuantMode::Off => format!("stage{}-off", self.stage),
            _ => format!("stage{}-{}(k={},{book})", self.stage, q.mode, q.k),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
/// Errors name the 1-based line.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}: expected key=value, got {raw:?}", i + 1)));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Later keys replace earlier ones; order of first appearance is kept.
pub fn merge_pairs(layers: &[Vec<(String, String)>]) -> Vec<(String, String)> {
    let mut order = Vec::new();
    let mut values = BTreeMap::new();
    for layer in layers {
        for (k, v) in layer {
            if !values.contains_key(k) {
                order.push(k.clone());
            }
            values.insert(k.clone(), v.clone());
        }
    }
    order.into_iter().map(|k| {
        let v = values[&k].clone();
        (k, v)
    }).collect()
}
