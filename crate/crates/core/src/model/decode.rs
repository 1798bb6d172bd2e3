//! Greedy decoding and evaluation of the compared strategies.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::engine;
use super::{deltas_from_tensors, vocab, Sequence, ToyModel};
use crate::adapter::Adapter;
use crate::calibration::{calibrated_deltas, CalibVariant, CalibrationSet};
use crate::error::{Error, Result};
use crate::merge::{self, merge_linear, uniform_weights, MergeSpec, MergedAdapter, Strategy};
use crate::metrics::{score, Metric, Tokenization};
use crate::tasks::Dataset;

/// Upper bound on generated tokens per decode pass.
pub const DEFAULT_MAX_NEW: usize = 24;

/// Argmax decoding from `prompt`. Stops after emitting `stop` (which is not
/// returned), after `max_len` tokens, or when the context is full. Ties go to
/// the lowest id.
pub fn decode_greedy(model: &ToyModel, prompt: &[usize], max_len: usize, stop: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let spec = model.spec();
    engine::check_ids(spec, prompt)?;
    let w = model.effective(None);
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_len && ids.len() < spec.context_len {
        let logits = engine::last_logits(spec, &w, &ids);
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        if best == stop {
            break;
        }
        out.push(best);
        ids.push(best);
    }
    Ok(out)
}

/// Decodes the output text for `input` (framed as `input SEP`).
pub fn generate(model: &ToyModel, input: &str, max_len: usize) -> Result<String> {
    let prompt = Sequence::prompt(input)?;
    Ok(vocab::decode(&decode_greedy(model, &prompt, max_len, vocab::STOP)?))
}

/// The compared ways of answering a compositional query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStrategy {
    ZeroShot,
    /// The adapter of the first task in the chain.
    MainLora,
    /// The adapter of the second task in the chain.
    AuxLora,
    Merged(MergeSpec),
    /// Linear merge plus trained calibration; `bias` is LC, `lora` is LC++.
    Calibrated(CalibVariant),
    /// Each task's adapter in turn, feeding decoded text forward.
    MultiStep,
    /// One adapter trained on the composed task directly.
    JointExpert,
}

impl EvalStrategy {
    pub fn label(&self) -> String {
        match self {
            EvalStrategy::ZeroShot => "zero_shot".into(),
            EvalStrategy::MainLora => "main_lora".into(),
            EvalStrategy::AuxLora => "aux_lora".into(),
            EvalStrategy::Merged(ms) => ms.strategy.name().into(),
            EvalStrategy::Calibrated(CalibVariant::Bias) => "lc".into(),
            EvalStrategy::Calibrated(CalibVariant::Lora) => "lc++".into(),
            EvalStrategy::MultiStep => "multi_step".into(),
            EvalStrategy::JointExpert => "joint_expert".into(),
        }
    }
}

impl fmt::Display for EvalStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for EvalStrategy {
    type Err = Error;

    /// Accepts the labels above, any merge strategy name, and
    /// `calibrated_bias` / `calibrated_lora` as aliases of `lc` / `lc++`.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "zero_shot" => EvalStrategy::ZeroShot,
            "main_lora" => EvalStrategy::MainLora,
            "aux_lora" => EvalStrategy::AuxLora,
            "lc" | "calibrated_bias" => EvalStrategy::Calibrated(CalibVariant::Bias),
            "lc++" | "calibrated_lora" => EvalStrategy::Calibrated(CalibVariant::Lora),
            "multi_step" => EvalStrategy::MultiStep,
            "joint_expert" => EvalStrategy::JointExpert,
            other => EvalStrategy::Merged(MergeSpec::new(other.parse::<Strategy>()?)),
        })
    }
}

/// Everything a strategy may need. Adapters are in task-application order.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub adapters: Vec<Adapter>,
    /// Precomputed merges keyed by strategy name; required for the
    /// data-driven strategies, optional otherwise.
    pub merged: BTreeMap<String, MergedAdapter>,
    /// The factor-form merge calibration was trained on. Defaults to the
    /// uniform linear merge of `adapters`.
    pub linear: Option<MergedAdapter>,
    pub calibrations: BTreeMap<CalibVariant, CalibrationSet>,
    pub joint: Option<Adapter>,
}

impl Artifacts {
    fn adapter(&self, i: usize, what: &str) -> Result<&Adapter> {
        self.adapters
            .get(i)
            .ok_or_else(|| Error::invalid(format!("strategy needs the {what} adapter")))
    }

    fn refs(&self) -> Vec<&Adapter> {
        self.adapters.iter().collect()
    }

    fn linear_merge(&self, model: &ToyModel) -> Result<MergedAdapter> {
        match &self.linear {
            Some(m) => Ok(m.clone()),
            None => {
                if self.adapters.is_empty() {
                    return Err(Error::invalid("strategy needs adapters to merge"));
                }
                merge_linear(model.spec(), &self.refs(), &uniform_weights(self.adapters.len()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub task: String,
    /// Mean scores as percentages, in [`Metric::ALL`] order.
    pub scores: Vec<(Metric, f64)>,
    /// Measured decode passes per example.
    pub passes_per_example: f64,
    pub predictions: Vec<String>,
}

impl EvalReport {
    pub fn get(&self, metric: Metric) -> f64 {
        self.scores.iter().find(|(m, _)| *m == metric).map_or(f64::NAN, |(_, s)| *s)
    }
}

fn attach(model: &ToyModel, merged: &MergedAdapter) -> Result<ToyModel> {
    model.with_deltas(deltas_from_tensors(&merged.materialize()?))
}

/// Models to run in sequence for `strategy`; one entry per decode pass.
pub fn strategy_models(strategy: &EvalStrategy, model: &ToyModel, art: &Artifacts) -> Result<Vec<ToyModel>> {
    let spec = model.spec();
    let base = model.without_deltas();
    let single = |a: &Adapter| attach(&base, &MergedAdapter::Factor(a.clone()));
    Ok(match strategy {
        EvalStrategy::ZeroShot => vec![base.clone()],
        EvalStrategy::MainLora => vec![single(art.adapter(0, "main")?)?],
        EvalStrategy::AuxLora => vec![single(art.adapter(1, "auxiliary")?)?],
        EvalStrategy::Merged(ms) => {
            let merged = match art.merged.get(ms.strategy.name()) {
                Some(m) => m.clone(),
                None if ms.strategy.needs_data() => {
                    return Err(Error::invalid(format!(
                        "strategy `{}` needs a precomputed merge",
                        ms.strategy.name()
                    )))
                }
                None => merge::merge(spec, &art.refs(), ms)?,
            };
            vec![attach(&base, &merged)?]
        }
        EvalStrategy::Calibrated(variant) => {
            let calib = art
                .calibrations
                .get(variant)
                .ok_or_else(|| Error::invalid(format!("strategy needs a {} calibration", variant.name())))?;
            if calib.variant() != *variant {
                return Err(Error::invalid("calibration variant does not match the strategy"));
            }
            let linear = art.linear_merge(model)?;
            vec![base.with_deltas(deltas_from_tensors(&calibrated_deltas(spec, &linear, calib)?))?]
        }
        EvalStrategy::MultiStep => {
            if art.adapters.len() < 2 {
                return Err(Error::invalid("multi_step needs at least two adapters"));
            }
            art.adapters.iter().map(single).collect::<Result<_>>()?
        }
        EvalStrategy::JointExpert => {
            let joint = art
                .joint
                .as_ref()
                .ok_or_else(|| Error::invalid("strategy needs a joint-expert adapter"))?;
            vec![single(joint)?]
        }
    })
}

/// Decodes every example of `data` under `strategy` and scores the outputs.
pub fn eval_strategy(
    strategy: &EvalStrategy,
    model: &ToyModel,
    art: &Artifacts,
    data: &Dataset,
    tok: Tokenization,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let models = strategy_models(strategy, model, art)?;
    let mut predictions = Vec::with_capacity(data.len());
    let mut passes = 0usize;
    for ex in &data.examples {
        let mut text = ex.input.clone();
        for m in &models {
            let room = m.spec().context_len.saturating_sub(text.chars().count() + 1);
            text = if room == 0 { String::new() } else { generate(m, &text, DEFAULT_MAX_NEW.min(room))? };
            passes += 1;
        }
        predictions.push(text);
    }
    let scores = Metric::ALL
        .iter()
        .map(|&metric| {
            let total: f64 = predictions
                .iter()
                .zip(&data.examples)
                .map(|(p, ex)| score(metric, p, &ex.output, tok))
                .sum();
            (metric, 100.0 * total / data.len() as f64)
        })
        .collect();
    Ok(EvalReport {
        strategy: strategy.label(),
        task: data.examples[0].task.clone(),
        scores,
        passes_per_example: passes as f64 / data.len() as f64,
        predictions,
    })
}
