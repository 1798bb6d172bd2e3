//! The toy compositional experiment end to end: pretrain a base on copying,
//! train one LoRA per task, merge them every way, calibrate the linear merge,
//! and score each strategy on held-out compositional data.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, ModelSpec};
use crate::calibration::{CalibVariant, SharedScope, DEFAULT_CALIB_RANK};
use crate::error::{Error, Result};
use crate::merge::{merge_linear, uniform_weights, MergeSpec, Strategy};
use crate::metrics::{Metric, Tokenization};
use crate::model::train::CalibOptions;
use crate::model::{
    eval_strategy, merge_with_data, pretrain_base, train_calibration, train_single_task_lora, Artifacts, EvalReport,
    EvalStrategy, ToyModel, TrainConfig,
};
use crate::rng::splitmix64;
use crate::tasks::{gen_dataset, gen_dataset_with, ComposedTask, Dataset, InputStyle, TaskRole, TaskSpec};

fn copy(x: &str) -> String {
    x.to_string()
}

/// The pretraining task: reproduce the input, mixed case.
pub fn copy_task() -> TaskSpec {
    TaskSpec {
        name: "copy",
        role: TaskRole::Auxiliary,
        transform: copy,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Task names in application order.
    pub tasks: Vec<String>,
    pub spec: ModelSpec,
    pub base: TrainConfig,
    pub base_examples: usize,
    pub lora: TrainConfig,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub task_examples: usize,
    pub calib: TrainConfig,
    pub calib_rank: usize,
    pub calib_examples: usize,
    pub test_examples: usize,
    pub merge_density: f32,
    /// Also train an adapter on the composed task directly.
    pub joint_expert: bool,
    /// Also run the data-driven merges.
    pub data_merges: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: vec!["first_half".into(), "caesar1".into()],
            spec: ModelSpec::toy(),
            base: TrainConfig {
                lr: 3e-3,
                steps: 2000,
                batch_size: 16,
                ..TrainConfig::default()
            },
            base_examples: 20_000,
            lora: TrainConfig {
                lr: 1e-3,
                steps: 800,
                batch_size: 16,
                ..TrainConfig::default()
            },
            lora_rank: 8,
            lora_alpha: 16.0,
            task_examples: 4000,
            calib: TrainConfig {
                lr: 3e-3,
                steps: 3000,
                batch_size: 32,
                ..TrainConfig::default()
            },
            calib_rank: DEFAULT_CALIB_RANK,
            calib_examples: 2000,
            test_examples: 200,
            merge_density: 0.5,
            joint_expert: false,
            data_merges: false,
        }
    }
}

impl ExperimentConfig {
    fn derived(&self, stream: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(stream))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seed: u64,
    pub task: String,
    pub reports: Vec<EvalReport>,
    pub seconds: f64,
}

impl ExperimentResult {
    pub fn report(&self, strategy: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.strategy == strategy)
    }

    pub fn score(&self, strategy: &str, metric: Metric) -> f64 {
        self.report(strategy).map_or(f64::NAN, |r| r.get(metric))
    }
}

/// Pretrains the copy base used by every downstream step.
pub fn pretrain_copy_base(cfg: &ExperimentConfig) -> Result<ToyModel> {
    let style = InputStyle {
        upper_prob: 0.3,
        ..InputStyle::default()
    };
    let data = gen_dataset_with(
        &ComposedTask::single(copy_task()),
        cfg.base_examples,
        cfg.derived(1),
        [1.0, 0.0, 0.0],
        &style,
    )?;
    let base_cfg = TrainConfig {
        seed: cfg.derived(2),
        ..cfg.base.clone()
    };
    Ok(pretrain_base(&cfg.spec, &data.train, &base_cfg)?.0)
}

/// Training split for a single task or composition.
pub fn task_data(task: &ComposedTask, n: usize, seed: u64) -> Result<Dataset> {
    Ok(gen_dataset(task, n, seed, [1.0, 0.0, 0.0])?.train)
}

pub fn train_task_adapter(model: &ToyModel, task: &ComposedTask, cfg: &ExperimentConfig, stream: u64) -> Result<Adapter> {
    let data = task_data(task, cfg.task_examples, cfg.derived(stream))?;
    let train = TrainConfig {
        seed: cfg.derived(3),
        ..cfg.lora.clone()
    };
    Ok(train_single_task_lora(model, &data, cfg.lora_rank, cfg.lora_alpha, &train)?.0)
}

/// Merge strategies compared against calibration.
pub const BASELINE_MERGES: [Strategy; 4] = [Strategy::Linear, Strategy::Ties, Strategy::Dare, Strategy::Slerp];

/// Runs the full protocol for one seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let start = Instant::now();
    let names: Vec<&str> = cfg.tasks.iter().map(String::as_str).collect();
    let composed = ComposedTask::from_names(&names)?;
    if composed.tasks.len() < 2 {
        return Err(Error::invalid("the experiment needs at least two tasks"));
    }
    let base = pretrain_copy_base(cfg)?;
    info!("seed {}: base ready after {:.1}s", cfg.seed, start.elapsed().as_secs_f64());

    let adapters = composed
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let a = train_task_adapter(&base, &ComposedTask::single(t.clone()), cfg, 10 + 2 * i as u64)?;
            Ok(a.with_task_name(t.name))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Adapter> = adapters.iter().collect();
    info!("seed {}: adapters ready after {:.1}s", cfg.seed, start.elapsed().as_secs_f64());

    let label = composed.label();
    let compo_train = task_data(&composed, cfg.calib_examples, cfg.derived(30))?;
    let test = gen_dataset(&composed, cfg.test_examples, cfg.derived(31), [0.0, 0.0, 1.0])?.test;
    let linear = merge_linear(&cfg.spec, &refs, &uniform_weights(refs.len()))?;

    let mut art = Artifacts {
        adapters: adapters.clone(),
        linear: Some(linear.clone()),
        ..Artifacts::default()
    };
    for (i, variant) in [CalibVariant::Bias, CalibVariant::Lora].into_iter().enumerate() {
        let opts = CalibOptions {
            variant,
            rank: cfg.calib_rank,
            scope: SharedScope::PerCompositionalTask,
            task_label: label.clone(),
        };
        let train = TrainConfig {
            seed: cfg.derived(40 + i as u64),
            ..cfg.calib.clone()
        };
        let (set, _) = train_calibration(&base, &linear, &opts, &compo_train, &train)?;
        art.calibrations.insert(variant, set);
    }
    info!("seed {}: calibration ready after {:.1}s", cfg.seed, start.elapsed().as_secs_f64());

    let mut strategies = vec![EvalStrategy::ZeroShot, EvalStrategy::MainLora, EvalStrategy::AuxLora];
    // Slerp is defined for exactly two adapters.
    for s in BASELINE_MERGES.into_iter().filter(|&s| s != Strategy::Slerp || refs.len() == 2) {
        strategies.push(EvalStrategy::Merged(MergeSpec {
            density: cfg.merge_density,
            seed: cfg.derived(50),
            ..MergeSpec::new(s)
        }));
    }
    if cfg.data_merges {
        for s in [Strategy::Lorahub, Strategy::LmCocktail, Strategy::Dam] {
            let ms = MergeSpec {
                seed: cfg.derived(51),
                ..MergeSpec::new(s)
            };
            let merged = merge_with_data(&base, &refs, &ms, &compo_train.take(200))?;
            art.merged.insert(s.name().to_string(), merged);
            strategies.push(EvalStrategy::Merged(ms));
        }
    }
    strategies.push(EvalStrategy::Calibrated(CalibVariant::Bias));
    strategies.push(EvalStrategy::Calibrated(CalibVariant::Lora));
    strategies.push(EvalStrategy::MultiStep);
    if cfg.joint_expert {
        art.joint = Some(train_task_adapter(&base, &composed, cfg, 60)?.with_task_name(label.clone()));
        strategies.push(EvalStrategy::JointExpert);
    }

    let reports = strategies
        .iter()
        .map(|s| eval_strategy(s, &base, &art, &test, Tokenization::Chars))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentResult {
        seed: cfg.seed,
        task: label,
        reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Per-strategy mean of `metric` over several runs, in the order of the first run.
pub fn average(results: &[ExperimentResult], metric: Metric) -> Vec<(String, f64)> {
    let Some(first) = results.first() else {
        return Vec::new();
    };
    first
        .reports
        .iter()
        .map(|r| {
            let mean = results.iter().map(|res| res.score(&r.strategy, metric)).sum::<f64>() / results.len() as f64;
            (r.strategy.clone(), mean)
        })
        .collect()
}
