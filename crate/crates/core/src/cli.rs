//! The `loracal` command line.
//!
//! Every subcommand takes `--config file.json`; values there fill in any flag
//! not given on the command line. Keys are the long flag names in snake case,
//! either at the top level or under an object named after the subcommand
//! (which wins over the top level). The default seed comes from
//! `LORACAL_SEED` when neither a flag nor the config sets one.
//!
//! Exit codes: 0 success, 1 invalid input, 2 I/O failure, 64 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::{Adapter, ModelSpec};
use crate::calibration::{CalibVariant, CalibrationSet, SharedScope, DEFAULT_CALIB_RANK};
use crate::error::{Error, Result};
use crate::experiment::{pretrain_copy_base, ExperimentConfig};
use crate::inspect::{inspect_with_ranges, shared_ranges};
use crate::merge::{self, MergeSpec, MergedAdapter, Strategy};
use crate::metrics::{Metric, Tokenization};
use crate::model::train::CalibOptions;
use crate::model::{
    eval_strategy, merge_with_data, train_calibration, train_single_task_lora, Artifacts, EvalStrategy, ToyModel,
    TrainConfig,
};
use crate::rng::splitmix64;
use crate::safetensors::Dtype;
use crate::tasks::{gen_dataset, load_jsonl, save_jsonl, ComposedTask, Dataset, Split};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

pub const SEED_ENV: &str = "LORACAL_SEED";
pub const MANIFEST_ENV: &str = "LORACAL_MANIFEST";
pub const DEFAULT_MANIFEST: &str = "runs.jsonl";

/// Learning rate and example budget used by `calibrate` unless overridden.
pub const CALIB_LR: f64 = 5e-4;
pub const CALIB_SUBSET: usize = 10_000;

#[derive(Debug, Parser)]
#[command(name = "loracal", version, about = "LoRA merging and learnable calibration")]
pub struct Cli {
    /// JSON file with default values for the subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run manifest to append to (JSONL).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate task datasets as JSONL, and optionally pretrain the toy base.
    GenToyData(GenArgs),
    /// Train a single-task LoRA adapter on a frozen toy base.
    TrainLora(TrainLoraArgs),
    /// Merge adapters.
    Merge(MergeArgs),
    /// Train calibration parameters on top of a linear merge.
    Calibrate(CalibrateArgs),
    /// Evaluate strategies on a test set and write CSV scores.
    Eval(EvalArgs),
    /// Per-site norms, spreads and histograms of a merged or calibrated update.
    Inspect(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenToyData(_) => "gen-toy-data",
            Command::TrainLora(_) => "train-lora",
            Command::Merge(_) => "merge",
            Command::Calibrate(_) => "calibrate",
            Command::Eval(_) => "eval",
            Command::Inspect(_) => "inspect",
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct GenArgs {
    /// Main task name.
    #[arg(long)]
    pub main: Option<String>,
    /// Auxiliary task name.
    #[arg(long)]
    pub aux: Option<String>,
    /// Second auxiliary task name, for three-task compositions.
    #[arg(long)]
    pub aux2: Option<String>,
    /// Examples per dataset.
    #[arg(long)]
    pub n: Option<usize>,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Vec<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Also pretrain the copy base and write it here.
    #[arg(long)]
    pub base_out: Option<PathBuf>,
    #[arg(long)]
    pub base_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainLoraArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Training JSONL. Generated from `--task` when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    /// Examples to generate when `--data` is absent.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeArgs {
    /// Adapter files, in task order.
    pub adapters: Vec<PathBuf>,
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f32>,
    #[arg(long)]
    pub density: Option<f32>,
    /// Slerp interpolation factor.
    #[arg(long)]
    pub t: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Model spec: a preset name or a JSON file. Ignored when `--base` is set.
    #[arg(long)]
    pub spec: Option<String>,
    /// Base model; required by the data-driven strategies.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Data for the data-driven strategies.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Factor-form linear merge to calibrate.
    #[arg(long)]
    pub merged: Option<PathBuf>,
    /// Compositional training JSONL.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// bias or lora.
    #[arg(long)]
    pub calib_variant: Option<String>,
    #[arg(long)]
    pub calib_rank: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Examples drawn from the training data.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// per_compositional_task or shared_across_tasks.
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub task_label: Option<String>,
    /// f32 or bf16.
    #[arg(long)]
    pub dtype: Option<String>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Strategies to run, e.g. `zero_shot,linear,lc++,multi_step`.
    #[arg(long, value_delimiter = ',')]
    pub strategy: Vec<String>,
    /// Single-task adapters in application order (main first).
    #[arg(long = "adapter")]
    pub adapters: Vec<PathBuf>,
    /// Precomputed merges as `strategy=path`.
    #[arg(long)]
    pub merged: Vec<String>,
    /// The linear merge calibrations were trained on; defaults to the uniform merge of the adapters.
    #[arg(long)]
    pub linear: Option<PathBuf>,
    /// Calibration files; the variant is read from each file.
    #[arg(long)]
    pub calib: Vec<PathBuf>,
    #[arg(long)]
    pub joint: Option<PathBuf>,
    /// chars or words.
    #[arg(long)]
    pub tokenization: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct InspectArgs {
    /// Merged adapter file.
    #[arg(long)]
    pub merged: Option<PathBuf>,
    /// Calibration to apply on top of the merge.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<String>,
    /// Take the spec from this base model instead.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub version: String,
    pub duration_secs: f64,
    pub status: String,
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

pub fn append_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(m)?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

fn drop_unset(v: Value) -> Value {
    match v {
        Value::Object(map) => Value::Object(
            map.into_iter()
                .filter(|(_, v)| !v.is_null() && v.as_array().is_none_or(|a| !a.is_empty()))
                .collect(),
        ),
        other => other,
    }
}

/// Overlays the flags that were given onto the config file's values.
pub fn merge_config<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Value>, command: &str) -> Result<T> {
    let mut merged = serde_json::Map::new();
    if let Some(cfg) = config {
        let Value::Object(top) = cfg else {
            return Err(Error::invalid("config file must hold a JSON object"));
        };
        for (k, v) in top {
            if !v.is_object() {
                merged.insert(k.replace('-', "_"), v.clone());
            }
        }
        if let Some(Value::Object(sub)) = top.get(command) {
            for (k, v) in sub {
                merged.insert(k.replace('-', "_"), v.clone());
            }
        }
    }
    if let Value::Object(given) = drop_unset(serde_json::to_value(flags)?) {
        merged.extend(given);
    }
    Ok(serde_json::from_value(Value::Object(merged))?)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::invalid(format!("{SEED_ENV} must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(given: Option<u64>) -> Result<u64> {
    Ok(given.or(env_seed()?).unwrap_or(0))
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::invalid(format!("missing --{flag}")))
}

/// A preset name or a path to a JSON spec.
pub fn parse_spec(s: &str) -> Result<ModelSpec> {
    let spec = match s {
        "toy" => ModelSpec::toy(),
        "qwen2.5-1.5b" => ModelSpec::qwen2_5_1_5b(),
        "llama3.2-1b" => ModelSpec::llama3_2_1b(),
        "stablelm2-1.6b" => ModelSpec::stablelm2_1_6b(),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text)?
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn spec_of(base: &Option<PathBuf>, spec: &Option<String>) -> Result<ModelSpec> {
    match (base, spec) {
        (Some(b), _) => Ok(ToyModel::load(b)?.spec().clone()),
        (None, Some(s)) => parse_spec(s),
        (None, None) => Ok(ModelSpec::toy()),
    }
}

fn load_train(path: &Path) -> Result<Dataset> {
    let (ds, _) = load_jsonl(path, Split::Train)?;
    if ds.is_empty() {
        return Err(Error::invalid(format!("{} holds no examples", path.display())));
    }
    Ok(ds)
}

fn parse_variant(s: &str) -> Result<CalibVariant> {
    s.parse()
}

/// What a command produced.
struct Outcome {
    config: Value,
    seed: Option<u64>,
    artifacts: Vec<PathBuf>,
}

fn outcome<T: Serialize>(args: &T, seed: Option<u64>, artifacts: Vec<PathBuf>) -> Result<Outcome> {
    Ok(Outcome {
        config: drop_unset(serde_json::to_value(args)?),
        seed,
        artifacts,
    })
}

fn gen_toy_data(a: &GenArgs) -> Result<Outcome> {
    let seed = resolve_seed(a.seed)?;
    let out = required(&a.out, "out")?;
    let n = a.n.unwrap_or(4000);
    let ratios = match a.ratios.as_slice() {
        [] => [0.8, 0.1, 0.1],
        &[x, y, z] => [x, y, z],
        _ => return Err(Error::invalid("--ratios takes three values")),
    };
    let names: Vec<&str> = [&a.main, &a.aux, &a.aux2]
        .into_iter()
        .zip(["first_half", "caesar1", ""])
        .filter_map(|(given, default)| match given {
            Some(s) => Some(s.as_str()),
            None if !default.is_empty() => Some(default),
            None => None,
        })
        .collect();
    let composed = ComposedTask::from_names(&names)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut jobs: Vec<ComposedTask> = composed.tasks.iter().cloned().map(ComposedTask::single).collect();
    jobs.push(composed);
    let mut artifacts = Vec::new();
    for (i, task) in jobs.iter().enumerate() {
        let splits = gen_dataset(task, n, splitmix64(seed ^ splitmix64(100 + i as u64)), ratios)?;
        for split in [Split::Train, Split::Validation, Split::Test] {
            let ds = splits.get(split);
            if ds.is_empty() {
                continue;
            }
            let path = out.join(format!("{}.{}.jsonl", task.label(), split.name()));
            save_jsonl(ds, &path)?;
            artifacts.push(path);
        }
    }
    if let Some(base_out) = &a.base_out {
        let mut cfg = ExperimentConfig {
            seed,
            ..ExperimentConfig::default()
        };
        if let Some(steps) = a.base_steps {
            cfg.base.steps = steps;
        }
        pretrain_copy_base(&cfg)?.save(base_out)?;
        artifacts.push(base_out.clone());
    }
    outcome(a, Some(seed), artifacts)
}

fn train_config(lr: Option<f64>, steps: Option<usize>, batch: Option<usize>, seed: u64, fallback: &TrainConfig) -> TrainConfig {
    TrainConfig {
        lr: lr.unwrap_or(fallback.lr),
        steps: steps.unwrap_or(fallback.steps),
        batch_size: batch.unwrap_or(fallback.batch_size),
        seed,
        ..fallback.clone()
    }
}

fn train_lora(a: &TrainLoraArgs) -> Result<Outcome> {
    let seed = resolve_seed(a.seed)?;
    let model = ToyModel::load(required(&a.base, "base")?)?;
    let out = required(&a.out, "out")?;
    let data = match (&a.data, &a.task) {
        (Some(p), _) => load_train(p)?,
        (None, Some(t)) => {
            let task = ComposedTask::from_names(&[t.as_str()])?;
            gen_dataset(&task, a.n.unwrap_or(4000), splitmix64(seed), [1.0, 0.0, 0.0])?.train
        }
        (None, None) => return Err(Error::invalid("train-lora needs --data or --task")),
    };
    let defaults = ExperimentConfig::default();
    let cfg = train_config(a.lr, a.steps, a.batch_size, seed, &defaults.lora);
    let task_name = a.task.clone().unwrap_or_else(|| data.examples[0].task.clone());
    let (adapter, log) = train_single_task_lora(
        &model,
        &data,
        a.rank.unwrap_or(defaults.lora_rank),
        a.alpha.unwrap_or(defaults.lora_alpha),
        &cfg,
    )?;
    adapter.with_task_name(task_name).save(out)?;
    log::info!("final training loss {:.4}", log.losses.last().copied().unwrap_or(f64::NAN));
    outcome(a, Some(seed), vec![out.clone(), crate::adapter::config_path(out)])
}

fn merge_cmd(a: &MergeArgs) -> Result<Outcome> {
    let seed = resolve_seed(a.seed)?;
    let out = required(&a.out, "out")?;
    let strategy: Strategy = required(&a.strategy, "strategy")?.parse()?;
    if a.adapters.is_empty() {
        return Err(Error::invalid("merge needs at least one adapter file"));
    }
    let spec = spec_of(&a.base, &a.spec)?;
    let adapters = a
        .adapters
        .iter()
        .map(|p| Adapter::load(p, &spec))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Adapter> = adapters.iter().collect();
    let defaults = MergeSpec::default();
    let ms = MergeSpec {
        strategy,
        weights: (!a.weights.is_empty()).then(|| a.weights.clone()),
        density: a.density.unwrap_or(defaults.density),
        slerp_t: a.t.unwrap_or(defaults.slerp_t),
        seed,
        ..defaults
    };
    ms.validate()?;
    let merged = if strategy.needs_data() {
        let model = ToyModel::load(required(&a.base, "base")?)?;
        let data = load_train(required(&a.data, "data")?)?;
        merge_with_data(&model, &refs, &ms, &data)?
    } else {
        merge::merge(&spec, &refs, &ms)?
    };
    merged.save(out)?;
    let mut artifacts = vec![out.clone()];
    if merged.is_factor() {
        artifacts.push(crate::adapter::config_path(out));
    }
    outcome(a, Some(seed), artifacts)
}

fn calibrate_cmd(a: &CalibrateArgs) -> Result<Outcome> {
    let seed = resolve_seed(a.seed)?;
    let out = required(&a.out, "out")?;
    let model = ToyModel::load(required(&a.base, "base")?)?;
    let merged = MergedAdapter::load(required(&a.merged, "merged")?, model.spec())?;
    let mut data = load_train(required(&a.data, "data")?)?;
    let subset = a.subset.unwrap_or(CALIB_SUBSET);
    if data.len() > subset {
        data = data.subset(subset, splitmix64(seed ^ 0x5eb5));
    }
    let variant = parse_variant(a.calib_variant.as_deref().unwrap_or("lora"))?;
    let scope: SharedScope = a.scope.as_deref().unwrap_or("per_compositional_task").parse()?;
    let dtype = match a.dtype.as_deref().unwrap_or("bf16") {
        "f32" => Dtype::F32,
        "bf16" => Dtype::BF16,
        other => return Err(Error::invalid(format!("unknown dtype `{other}`"))),
    };
    let opts = CalibOptions {
        variant,
        rank: a.calib_rank.unwrap_or(DEFAULT_CALIB_RANK),
        scope,
        task_label: a.task_label.clone().unwrap_or_else(|| data.examples[0].task.clone()),
    };
    let fallback = TrainConfig {
        lr: CALIB_LR,
        ..TrainConfig::default()
    };
    let cfg = train_config(a.lr, a.steps, a.batch_size, seed, &fallback);
    let (set, log) = train_calibration(&model, &merged, &opts, &data, &cfg)?;
    let bytes = set.save(out, dtype)?;
    log::info!(
        "{} calibration: {} parameters, {bytes} bytes, final loss {:.4}",
        variant.name(),
        set.num_params(),
        log.losses.last().copied().unwrap_or(f64::NAN)
    );
    outcome(a, Some(seed), vec![out.clone()])
}

/// CSV with one row per (strategy, metric).
pub fn eval_csv(reports: &[crate::model::EvalReport]) -> String {
    let mut out = String::from("strategy,task,metric,score_percent,passes\n");
    for r in reports {
        for &(m, s) in &r.scores {
            let _ = writeln!(out, "{},{},{},{:.4},{}", r.strategy, r.task, m.name(), s, r.passes_per_example);
        }
    }
    out
}

fn eval_cmd(a: &EvalArgs) -> Result<Outcome> {
    let seed = resolve_seed(a.seed)?;
    let out = required(&a.out, "out")?;
    let model = ToyModel::load(required(&a.base, "base")?)?;
    let spec = model.spec().clone();
    let test_path = required(&a.test, "test")?;
    let (test, _) = load_jsonl(test_path, Split::Test)?;
    if a.strategy.is_empty() {
        return Err(Error::invalid("missing --strategy"));
    }
    let strategies = a
        .strategy
        .iter()
        .map(|s| s.parse::<EvalStrategy>())
        .collect::<Result<Vec<_>>>()?;
    let tok = match a.tokenization.as_deref().unwrap_or("chars") {
        "chars" => Tokenization::Chars,
        "words" => Tokenization::Words,
        other => return Err(Error::invalid(format!("unknown tokenization `{other}`"))),
    };

    let mut art = Artifacts {
        adapters: a
            .adapters
            .iter()
            .map(|p| Adapter::load(p, &spec))
            .collect::<Result<_>>()?,
        ..Artifacts::default()
    };
    for entry in &a.merged {
        let (name, path) = entry
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--merged expects strategy=path, got `{entry}`")))?;
        let strategy: Strategy = name.parse()?;
        art.merged
            .insert(strategy.name().to_string(), MergedAdapter::load(Path::new(path), &spec)?);
    }
    if let Some(p) = &a.linear {
        art.linear = Some(MergedAdapter::load(p, &spec)?);
    }
    for p in &a.calib {
        let set = CalibrationSet::load(p, &spec)?;
        art.calibrations.insert(set.variant(), set);
    }
    if let Some(p) = &a.joint {
        art.joint = Some(Adapter::load(p, &spec)?);
    }
    let task = a
        .task
        .clone()
        .or_else(|| test.examples.first().map(|e| e.task.clone()))
        .unwrap_or_default();
    let mut reports = Vec::new();
    for s in &strategies {
        let mut r = eval_strategy(s, &model, &art, &test, tok)?;
        r.task = task.clone();
        log::info!(
            "{}: exact match {:.1}, weighted rouge {:.1}, {} passes/example",
            r.strategy,
            r.get(Metric::ExactMatch),
            r.get(Metric::WeightedRouge),
            r.passes_per_example
        );
        reports.push(r);
    }
    std::fs::write(out, eval_csv(&reports)).map_err(|e| Error::io(out, e))?;
    outcome(a, Some(seed), vec![out.clone()])
}

fn inspect_cmd(a: &InspectArgs) -> Result<Outcome> {
    let out = required(&a.out, "out")?;
    let spec = spec_of(&a.base, &a.spec)?;
    let merged = MergedAdapter::load(required(&a.merged, "merged")?, &spec)?;
    let base_deltas = merged.materialize()?;
    let mut artifacts = Vec::new();
    let mut sets: BTreeMap<String, _> = BTreeMap::new();
    match &a.calib {
        None => {
            sets.insert(a.label.clone().unwrap_or_else(|| "merged".into()), base_deltas);
        }
        Some(p) => {
            let calib = CalibrationSet::load(p, &spec)?;
            let cal = crate::calibration::calibrated_deltas(&spec, &merged, &calib)?;
            let label = a.label.clone().unwrap_or_else(|| match calib.variant() {
                CalibVariant::Bias => "lc".into(),
                CalibVariant::Lora => "lc++".into(),
            });
            sets.insert("merged".into(), base_deltas);
            sets.insert(label, cal);
        }
    }
    let all: Vec<_> = sets.values().collect();
    let ranges = shared_ranges(&all);
    for (label, deltas) in &sets {
        let report = inspect_with_ranges(label.clone(), deltas, &ranges)?;
        println!("{label}: total frobenius {:.6}", report.total_frobenius());
        for (c, n) in report.component_norms() {
            println!("  {c:10} {n:.6}");
        }
        artifacts.extend(report.write_csv(out)?);
    }
    outcome(a, None, artifacts)
}

fn load_config(path: &Option<PathBuf>) -> Result<Option<Value>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(Some(serde_json::from_str(&text)?))
        }
    }
}

fn execute(command: &Command, config: Option<&Value>) -> Result<Outcome> {
    let name = command.name();
    match command {
        Command::GenToyData(a) => gen_toy_data(&merge_config(a, config, name)?),
        Command::TrainLora(a) => train_lora(&merge_config(a, config, name)?),
        Command::Merge(a) => merge_cmd(&merge_config(a, config, name)?),
        Command::Calibrate(a) => calibrate_cmd(&merge_config(a, config, name)?),
        Command::Eval(a) => eval_cmd(&merge_config(a, config, name)?),
        Command::Inspect(a) => inspect_cmd(&merge_config(a, config, name)?),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_INVALID
    }
}

/// Parses `argv` (program name first), runs the command, appends a manifest
/// line, and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    use clap::error::ErrorKind;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                ErrorKind::InvalidSubcommand
                | ErrorKind::MissingSubcommand
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => EXIT_USAGE,
                _ => EXIT_INVALID,
            };
        }
    };
    let start = Instant::now();
    let result = load_config(&cli.config).and_then(|cfg| execute(&cli.command, cfg.as_ref()));
    let (status, code, out) = match result {
        Ok(o) => ("ok".to_string(), EXIT_OK, Some(o)),
        Err(e) => {
            eprintln!("error: {e}");
            (format!("error: {e}"), exit_code(&e), None)
        }
    };
    let out = out.unwrap_or(Outcome {
        config: Value::Null,
        seed: None,
        artifacts: Vec::new(),
    });
    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        config: out.config,
        seed: out.seed,
        artifacts: out.artifacts,
        version: version_string(),
        duration_secs: start.elapsed().as_secs_f64(),
        status,
    };
    let path = cli
        .manifest
        .or_else(|| std::env::var_os(MANIFEST_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_MANIFEST));
    if let Err(e) = append_manifest(&path, &manifest) {
        eprintln!("error: {e}");
        if code == EXIT_OK {
            return EXIT_IO;
        }
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_config() {
        let flags = CalibrateArgs {
            lr: Some(1e-3),
            ..Default::default()
        };
        let cfg = serde_json::json!({
            "lr": 0.5,
            "calib-rank": 2,
            "subset": 7,
            "calibrate": {"subset": 9},
            "merge": {"density": 0.2},
        });
        let m = merge_config(&flags, Some(&cfg), "calibrate").unwrap();
        assert_eq!(m.lr, Some(1e-3));
        assert_eq!(m.calib_rank, Some(2));
        assert_eq!(m.subset, Some(9));
        let none = merge_config(&flags, None, "calibrate").unwrap();
        assert_eq!(none.calib_rank, None);
        assert!(merge_config(&flags, Some(&serde_json::json!([1])), "calibrate").is_err());
    }

    #[test]
    fn vec_flags_override_config() {
        let flags = MergeArgs {
            weights: vec![0.25, 0.75],
            ..Default::default()
        };
        let cfg = serde_json::json!({"weights": [0.5, 0.5], "strategy": "ties"});
        let m = merge_config(&flags, Some(&cfg), "merge").unwrap();
        assert_eq!(m.weights, vec![0.25, 0.75]);
        assert_eq!(m.strategy.as_deref(), Some("ties"));
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run(["loracal", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["loracal"]), EXIT_USAGE);
        assert_eq!(run(["loracal", "merge", "--density", "abc"]), EXIT_INVALID);
    }

    #[test]
    fn calibrate_defaults() {
        let cli = Cli::try_parse_from(["loracal", "calibrate"]).unwrap();
        let Command::Calibrate(a) = cli.command else { panic!() };
        assert_eq!(a.lr, None);
        assert_eq!(CALIB_LR, 5e-4);
        assert_eq!(CALIB_SUBSET, 10_000);
    }

    #[test]
    fn spec_presets() {
        assert_eq!(parse_spec("toy").unwrap(), ModelSpec::toy());
        assert_eq!(parse_spec("qwen2.5-1.5b").unwrap().embed_dim, 1536);
        assert!(parse_spec("/nonexistent/spec.json").unwrap_err().is_io());
    }

    #[test]
    fn manifest_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.jsonl");
        let m = RunManifest {
            command: "merge".into(),
            config: serde_json::json!({"strategy": "linear"}),
            seed: Some(3),
            artifacts: vec![PathBuf::from("m.safetensors")],
            version: version_string(),
            duration_secs: 0.5,
            status: "ok".into(),
        };
        append_manifest(&path, &m).unwrap();
        append_manifest(&path, &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<RunManifest> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, vec![m.clone(), m]);
    }
}
