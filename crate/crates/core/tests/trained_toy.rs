//! Training runs on the default copy-pretrained base: a single-task adapter
//! decodes its task, and calibration lowers the loss of the linear merge.

use std::sync::OnceLock;

use loracal::calibration::{CalibVariant, SharedScope};
use loracal::experiment::{pretrain_copy_base, task_data, train_task_adapter, ExperimentConfig};
use loracal::merge::{merge_linear, uniform_weights};
use loracal::metrics::{Metric, Tokenization};
use loracal::model::dam::merged_loss;
use loracal::model::train::CalibOptions;
use loracal::model::{encode_dataset, eval_strategy, train_calibration, Artifacts, EvalStrategy, ToyModel, TrainConfig};
use loracal::tasks::{gen_dataset, ComposedTask};
use loracal::Adapter;

fn base() -> &'static (ExperimentConfig, ToyModel) {
    static BASE: OnceLock<(ExperimentConfig, ToyModel)> = OnceLock::new();
    BASE.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let model = pretrain_copy_base(&cfg).unwrap();
        (cfg, model)
    })
}

#[test]
fn uppercase_adapter_decodes_held_out_inputs() {
    let (cfg, model) = base();
    // longer than the experiment's adapter budget: copy errors on long
    // strings take a while to train out
    let mut cfg = cfg.clone();
    cfg.lora.steps = 3000;
    cfg.lora.lr = 2e-3;
    let task = ComposedTask::from_names(&["uppercase"]).unwrap();
    let adapter = train_task_adapter(model, &task, &cfg, 10).unwrap();
    let test = gen_dataset(&task, 200, 12345, [0.0, 0.0, 1.0]).unwrap().test;
    let art = Artifacts {
        adapters: vec![adapter],
        ..Artifacts::default()
    };
    let report = eval_strategy(&EvalStrategy::MainLora, model, &art, &test, Tokenization::Chars).unwrap();
    let em = report.get(Metric::ExactMatch);
    assert!(em >= 90.0, "exact match {em}");
}

#[test]
fn calibration_beats_linear_merge_loss() {
    let (cfg, model) = base();
    let composed = ComposedTask::from_names(&["first_half", "caesar1"]).unwrap();
    let adapters: Vec<Adapter> = composed
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| train_task_adapter(model, &ComposedTask::single(t.clone()), cfg, 10 + i as u64).unwrap())
        .collect();
    let refs: Vec<&Adapter> = adapters.iter().collect();
    let linear = merge_linear(&cfg.spec, &refs, &uniform_weights(2)).unwrap();
    let data = task_data(&composed, 1000, 7).unwrap();
    let seqs = encode_dataset(&data).unwrap();
    let before = merged_loss(model, &linear, &seqs).unwrap();
    for variant in [CalibVariant::Bias, CalibVariant::Lora] {
        let opts = CalibOptions {
            variant,
            rank: 4,
            scope: SharedScope::PerCompositionalTask,
            task_label: composed.label(),
        };
        let train = TrainConfig {
            lr: 3e-3,
            steps: 200,
            batch_size: 16,
            seed: 1,
            ..TrainConfig::default()
        };
        let (_, log) = train_calibration(model, &linear, &opts, &data, &train).unwrap();
        let last = log.checkpoints(50).last().copied().unwrap();
        assert!(last < before, "{}: {last} !< {before}", variant.name());
    }
}
