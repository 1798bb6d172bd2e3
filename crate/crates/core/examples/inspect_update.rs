//! Trains a LoRA calibration on a linear merge and compares per-component
//! update norms and spreads before and after calibration.

use loracal::calibration::{calibrated_deltas, CalibVariant, SharedScope};
use loracal::experiment::{pretrain_copy_base, task_data, train_task_adapter, ExperimentConfig};
use loracal::inspect::{inspect_with_ranges, shared_ranges};
use loracal::merge::{merge_linear, uniform_weights};
use loracal::model::train::CalibOptions;
use loracal::model::{train_calibration, TrainConfig};
use loracal::tasks::ComposedTask;
use loracal::Adapter;

fn main() -> loracal::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.base.steps = 600;
    cfg.lora.steps = 300;
    let base = pretrain_copy_base(&cfg)?;
    let composed = ComposedTask::from_names(&["first_half", "caesar1"])?;
    let adapters = composed
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| train_task_adapter(&base, &ComposedTask::single(t.clone()), &cfg, 10 + i as u64))
        .collect::<loracal::Result<Vec<_>>>()?;
    let refs: Vec<&Adapter> = adapters.iter().collect();
    let linear = merge_linear(&cfg.spec, &refs, &uniform_weights(2))?;

    let opts = CalibOptions {
        variant: CalibVariant::Lora,
        rank: 4,
        scope: SharedScope::PerCompositionalTask,
        task_label: composed.label(),
    };
    let train = TrainConfig {
        lr: 3e-3,
        steps: 400,
        batch_size: 32,
        seed: 9,
        ..TrainConfig::default()
    };
    let (calib, _) = train_calibration(&base, &linear, &opts, &task_data(&composed, 1000, 4)?, &train)?;

    let plain = linear.materialize()?;
    let calibrated = calibrated_deltas(&cfg.spec, &linear, &calib)?;
    let ranges = shared_ranges(&[&plain, &calibrated]);
    let before = inspect_with_ranges("linear", &plain, &ranges)?;
    let after = inspect_with_ranges("lc++", &calibrated, &ranges)?;
    println!("{:10} {:>10} {:>10} {:>10} {:>10}", "component", "|lin|", "|lc++|", "std lin", "std lc++");
    let (nb, na) = (before.component_norms(), after.component_norms());
    for (c, n) in &nb {
        let sd = |r: &loracal::inspect::InspectReport| {
            r.sites.iter().filter(|s| s.component == *c).map(|s| s.std).sum::<f64>() / 2.0
        };
        println!("{:10} {n:10.4} {:10.4} {:10.5} {:10.5}", c.name(), na[c], sd(&before), sd(&after));
    }
    let dir = std::env::temp_dir().join("loracal-inspect-example");
    for r in [&before, &after] {
        for p in r.write_csv(&dir)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}
