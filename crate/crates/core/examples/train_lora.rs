//! Pretrains a small copy base, trains one task adapter on it, and decodes a
//! few held-out inputs with and without the adapter.

use loracal::experiment::{pretrain_copy_base, task_data, ExperimentConfig};
use loracal::model::decode::generate;
use loracal::model::{train_single_task_lora, TrainConfig};
use loracal::tasks::{gen_dataset, ComposedTask};

fn main() -> loracal::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.base.steps = 600;
    let base = pretrain_copy_base(&cfg)?;

    let task = ComposedTask::from_names(&["caesar1"])?;
    let data = task_data(&task, 2000, 11)?;
    let train = TrainConfig {
        lr: 1e-3,
        steps: 300,
        batch_size: 16,
        seed: 5,
        ..TrainConfig::default()
    };
    let (adapter, log) = train_single_task_lora(&base, &data, 8, 16.0, &train)?;
    for (i, loss) in log.checkpoints(100).iter().enumerate() {
        println!("steps {:4}..{:4}  mean loss {loss:.4}", i * 100, (i + 1) * 100);
    }

    let tuned = base.with_deltas(loracal::model::deltas_from_tensors(
        &loracal::merge::MergedAdapter::Factor(adapter).materialize()?,
    ))?;
    let test = gen_dataset(&task, 5, 99, [0.0, 0.0, 1.0])?.test;
    for ex in &test.examples {
        println!(
            "{:20} base {:20} adapter {:20} want {}",
            ex.input,
            generate(&base, &ex.input, 24)?,
            generate(&tuned, &ex.input, 24)?,
            ex.output
        );
    }
    Ok(())
}
