//! The data-driven merges (LoraHub, LM-Cocktail, DAM) against the uniform
//! average, scored by loss on compositional data.

use loracal::experiment::{pretrain_copy_base, task_data, train_task_adapter, ExperimentConfig};
use loracal::merge::{merge_linear, uniform_weights, MergeSpec, Strategy};
use loracal::model::dam::merged_loss;
use loracal::model::{encode_dataset, merge_with_data};
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

    let fit = task_data(&composed, 200, 1)?;
    let held_out = encode_dataset(&task_data(&composed, 200, 2)?)?;
    let linear = merge_linear(&cfg.spec, &refs, &uniform_weights(2))?;
    println!("{:12} held-out loss {:.4}", "linear", merged_loss(&base, &linear, &held_out)?);
    for s in [Strategy::Lorahub, Strategy::LmCocktail, Strategy::Dam] {
        let ms = MergeSpec {
            seed: 3,
            ..MergeSpec::new(s)
        };
        let m = merge_with_data(&base, &refs, &ms, &fit)?;
        println!("{:12} held-out loss {:.4}", s.name(), merged_loss(&base, &m, &held_out)?);
    }
    Ok(())
}
