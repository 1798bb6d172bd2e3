//! The string task registry, compositions, and JSONL datasets.

use loracal::tasks::{builtin_tasks, gen_dataset, load_jsonl, save_jsonl, ComposedTask, Split};

fn main() -> loracal::Result<()> {
    let x = "hello world";
    for t in builtin_tasks() {
        println!("{:12} {:?} -> {:?}", t.name, x, t.apply(x));
    }
    for names in [&["first_half", "caesar1"][..], &["caesar1", "first_half"], &["first_half", "caesar1", "uppercase"]] {
        let c = ComposedTask::from_names(names)?;
        println!("{:28} {:?}", c.label(), c.apply(x));
    }

    let task = ComposedTask::from_names(&["first_half", "caesar1"])?;
    let splits = gen_dataset(&task, 100, 42, [0.8, 0.1, 0.1])?;
    println!("\nsplits: {} / {} / {}", splits.train.len(), splits.validation.len(), splits.test.len());
    for ex in splits.test.examples.iter().take(3) {
        println!("  {:?} -> {:?}", ex.input, ex.output);
    }
    let path = std::env::temp_dir().join("loracal-compose-example.jsonl");
    save_jsonl(&splits.test, &path)?;
    let (back, report) = load_jsonl(&path, Split::Test)?;
    assert_eq!(back, splits.test);
    println!("round-tripped {} records through {}", report.records, path.display());
    Ok(())
}
