//! Merges two random adapters with every data-free strategy and compares the
//! merged update to the plain average.

use loracal::merge::{merge, merge_linear, uniform_weights, MergeSpec, Strategy};
use loracal::{Adapter, ComponentKind, ModelSpec, SeededRng};

fn main() -> loracal::Result<()> {
    let spec = ModelSpec::toy();
    let mut rng = SeededRng::new(7);
    let a = Adapter::random(&spec, 8, 16.0, 0.05, &mut rng)?.with_task_name("first_half");
    let b = Adapter::random(&spec, 8, 16.0, 0.05, &mut rng)?.with_task_name("caesar1");
    let refs = [&a, &b];

    let linear = merge_linear(&spec, &refs, &uniform_weights(2))?;
    let reference = linear.delta(0, ComponentKind::QProj)?;
    println!("{:8} {:>6} {:>12} {:>10}", "strategy", "form", "|dW q0|", "cos(lin)");
    for s in [Strategy::Linear, Strategy::Concat, Strategy::Ties, Strategy::Dare, Strategy::Slerp] {
        let ms = MergeSpec {
            density: 0.5,
            seed: 1,
            ..MergeSpec::new(s)
        };
        let m = merge(&spec, &refs, &ms)?;
        let d = m.delta(0, ComponentKind::QProj)?;
        println!(
            "{:8} {:>6} {:>12.5} {:>10.4}",
            s.name(),
            if m.is_factor() { "factor" } else { "delta" },
            d.frobenius(),
            d.cosine(&reference)?
        );
    }

    let dir = std::env::temp_dir().join("loracal-merge-example");
    std::fs::create_dir_all(&dir).map_err(|e| loracal::Error::Invalid(e.to_string()))?;
    let path = dir.join("ties.safetensors");
    merge(&spec, &refs, &MergeSpec::new(Strategy::Ties))?.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}
