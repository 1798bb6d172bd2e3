//! Calibration parameters on top of a linear merge: zero-init identity,
//! parameter counts at toy and 1.5B-class sizes, and on-disk footprint.

use loracal::calibration::{calibrated_delta, param_count, CalibVariant, CalibrationSet, SharedScope};
use loracal::merge::{merge_linear, uniform_weights};
use loracal::safetensors::Dtype;
use loracal::{Adapter, ComponentKind, ModelSpec, SeededRng};

fn main() -> loracal::Result<()> {
    let spec = ModelSpec::toy();
    let mut rng = SeededRng::new(3);
    let a = Adapter::random(&spec, 8, 16.0, 0.05, &mut rng)?;
    let b = Adapter::random(&spec, 8, 16.0, 0.05, &mut rng)?;
    let merged = merge_linear(&spec, &[&a, &b], &uniform_weights(2))?;

    let bias = CalibrationSet::init_bias(&spec, SharedScope::PerCompositionalTask, "first_half+caesar1")?;
    let lora = CalibrationSet::init_lora(&spec, 4, &mut rng, SharedScope::PerCompositionalTask, "first_half+caesar1")?;
    for set in [&bias, &lora] {
        let before = merged.delta(1, ComponentKind::DownProj)?;
        let after = calibrated_delta(&merged, set, 1, ComponentKind::DownProj)?;
        println!(
            "{:4} params {:5}  max |change| at init {}",
            set.variant().name(),
            set.num_params(),
            after.sub(&before)?.max_abs()
        );
    }

    println!("\n{:16} {:>10} {:>10} {:>10} {:>10}", "spec", "bias", "bias MB", "lora s=4", "lora MB");
    for (name, s) in [
        ("toy", ModelSpec::toy()),
        ("qwen2.5-1.5b", ModelSpec::qwen2_5_1_5b()),
        ("llama3.2-1b", ModelSpec::llama3_2_1b()),
        ("stablelm2-1.6b", ModelSpec::stablelm2_1_6b()),
    ] {
        let nb = param_count(&s, CalibVariant::Bias, 4);
        let nl = param_count(&s, CalibVariant::Lora, 4);
        let mb = |n: usize| (n * Dtype::BF16.size()) as f64 / 1e6;
        println!("{name:16} {nb:>10} {:>10.3} {nl:>10} {:>10.3}", mb(nb), mb(nl));
    }

    let path = std::env::temp_dir().join("loracal-calib-example.safetensors");
    let bytes = lora.save(&path, Dtype::BF16)?;
    let back = CalibrationSet::load(&path, &spec)?;
    println!("\nsaved {bytes} bytes to {}, variant {}", path.display(), back.variant().name());
    Ok(())
}
