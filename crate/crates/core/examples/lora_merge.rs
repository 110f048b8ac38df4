//! A LoRA delta on one linear layer: forward with the adapter attached,
//! then merged into the weight, then unmerged again.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tplf::lora::{lora_init, LoraModule, LoraSpec};
use tplf::params::Linear;

fn main() -> tplf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut linear = Linear::<f64>::new(8, 6, 0.2, &mut rng);
    let spec = LoraSpec::task_primary();
    let fresh: LoraModule<f64> = lora_init(&spec, 8, 6, 1)?;
    // B starts at zero, so a fresh adapter is a no-op. Give it a delta.
    let b = Array2::from_shape_fn((6, fresh.rank()), |(i, j)| 0.05 * (i as f64 - j as f64));
    let mut lora = LoraModule::from_factors(fresh.a.clone(), b, spec.alpha)?;

    let x = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f64).sin());
    let base = x.dot(&linear.weight.t()) + &linear.bias;
    let adapted = lora.forward(&base, &x)?;

    let original = linear.weight.clone();
    lora.merge_into(&mut linear)?;
    let merged = x.dot(&linear.weight.t()) + &linear.bias;
    let gap = (&adapted - &merged)
        .mapv(f64::abs)
        .fold(0.0f64, |a, &b| a.max(b));
    println!(
        "rank {}  scale {:.3}  |adapter - merged| = {gap:.2e}",
        lora.rank(),
        lora.scale()
    );

    lora.unmerge_from(&mut linear)?;
    let drift = (&linear.weight - &original)
        .mapv(f64::abs)
        .fold(0.0f64, |a, &b| a.max(b));
    println!("after unmerge, max weight drift = {drift:.2e}");
    Ok(())
}
