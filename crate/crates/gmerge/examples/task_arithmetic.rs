//! Checkpoint deltas ("task vectors") and structural compatibility.
//!
//! A task vector is the elementwise difference between a fine-tuned model
//! and its base. This example extracts one, re-applies it, and shows how
//! the compatibility report pinpoints layers that cannot be combined.
//!
//! Run with: cargo run --example task_arithmetic

use gmerge::merge::task_vector;
use gmerge::synth;
use gmerge::tensor::{validate_compat, Tensor};

fn main() -> anyhow::Result<()> {
    let [base, vggt, _] = synth::checkpoint_triple(4, 8, 7);

    // Extract the delta that turns `base` into `vggt`.
    let delta = task_vector(&vggt, &base)?.with_provenance("vggt", "base");
    println!("task vector over {} layers", delta.len());
    for (name, t) in delta.iter() {
        let norm: f64 = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("  {name}: |delta| = {norm:.4}");
    }

    // Applying it to the base reproduces the specialist up to rounding.
    let rebuilt = delta.apply(&base)?;
    let max_err = rebuilt
        .iter()
        .flat_map(|(name, t)| {
            let orig = vggt.get(name).unwrap().data();
            t.data()
                .iter()
                .zip(orig)
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0f64, f64::max);
    println!("base + delta reproduces the specialist, max |err| = {max_err:.2e}");

    // Compatibility reporting: break one layer on purpose.
    let mut broken = vggt.clone();
    broken.insert("layer001", Tensor::f64(vec![5], vec![0.0; 5])?);
    let report = validate_compat(&base, &broken);
    println!(
        "after reshaping a layer, compatible = {}",
        report.compatible()
    );
    println!("{report}");
    Ok(())
}
