//! Entropy-guided merging of two specialist checkpoints into one base.
//!
//! Per layer, the merger summarizes each neuron by a scalar, forms a
//! temperature softmax over the merged scalars, and descends the Shannon
//! entropy of that distribution over the two mixing coefficients
//! (projected onto the unit simplex) while the temperature anneals. Low
//! entropy concentrates the distribution, which rewards coefficient
//! choices that keep strong neurons strong instead of averaging them away.
//!
//! Run with: cargo run --example entropy_merge

use gmerge::emwm::{merge_emwm, EmwmConfig};
use gmerge::synth;

fn main() -> anyhow::Result<()> {
    let [base, vggt, mde] = synth::checkpoint_triple(6, 256, 42);
    let config = EmwmConfig::default();

    let (merged, report) = merge_emwm(&base, &vggt, &mde, &config)?;
    println!(
        "merged {} layers (gamma = {}, eta = {}, movement epsilon = {:e})",
        merged.len(),
        config.gamma,
        config.eta,
        config.epsilon
    );
    println!(
        "{:<10} {:>9} {:>9} {:>6} {:>10} {:>10}",
        "layer", "lambda_v", "lambda_m", "iters", "H(start)", "H(end)"
    );
    for (name, r) in &report.layers {
        println!(
            "{:<10} {:>9.5} {:>9.5} {:>6} {:>10.5} {:>10.5}",
            name,
            r.lambda.vggt,
            r.lambda.mde,
            r.iterations,
            r.entropy_trace.first().unwrap(),
            r.entropy_trace.last().unwrap(),
        );
    }

    // The merged weights are the convex recombination the report claims.
    let coeffs = report.coefficients();
    let check = gmerge::merge::apply_merge(&base, &vggt, &mde, &coeffs)?;
    assert_eq!(check, merged, "report coefficients reproduce the merge");
    println!("report coefficients reproduce the merged weights bit for bit");

    // Degenerate case: merging a checkpoint with itself returns it
    // unchanged and settles immediately at the simplex barycenter.
    let (only_base, trivial) = merge_emwm(&base, &base, &base, &config)?;
    assert_eq!(only_base, base);
    let max_iters = trivial.layers.values().map(|r| r.iterations).max().unwrap();
    println!("identical specialists: merge is the identity, max iterations = {max_iters}");

    // The report serializes deterministically for audit trails.
    let json = report.to_json(false);
    println!(
        "report JSON ({} bytes) ready for storage",
        serde_json::to_string_pretty(&json)?.len()
    );
    Ok(())
}
