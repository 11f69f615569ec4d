//! The fusion neck: order-agnostic frame attention, a depth-branch stub,
//! and the modulation that combines the two feature streams.
//!
//! The attention stage prepends a learned camera token, runs multi-head
//! self-attention without positional encodings, and reduces with a
//! canonical summation order, so permuting the patch tokens permutes the
//! output bit for bit. The final features are `mde - alpha * fa`.
//!
//! Run with: cargo run --example neck_pipeline

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gmerge::neck::{frame_attention_detailed, modulate, neck_forward, FeatureMap, NeckConfig};
use gmerge::synth;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (tokens_per_frame, channels, heads) = (6usize, 8usize, 2usize);

    let params = synth::random_attention_params(channels, heads, &mut rng)?;
    let stub = synth::random_stub(channels, 2, &mut rng)?;
    let data: Vec<f64> = (0..tokens_per_frame * channels)
        .map(|i| ((i as f64) * 0.37).sin())
        .collect();
    let tokens = FeatureMap::new(tokens_per_frame, channels, data)?;

    // Attention rows are probability distributions over tokens (plus the
    // camera token at row/column 0).
    let detail = frame_attention_detailed(&tokens, &params)?;
    println!(
        "attention: {} heads over {} tokens (+1 camera token)",
        detail.weights.len(),
        tokens_per_frame
    );
    let w = &detail.weights[0];
    print!("  head 0, camera-token row:");
    for j in 0..w.cols() {
        print!(" {:.3}", w.get(0, j));
    }
    println!();

    // Bit-exact permutation equivariance.
    let perm: Vec<usize> = (0..tokens_per_frame).rev().collect();
    let permuted_out = frame_attention_detailed(&tokens.permute_rows(&perm)?, &params)?.output;
    assert_eq!(
        permuted_out,
        detail.output.permute_rows(&perm)?,
        "reordering patches reorders the output bitwise"
    );
    println!("  permuting the tokens permutes the output bit for bit");

    // Full pipeline: attention stack -> depth stub -> modulation.
    let config = NeckConfig::default();
    let blocks = vec![params];
    let fused = neck_forward(&tokens, &blocks, &stub, config.alpha)?;
    println!(
        "neck_forward: {}x{} fused features at alpha = {}",
        fused.rows(),
        fused.cols(),
        config.alpha
    );

    // Modulation is linear in alpha, and alpha = 0 is a bitwise no-op.
    let (mde, fa) = synth::feature_pair(4, 4, 99)?;
    let untouched = modulate(&mde, &fa, 0.0)?;
    assert_eq!(untouched, mde);
    for alpha in [0.0, 0.1, 0.2, 0.4] {
        let out = modulate(&mde, &fa, alpha)?;
        let mean: f64 = out.data().iter().sum::<f64>() / out.data().len() as f64;
        println!("  alpha = {alpha:<4} -> mean fused feature {mean:+.5}");
    }
    Ok(())
}
