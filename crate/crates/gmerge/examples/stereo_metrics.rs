//! Stereo evaluation: disparity/depth conversion, end-point error,
//! bad-pixel rates, and structural similarity.
//!
//! Run with: cargo run --example stereo_metrics

use gmerge::metrics::{
    bad_pixel_rate, bad_pixel_rate_d1, depth_from_disparity, disparity_from_depth, epe, ssim,
    GridMap, SsimConfig, StereoRig,
};
use gmerge::synth;

fn main() -> anyhow::Result<()> {
    // d = f * B / z with a KITTI-like rig.
    let rig = StereoRig::new(721.5, 0.54)?;
    let depth = GridMap::new(1, 4, vec![2.0, 5.0, 10.0, 40.0])?;
    let disparity = disparity_from_depth(&depth, rig)?;
    println!("rig: f = {} px, baseline = {} m", rig.focal, rig.baseline);
    for (z, d) in depth.values().iter().zip(disparity.values()) {
        println!("  z = {z:>5} m  ->  d = {d:>8.3} px");
    }
    let back = depth_from_disparity(&disparity, rig)?;
    let max_err = depth
        .values()
        .iter()
        .zip(back.values())
        .map(|(a, b)| (a - b).abs() / a)
        .fold(0.0f64, f64::max);
    println!("round trip max relative error: {max_err:.2e}");

    // Error rates on a planted prediction offset (exactly 1.25 px).
    let (gt, pred) = synth::disparity_pair(48, 64, 1.25, 3)?;
    println!("planted offset 1.25 px on a 48x64 grid:");
    println!("  EPE      = {}", epe(&pred, &gt)?);
    for tau in [1.0, 2.0, 3.0] {
        println!(
            "  bad@{tau}   = {:>5.1}%",
            bad_pixel_rate(&pred, &gt, tau)?
        );
    }
    println!(
        "  D1       = {:>5.1}% (err > 3 px AND > 5% of truth)",
        bad_pixel_rate_d1(&pred, &gt, 3.0, 0.05)?
    );

    // Masks: invalid cells drop out of every statistic.
    let gt_masked = GridMap::with_mask(
        1,
        4,
        vec![10.0, 10.0, 10.0, 10.0],
        vec![true, true, false, true],
    )?;
    let pred_full = GridMap::new(1, 4, vec![10.0, 11.0, 99.0, 13.0])?;
    println!(
        "with one masked pixel: EPE = {} (the 99 never counts)",
        epe(&pred_full, &gt_masked)?
    );

    // Structural similarity on a smooth ramp vs. a noisier copy.
    let clean: Vec<f64> = (0..32 * 32)
        .map(|i| {
            let (r, c) = (i / 32, i % 32);
            0.5 + 0.25 * ((r as f64) * 0.2).sin() + 0.25 * ((c as f64) * 0.15).cos()
        })
        .collect();
    let noisy: Vec<f64> = clean
        .iter()
        .enumerate()
        .map(|(i, v)| v + if i % 3 == 0 { 0.05 } else { -0.02 })
        .collect();
    let a = GridMap::new(32, 32, clean)?;
    let b = GridMap::new(32, 32, noisy)?;
    let config = SsimConfig::default();
    println!("ssim(clean, clean) = {:.6}", ssim(&a, &a, &config)?);
    println!("ssim(clean, noisy) = {:.6}", ssim(&a, &b, &config)?);
    Ok(())
}
