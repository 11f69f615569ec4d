//! Driving the `gmerge` CLI end to end from code: generate fixtures,
//! merge them, solve a camera, and score a disparity map, checking the
//! JSON each subcommand prints.
//!
//! The CLI is a thin shell over the library; this example shows the
//! file-level workflow scripts would use.
//!
//! Run with: cargo run --example cli_tour

use gmerge::cli;

/// Runs the CLI in-process and returns (exit code, stdout).
fn gmerge(args: &[&str]) -> (i32, String) {
    let mut argv = vec!["gmerge".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli::run(argv, &mut out, &mut err);
    if code != 0 {
        eprint!("{}", String::from_utf8_lossy(&err));
    }
    (code, String::from_utf8_lossy(&out).into_owned())
}

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = |name: &str| dir.path().join(name).display().to_string();

    // 1. Synthetic checkpoint triple, then an entropy-guided merge.
    let (code, out) = gmerge(&[
        "--seed", "3",
        "synth", "checkpoint-triple",
        "--layers", "4",
        "--neurons", "64",
        "--out-dir", &path("ckpt"),
    ]);
    assert_eq!(code, 0);
    println!("synth checkpoint-triple -> {out}");

    let (code, out) = gmerge(&[
        "merge",
        "--base", &path("ckpt/base.gmrg"),
        "--vggt", &path("ckpt/vggt.gmrg"),
        "--mde", &path("ckpt/mde.gmrg"),
        "--out", &path("merged.gmrg"),
        "--report", &path("report.json"),
    ]);
    assert_eq!(code, 0);
    println!("merge -> {out}");

    // 2. Camera recovery from a synthetic cloud.
    let (code, out) = gmerge(&[
        "--seed", "8",
        "synth", "pinhole-cloud",
        "--f", "600",
        "--s", "0.5",
        "--out-dir", &path("cam"),
    ]);
    assert_eq!(code, 0);
    println!("synth pinhole-cloud -> {out}");

    let (code, out) = gmerge(&["solve-camera", "--points", &path("cam/cloud.csv")]);
    assert_eq!(code, 0);
    println!("solve-camera -> {out}");
    let sol: serde_json::Value = serde_json::from_str(out.trim())?;
    println!(
        "  recovered f = {:.3} (truth 600), s = {:.4} (truth 0.5)",
        sol["f_iso"].as_f64().unwrap(),
        sol["s"].as_f64().unwrap()
    );

    // 3. Focal length to field of view and back.
    let (_, out) = gmerge(&[
        "fov", "--fx", "621", "--fy", "187.5", "--width", "1242", "--height", "375",
    ]);
    println!("fov -> {out}");

    // 4. Disparity metrics on a planted offset.
    let (code, out) = gmerge(&[
        "synth", "disparity-pair",
        "--offset", "1.0",
        "--out-dir", &path("disp"),
    ]);
    assert_eq!(code, 0);
    println!("synth disparity-pair -> {out}");

    let (code, out) = gmerge(&[
        "metrics",
        "--pred", &path("disp/pred.gmrg"),
        "--gt", &path("disp/gt.gmrg"),
        "--thresholds", "1,3,5",
    ]);
    assert_eq!(code, 0);
    println!("metrics -> {out}");

    // 5. Feature projection for visualization.
    let (code, out) = gmerge(&[
        "synth", "feature-pair",
        "--rows", "64",
        "--cols", "16",
        "--out-dir", &path("feat"),
    ]);
    assert_eq!(code, 0);
    println!("synth feature-pair -> {out}");

    let (code, out) = gmerge(&[
        "pca3",
        "--features", &path("feat/mde.gmrg"),
        "--out", &path("proj.gmrg"),
    ]);
    assert_eq!(code, 0);
    println!("pca3 -> {out}");
    Ok(())
}
