//! End-to-end tests of the `gmerge` binary: exit codes, output formats,
//! determinism of the synthetic generators, and the no-partial-output
//! guarantee of failed commands.

use std::path::Path;
use std::process::Command;

use gmerge::metrics::GridMap;
use gmerge::read_container;

fn gmerge() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gmerge"))
}

fn run(cmd: &mut Command) -> (Option<i32>, String, String) {
    let out = cmd.output().expect("spawning gmerge");
    (
        out.status.code(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn json_line(stdout: &str) -> serde_json::Value {
    let line = stdout.lines().last().expect("stdout has a result line");
    serde_json::from_str(line).expect("stdout line is JSON")
}

#[test]
fn help_and_version_exit_zero() {
    let (code, out, _) = run(gmerge().arg("--help"));
    assert_eq!(code, Some(0));
    for sub in ["merge", "solve-camera", "fov", "metrics", "synth"] {
        assert!(out.contains(sub), "--help must list `{sub}`");
    }
    let (code, out, _) = run(gmerge().arg("--version"));
    assert_eq!(code, Some(0));
    assert!(out.contains("gmerge"));
}

#[test]
fn usage_errors_exit_two() {
    let (code, out, err) = run(&mut gmerge());
    assert_eq!(code, Some(2), "bare invocation is a usage error");
    assert!(out.is_empty());
    assert!(err.contains("Usage"));

    let (code, _, _) = run(gmerge().arg("no-such-command"));
    assert_eq!(code, Some(2));

    // Typed flag that fails to parse.
    let (code, _, _) = run(gmerge().args([
        "metrics",
        "--pred",
        "x.csv",
        "--gt",
        "y.csv",
        "--thresholds",
        "one,three",
    ]));
    assert_eq!(code, Some(2));
}

#[test]
fn fov_and_focal_are_inverse() {
    let (code, out, _) = run(gmerge().args([
        "fov", "--fx", "621", "--fy", "187.5", "--width", "1242", "--height", "375",
    ]));
    assert_eq!(code, Some(0));
    let v = json_line(&out);
    assert!((v["fov_x"].as_f64().unwrap() - 90.0).abs() < 1e-9);
    assert!((v["fov_y"].as_f64().unwrap() - 90.0).abs() < 1e-9);

    let (code, out, _) = run(gmerge().args([
        "focal", "--fov-x", "90", "--fov-y", "90", "--width", "1242", "--height", "375",
    ]));
    assert_eq!(code, Some(0));
    let v = json_line(&out);
    assert!((v["f_x"].as_f64().unwrap() - 621.0).abs() < 1e-9);
    assert!((v["f_y"].as_f64().unwrap() - 187.5).abs() < 1e-9);

    let (code, _, err) = run(gmerge().args([
        "focal", "--fov-x", "180", "--fov-y", "90", "--width", "100", "--height", "100",
    ]));
    assert_eq!(code, Some(1), "domain errors exit 1");
    assert!(err.starts_with("error:"), "stderr was: {err}");
}

#[test]
fn solve_camera_recovers_synthetic_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, _) = run(gmerge().args([
        "--seed",
        "11",
        "synth",
        "pinhole-cloud",
        "--s",
        "0.7",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]));
    assert_eq!(code, Some(0));
    let listing = json_line(&out);
    let cloud = listing["cloud"].as_str().unwrap();
    assert!(Path::new(cloud).exists());
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("truth.json")).unwrap())
            .unwrap();
    assert_eq!(truth["f"].as_f64().unwrap(), 500.0);
    assert_eq!(truth["s"].as_f64().unwrap(), 0.7);

    let sol_path = dir.path().join("solution.json");
    let (code, out, _) = run(gmerge().args([
        "solve-camera",
        "--points",
        cloud,
        "--out",
        sol_path.to_str().unwrap(),
    ]));
    assert_eq!(code, Some(0));
    let sol = json_line(&out);
    assert!(sol["converged"].as_bool().unwrap());
    assert!((sol["f_iso"].as_f64().unwrap() - 500.0).abs() / 500.0 < 1e-6);
    assert!((sol["s"].as_f64().unwrap() - 0.7).abs() < 1e-6);
    assert!(sol["s_identifiable"].as_bool().unwrap());

    // The sidecar file holds the same solution.
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&sol_path).unwrap()).unwrap();
    assert_eq!(saved["f_iso"], sol["f_iso"]);
    assert_eq!(saved["s"], sol["s"]);
}

#[test]
fn merge_of_identical_checkpoints_reproduces_the_base_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = dir.path().join("t");
    let (code, _, _) = run(gmerge().args([
        "synth",
        "checkpoint-triple",
        "--out-dir",
        fixtures.to_str().unwrap(),
    ]));
    assert_eq!(code, Some(0));

    let base = fixtures.join("base.gmrg");
    let out = dir.path().join("merged.gmrg");
    let report = dir.path().join("report.json");
    let (code, stdout, stderr) = run(gmerge().args([
        "--verbose",
        "merge",
        "--base",
        base.to_str().unwrap(),
        "--vggt",
        base.to_str().unwrap(),
        "--mde",
        base.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]));
    assert_eq!(code, Some(0), "stderr: {stderr}");
    assert_eq!(
        std::fs::read(&base).unwrap(),
        std::fs::read(&out).unwrap(),
        "identical inputs must reproduce the base container byte for byte"
    );
    let v = json_line(&stdout);
    assert_eq!(v["layers"], 4);
    assert_eq!(v["converged"], 4);
    assert!(stderr.lines().count() >= 4, "--verbose prints per-layer lines");

    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for (_, layer) in rep["layers"].as_object().unwrap() {
        assert_eq!(layer["lambda_vggt"].as_f64().unwrap(), 0.5);
        assert_eq!(layer["lambda_mde"].as_f64().unwrap(), 0.5);
        assert!(layer["converged"].as_bool().unwrap());
        assert!(
            layer["entropy_trace"].is_array(),
            "--verbose embeds the entropy trace"
        );
    }
}

#[test]
fn failed_merge_leaves_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("merged.gmrg");
    let report = dir.path().join("report.json");

    // Missing input.
    let (code, _, err) = run(gmerge().args([
        "merge",
        "--base",
        dir.path().join("nope.gmrg").to_str().unwrap(),
        "--vggt",
        dir.path().join("nope.gmrg").to_str().unwrap(),
        "--mde",
        dir.path().join("nope.gmrg").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]));
    assert_eq!(code, Some(1));
    assert!(err.contains("error:"), "stderr was: {err}");
    assert!(err.contains("base"), "error should say which input failed: {err}");
    assert!(!out.exists(), "failed merge must not leave an output file");
    assert!(!report.exists());

    // Corrupt input: right extension, wrong bytes.
    let bad = dir.path().join("bad.gmrg");
    std::fs::write(&bad, b"definitely not a container").unwrap();
    let (code, _, err) = run(gmerge().args([
        "merge",
        "--base",
        bad.to_str().unwrap(),
        "--vggt",
        bad.to_str().unwrap(),
        "--mde",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]));
    assert_eq!(code, Some(1));
    assert!(
        err.to_lowercase().contains("magic"),
        "corrupt container should name the magic check: {err}"
    );
    assert!(!out.exists());

    // Unwritable output directory.
    let fixtures = dir.path().join("f");
    run(gmerge().args([
        "synth",
        "checkpoint-triple",
        "--layers",
        "2",
        "--neurons",
        "8",
        "--out-dir",
        fixtures.to_str().unwrap(),
    ]));
    let missing_out = dir.path().join("no-such-dir").join("merged.gmrg");
    let (code, _, _) = run(gmerge().args([
        "merge",
        "--base",
        fixtures.join("base.gmrg").to_str().unwrap(),
        "--vggt",
        fixtures.join("vggt.gmrg").to_str().unwrap(),
        "--mde",
        fixtures.join("mde.gmrg").to_str().unwrap(),
        "--out",
        missing_out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]));
    assert_eq!(code, Some(1));
    assert!(!missing_out.exists());
    assert!(!report.exists(), "report must not be written when the merge output fails");
}

#[test]
fn metrics_on_planted_disparity_offset() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, _) = run(gmerge().args([
        "synth",
        "disparity-pair",
        "--offset",
        "1.0",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]));
    assert_eq!(code, Some(0));
    let listing = json_line(&out);

    let (code, out, _) = run(gmerge().args([
        "metrics",
        "--pred",
        listing["pred"].as_str().unwrap(),
        "--gt",
        listing["gt"].as_str().unwrap(),
        "--thresholds",
        "0.5,3",
    ]));
    assert_eq!(code, Some(0));
    let v = json_line(&out);
    assert_eq!(v["epe"].as_f64().unwrap(), 1.0, "dyadic offset is exact");
    assert_eq!(v["bad"]["0.5"].as_f64().unwrap(), 100.0);
    assert_eq!(v["bad"]["3"].as_f64().unwrap(), 0.0);
    assert_eq!(v["d1"].as_f64().unwrap(), 0.0);
    assert_eq!(v["joint_valid"].as_u64().unwrap(), 48 * 64);
}

#[test]
fn disparity_round_trips_through_csv_and_preserves_masks() {
    let dir = tempfile::tempdir().unwrap();
    let depth_csv = dir.path().join("depth.csv");
    let values = vec![
        2.0,
        4.5,
        f64::NAN,
        8.0, //
        16.0,
        3.25,
        50.0,
        7.5,
    ];
    let mask = values.iter().map(|v| v.is_finite()).collect::<Vec<_>>();
    let depth = GridMap::with_mask(2, 4, values, mask).unwrap();
    depth.to_csv_path(&depth_csv).unwrap();

    let disp_csv = dir.path().join("disp.csv");
    let (code, out, _) = run(gmerge().args([
        "disparity",
        "--depth",
        depth_csv.to_str().unwrap(),
        "--f",
        "721.5",
        "--baseline",
        "0.54",
        "--out",
        disp_csv.to_str().unwrap(),
    ]));
    assert_eq!(code, Some(0));
    assert_eq!(json_line(&out)["valid"].as_u64().unwrap(), 7);

    let back_csv = dir.path().join("depth_back.csv");
    let (code, _, _) = run(gmerge().args([
        "disparity",
        "--invert",
        "--depth",
        disp_csv.to_str().unwrap(),
        "--f",
        "721.5",
        "--baseline",
        "0.54",
        "--out",
        back_csv.to_str().unwrap(),
    ]));
    assert_eq!(code, Some(0));

    let back = GridMap::from_csv_path(&back_csv).unwrap();
    for i in 0..8 {
        assert_eq!(back.valid()[i], depth.valid()[i], "mask must survive the round trip");
        if depth.valid()[i] {
            let (a, b) = (depth.values()[i], back.values()[i]);
            assert!((a - b).abs() / a <= 1e-12, "{a} -> {b}");
        }
    }

    // Masked grids cannot go into the (mask-free) container format.
    let (code, _, err) = run(gmerge().args([
        "disparity",
        "--depth",
        depth_csv.to_str().unwrap(),
        "--f",
        "721.5",
        "--baseline",
        "0.54",
        "--out",
        dir.path().join("disp.gmrg").to_str().unwrap(),
    ]));
    assert_eq!(code, Some(1));
    assert!(err.contains("csv"), "error should point at the csv escape hatch: {err}");
    assert!(!dir.path().join("disp.gmrg").exists());
}

#[test]
fn ssim_of_a_map_with_itself_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out, _) = run(gmerge().args([
        "synth",
        "feature-pair",
        "--rows",
        "24",
        "--cols",
        "24",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]));
    let listing = json_line(&out);
    let mde = listing["mde"].as_str().unwrap();

    let (code, out, _) = run(gmerge().args(["ssim", "--a", mde, "--b", mde, "--l", "2"]));
    assert_eq!(code, Some(0));
    let v = json_line(&out);
    assert!((v["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(v["channels"].as_u64().unwrap(), 1);
}

#[test]
fn pca3_writes_projection_container() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out, _) = run(gmerge().args([
        "synth",
        "feature-pair",
        "--rows",
        "64",
        "--cols",
        "32",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]));
    let listing = json_line(&out);

    let proj = dir.path().join("proj.gmrg");
    let (code, out, _) = run(gmerge().args([
        "pca3",
        "--features",
        listing["mde"].as_str().unwrap(),
        "--out",
        proj.to_str().unwrap(),
    ]));
    assert_eq!(code, Some(0));
    let v = json_line(&out);
    let eig: Vec<f64> = v["eigenvalues"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert!(eig[0] >= eig[1] && eig[1] >= eig[2] && eig[2] > 0.0);
    let frac = v["explained_variance_fraction"].as_f64().unwrap();
    assert!(frac > 0.0 && frac <= 1.0 + 1e-12);

    let ck = read_container(&proj).unwrap();
    assert_eq!(ck.get("scores").unwrap().shape(), &[64, 3]);
    assert_eq!(ck.get("scores_minmax").unwrap().shape(), &[64, 3]);
    assert_eq!(ck.get("components").unwrap().shape(), &[3, 32]);
    assert_eq!(ck.get("eigenvalues").unwrap().shape(), &[3]);
    for &x in ck.get("scores_minmax").unwrap().data() {
        assert!((0.0..=1.0).contains(&x));
    }
}

#[test]
fn neck_with_zero_alpha_copies_the_depth_features() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out, _) = run(gmerge().args([
        "synth",
        "feature-pair",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]));
    let listing = json_line(&out);
    let mde_path = listing["mde"].as_str().unwrap();

    let fused = dir.path().join("fused.gmrg");
    let (code, out, _) = run(gmerge().args([
        "neck",
        "--mde",
        mde_path,
        "--fa",
        listing["fa"].as_str().unwrap(),
        "--alpha",
        "0",
        "--out",
        fused.to_str().unwrap(),
    ]));
    assert_eq!(code, Some(0));
    assert_eq!(json_line(&out)["alpha"].as_f64().unwrap(), 0.0);

    let input = read_container(Path::new(mde_path)).unwrap();
    let output = read_container(&fused).unwrap();
    assert_eq!(
        input.get("features").unwrap(),
        output.get("features").unwrap(),
        "alpha = 0 must copy the depth features bit for bit"
    );
}

#[test]
fn synth_outputs_are_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run_synth = |tag: &str, seed: &str| -> std::path::PathBuf {
        let out = dir.path().join(format!("{tag}_{seed}"));
        let (code, _, _) = run(gmerge().args([
            "--seed",
            seed,
            "synth",
            "checkpoint-triple",
            "--layers",
            "3",
            "--neurons",
            "16",
            "--out-dir",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, Some(0));
        out
    };
    let a = run_synth("a", "9");
    let b = run_synth("b", "9");
    let c = run_synth("c", "10");
    for name in ["base.gmrg", "vggt.gmrg", "mde.gmrg"] {
        let bytes_a = std::fs::read(a.join(name)).unwrap();
        let bytes_b = std::fs::read(b.join(name)).unwrap();
        let bytes_c = std::fs::read(c.join(name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "same seed must reproduce {name}");
        assert_ne!(bytes_a, bytes_c, "different seeds must vary {name}");
    }
}

#[test]
fn allow_partial_copies_unmatched_layers_through() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = dir.path().join("t");
    run(gmerge().args([
        "synth",
        "checkpoint-triple",
        "--layers",
        "3",
        "--neurons",
        "8",
        "--out-dir",
        fixtures.to_str().unwrap(),
    ]));

    // Give the specialists a shape conflict on one layer.
    let vggt_path = fixtures.join("vggt.gmrg");
    let mut vggt = read_container(&vggt_path).unwrap();
    let reshaped = gmerge::tensor::Tensor::f64(vec![2, 4], vec![0.0; 8]).unwrap();
    vggt.insert("layer000", reshaped);
    gmerge::container::write_container(&vggt, &vggt_path).unwrap();

    let out = dir.path().join("merged.gmrg");
    let report = dir.path().join("report.json");
    let strict = run(gmerge().args([
        "merge",
        "--base",
        fixtures.join("base.gmrg").to_str().unwrap(),
        "--vggt",
        vggt_path.to_str().unwrap(),
        "--mde",
        fixtures.join("mde.gmrg").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]));
    assert_eq!(strict.0, Some(1), "strict merge must refuse shape conflicts");
    assert!(strict.2.contains("layer000"), "stderr: {}", strict.2);

    let (code, stdout, _) = run(gmerge().args([
        "merge",
        "--allow-partial",
        "--base",
        fixtures.join("base.gmrg").to_str().unwrap(),
        "--vggt",
        vggt_path.to_str().unwrap(),
        "--mde",
        fixtures.join("mde.gmrg").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]));
    assert_eq!(code, Some(0));
    assert_eq!(json_line(&stdout)["layers"].as_u64().unwrap(), 2);

    let base = read_container(&fixtures.join("base.gmrg")).unwrap();
    let merged = read_container(&out).unwrap();
    assert_eq!(merged.len(), 3);
    assert_eq!(
        merged.get("layer000").unwrap(),
        base.get("layer000").unwrap(),
        "conflicted layer must be copied through from the base"
    );
}
