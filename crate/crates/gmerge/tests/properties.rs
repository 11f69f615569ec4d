//! Property tests for the structural invariants the rest of the system
//! leans on: simplex geometry, probability normalization, byte round
//! trips, conversion inverses, and symmetry of the compatibility check.

use proptest::prelude::*;

use gmerge::camera::{focal_from_fov, fov_from_focal};
use gmerge::container::{container_from_bytes, container_to_bytes};
use gmerge::emwm::{entropy, layer_distribution, project_simplex, NeuronScalars};
use gmerge::merge::{apply_merge, LayerCoeffs, MergeCoefficients};
use gmerge::metrics::{bad_pixel_rate, depth_from_disparity, disparity_from_depth, epe, GridMap, StereoRig};
use gmerge::synth;
use gmerge::tensor::{validate_compat, Checkpoint, Tensor};

fn on_simplex(p: (f64, f64)) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && (p.0 + p.1 - 1.0).abs() <= 1e-12
}

proptest! {
    // ------------------------------------------------------------------
    // Simplex projection: feasible output, idempotent, identity on the
    // simplex itself.
    // ------------------------------------------------------------------

    #[test]
    fn projection_lands_on_the_simplex(
        x in -1e12f64..1e12,
        y in -1e12f64..1e12,
    ) {
        let p = project_simplex((x, y));
        prop_assert!(on_simplex(p), "({x}, {y}) -> {p:?}");
    }

    #[test]
    fn projection_is_idempotent_on_its_outputs(
        x in -1e12f64..1e12,
        y in -1e12f64..1e12,
    ) {
        let p = project_simplex((x, y));
        let q = project_simplex(p);
        prop_assert_eq!(p.0.to_bits(), q.0.to_bits());
        prop_assert_eq!(p.1.to_bits(), q.1.to_bits());
    }

    #[test]
    fn projection_keeps_simplex_points_bitwise(v in 0.0f64..=1.0) {
        // Construct an exactly feasible pair.
        let m = 1.0 - v;
        prop_assume!(v + m == 1.0);
        let p = project_simplex((v, m));
        prop_assert_eq!(p.0.to_bits(), v.to_bits());
        prop_assert_eq!(p.1.to_bits(), m.to_bits());
    }

    // ------------------------------------------------------------------
    // Temperature softmax and entropy.
    // ------------------------------------------------------------------

    #[test]
    fn distribution_is_normalized_and_entropy_bounded(
        values in prop::collection::vec(-50.0f64..50.0, 1..80),
        beta in 1e-4f64..4.0,
    ) {
        let n = values.len();
        let scalars = NeuronScalars::new(values).unwrap();
        let p = layer_distribution(&scalars, beta);
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12, "sum = {sum}");
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let h = entropy(&p).unwrap();
        prop_assert!(h >= 0.0, "entropy {h}");
        prop_assert!(h <= (n as f64).log2() + 1e-9, "entropy {h} over log2({n})");
    }

    #[test]
    fn distribution_is_invariant_to_constant_shifts(
        values in prop::collection::vec(-5.0f64..5.0, 2..40),
        shift in -100.0f64..100.0,
        beta in 1e-2f64..4.0,
    ) {
        let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
        let a = layer_distribution(&NeuronScalars::new(values).unwrap(), beta);
        let b = layer_distribution(&NeuronScalars::new(shifted).unwrap(), beta);
        for (pa, pb) in a.iter().zip(&b) {
            prop_assert!((pa - pb).abs() <= 1e-9, "{pa} vs {pb}");
        }
    }

    // ------------------------------------------------------------------
    // Container format.
    // ------------------------------------------------------------------

    #[test]
    fn containers_round_trip_bitwise(seed in any::<u64>(), layers in 0usize..8) {
        let ck = synth::random_checkpoint(layers, seed);
        let bytes = container_to_bytes(&ck).unwrap();
        let back = container_from_bytes(&bytes).unwrap();
        prop_assert_eq!(&ck, &back);
        prop_assert_eq!(bytes, container_to_bytes(&back).unwrap());
    }

    // ------------------------------------------------------------------
    // Conversions are inverses.
    // ------------------------------------------------------------------

    #[test]
    fn fov_focal_inverse(
        f in 1.0f64..1e6,
        width in 1.0f64..1e5,
        height in 1.0f64..1e5,
    ) {
        let (fov_x, fov_y) = fov_from_focal(f, f, width, height).unwrap();
        let (fx, fy) = focal_from_fov(fov_x, fov_y, width, height).unwrap();
        prop_assert!((fx - f).abs() / f <= 1e-9, "{f} -> {fov_x} -> {fx}");
        prop_assert!((fy - f).abs() / f <= 1e-9, "{f} -> {fov_y} -> {fy}");
    }

    #[test]
    fn disparity_depth_inverse(
        depths in prop::collection::vec(0.1f64..500.0, 1..64),
        focal in 10.0f64..2000.0,
        baseline in 0.01f64..2.0,
    ) {
        let n = depths.len();
        let rig = StereoRig::new(focal, baseline).unwrap();
        let grid = GridMap::new(1, n, depths).unwrap();
        let back = depth_from_disparity(&disparity_from_depth(&grid, rig).unwrap(), rig).unwrap();
        for (a, b) in grid.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() / a <= 1e-12, "{a} -> {b}");
        }
    }

    // ------------------------------------------------------------------
    // Merging stays inside the specialists' envelope once the base
    // coefficient collapses, and the metrics stay in range.
    // ------------------------------------------------------------------

    #[test]
    fn merged_layers_stay_in_the_specialists_envelope(
        data in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3), 1..32),
        v in 0.0f64..=1.0,
    ) {
        let m = 1.0 - v;
        prop_assume!(v + m == 1.0);
        let n = data.len();
        let (b, vg, md): (Vec<f64>, Vec<f64>, Vec<f64>) = data
            .iter()
            .fold((vec![], vec![], vec![]), |(mut a, mut b2, mut c), &(x, y, z)| {
                a.push(x);
                b2.push(y);
                c.push(z);
                (a, b2, c)
            });
        let mut base = Checkpoint::new();
        base.insert("w", Tensor::f64(vec![n], b).unwrap());
        let mut vggt = Checkpoint::new();
        vggt.insert("w", Tensor::f64(vec![n], vg.clone()).unwrap());
        let mut mde = Checkpoint::new();
        mde.insert("w", Tensor::f64(vec![n], md.clone()).unwrap());
        let coeffs = MergeCoefficients::uniform(
            base.names(),
            LayerCoeffs::new(v, m).unwrap(),
        );
        let merged = apply_merge(&base, &vggt, &mde, &coeffs).unwrap();
        let out = merged.get("w").unwrap().data();
        for i in 0..n {
            let lo = vg[i].min(md[i]);
            let hi = vg[i].max(md[i]);
            let slack = 1e-9 * (1.0 + vg[i].abs() + md[i].abs());
            prop_assert!(
                out[i] >= lo - slack && out[i] <= hi + slack,
                "element {i}: {} outside [{lo}, {hi}]",
                out[i]
            );
        }
    }

    #[test]
    fn error_rates_are_bounded_and_monotone(
        pairs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..64),
        tau_lo in 0.0f64..5.0,
        gap in 0.0f64..5.0,
    ) {
        let n = pairs.len();
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let pred = GridMap::new(1, n, p).unwrap();
        let gt = GridMap::new(1, n, g).unwrap();
        let e = epe(&pred, &gt).unwrap();
        prop_assert!(e >= 0.0);
        let lo = bad_pixel_rate(&pred, &gt, tau_lo).unwrap();
        let hi = bad_pixel_rate(&pred, &gt, tau_lo + gap).unwrap();
        prop_assert!((0.0..=100.0).contains(&lo));
        prop_assert!((0.0..=100.0).contains(&hi));
        prop_assert!(hi <= lo, "raising the threshold cannot flag more pixels");
    }

    // ------------------------------------------------------------------
    // Compatibility is symmetric (up to which side a mismatch names).
    // ------------------------------------------------------------------

    #[test]
    fn compatibility_is_symmetric(seed_a in any::<u64>(), seed_b in any::<u64>()) {
        let a = synth::random_checkpoint((seed_a % 6) as usize, seed_a);
        let b = synth::random_checkpoint((seed_b % 6) as usize, seed_b);
        let ab = validate_compat(&a, &b);
        let ba = validate_compat(&b, &a);
        prop_assert_eq!(ab.compatible(), ba.compatible());
        prop_assert_eq!(ab.mismatches.len(), ba.mismatches.len());
    }

    // ------------------------------------------------------------------
    // Single-precision storage is a projection: rounding twice equals
    // rounding once.
    // ------------------------------------------------------------------

    #[test]
    fn f32_rounding_is_idempotent(values in prop::collection::vec(-1e30f64..1e30, 1..32)) {
        let n = values.len();
        let once = Tensor::f32(vec![n], values).unwrap();
        let twice = Tensor::f32(vec![n], once.data().to_vec()).unwrap();
        prop_assert_eq!(&once, &twice);
    }
}
