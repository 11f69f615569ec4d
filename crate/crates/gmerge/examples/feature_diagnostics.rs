//! Projecting high-dimensional token features to three channels for
//! visualization, via deterministic deflated power iteration.
//!
//! The returned axes are orthonormal, variance-sorted, and sign-fixed
//! (largest-magnitude loading positive), so repeated runs on the same
//! features produce identical projections.
//!
//! Run with: cargo run --example feature_diagnostics

use gmerge::metrics::pca_project3;
use gmerge::neck::FeatureMap;

fn main() -> anyhow::Result<()> {
    // 200 tokens, 16 channels, with three strong planted directions.
    let (t, c) = (200usize, 16usize);
    let data: Vec<f64> = (0..t * c)
        .map(|i| {
            let (row, col) = (i / c, i % c);
            let x = row as f64 * 0.05;
            match col {
                0 => 4.0 * x.sin(),
                1 => 2.0 * (1.7 * x).cos(),
                2 => 0.8 * (0.3 * x).sin(),
                _ => 0.05 * ((row * 31 + col * 17) % 13) as f64 / 13.0,
            }
        })
        .collect();
    let features = FeatureMap::new(t, c, data)?;

    let pca = pca_project3(&features)?;
    println!("eigenvalues: {:?}", pca.eigenvalues);

    let total: f64 = {
        // Sum of per-channel variances = total variance to explain.
        let mean = |j: usize| (0..t).map(|r| features.get(r, j)).sum::<f64>() / t as f64;
        (0..c)
            .map(|j| {
                let mu = mean(j);
                (0..t).map(|r| (features.get(r, j) - mu).powi(2)).sum::<f64>() / (t - 1) as f64
            })
            .sum()
    };
    println!(
        "explained variance: {:.2}% of {total:.4}",
        100.0 * pca.eigenvalues.iter().sum::<f64>() / total
    );

    for k in 0..3 {
        let row = pca.components.row(k);
        let strongest = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        println!(
            "axis {k}: strongest loading {:.4} on channel {} (norm {:.6})",
            strongest.1,
            strongest.0,
            row.iter().map(|x| x * x).sum::<f64>().sqrt()
        );
    }

    // Scores are the centered features in the new basis: per-column
    // variance equals the eigenvalue.
    for k in 0..3 {
        let col: Vec<f64> = (0..t).map(|r| pca.scores.get(r, k)).collect();
        let mean: f64 = col.iter().sum::<f64>() / t as f64;
        let var: f64 = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t - 1) as f64;
        println!(
            "score column {k}: mean {mean:+.2e}, variance {var:.6} (eigenvalue {:.6})",
            pca.eigenvalues[k]
        );
    }

    // Determinism: a second run is bit-identical.
    let again = pca_project3(&features)?;
    assert_eq!(again.scores, pca.scores);
    assert_eq!(again.components, pca.components);
    println!("second run reproduces scores and components bit for bit");
    Ok(())
}
