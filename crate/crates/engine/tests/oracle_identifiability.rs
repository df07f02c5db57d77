//! The synthetic dataset must be exactly learnable: an ordinary
//! least-squares fit from the emitted audio features to the stored mouth
//! channels recovers the emitted map coefficients almost to machine
//! precision, clip by clip.

use blenddiff_engine::blendshape::ChannelLayout;
use blenddiff_engine::data::{generate_oracle, load_dataset, OracleSpec};
use tempfile::tempdir;

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
/// Test-side reference; independent of every engine code path.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        assert!(a[col][col].abs() > 1e-12, "singular normal equations");
        for row in (col + 1)..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    x
}

#[test]
fn ols_recovers_oracle_map_coefficients() {
    let layout = ChannelLayout::arkit();
    let spec = OracleSpec {
        seed: 1234,
        clip_count: 3,
        frames_per_clip: 80,
        feature_dim: 12,
        ..OracleSpec::default()
    };
    let dir = tempdir().unwrap();
    let outcome = generate_oracle(&spec, &layout, dir.path()).unwrap();
    let truth = &outcome.ground_truth;
    let (_, clips) = load_dataset(&outcome.manifest_path).unwrap();

    let a_dim = spec.feature_dim;
    let unknowns = a_dim + 1; // slope row + intercept
    for clip in &clips {
        let feats = clip.audio.feats();
        let seq = clip.sequence.to_matrix();
        let frames = feats.nrows();

        // Normal equations X^T X and X^T y with X = [features | 1].
        let design = |n: usize, j: usize| -> f64 {
            if j < a_dim {
                feats[[n, j]]
            } else {
                1.0
            }
        };
        let mut xtx = vec![vec![0.0; unknowns]; unknowns];
        for i in 0..unknowns {
            for j in 0..unknowns {
                xtx[i][j] = (0..frames).map(|n| design(n, i) * design(n, j)).sum();
            }
        }

        let intercepts = &truth.label_intercepts[&clip.emotion_label];
        for (k, &ch) in truth.mouth_channels.iter().enumerate() {
            let xty: Vec<f64> = (0..unknowns)
                .map(|i| (0..frames).map(|n| design(n, i) * seq[[n, ch]]).sum())
                .collect();
            let coef = gauss_solve(xtx.clone(), xty);
            for (j, &w) in truth.map_weights[k].iter().enumerate() {
                assert!(
                    (coef[j] - w).abs() < 1e-6,
                    "clip {} channel {ch} slope {j}: fit {} vs truth {w}",
                    clip.clip_id,
                    coef[j]
                );
            }
            assert!(
                (coef[a_dim] - intercepts[k]).abs() < 1e-6,
                "clip {} channel {ch} intercept: fit {} vs truth {}",
                clip.clip_id,
                coef[a_dim],
                intercepts[k]
            );
        }
    }
}
