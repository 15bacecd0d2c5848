use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::{DataError, LabeledDataset, Labels, Result};

/// Cluster centers are drawn uniformly from `[-CENTER_BOX, CENTER_BOX]^d`.
const CENTER_BOX: f64 = 4.0;

fn normal_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// Standard-normal features and `y = X w* + eps`, `eps ~ N(0, noise_std^2)`; returns `w*`.
pub fn make_regression(
    n: usize,
    d: usize,
    noise_std: f64,
    seed: u64,
) -> Result<(LabeledDataset, Vec<f64>)> {
    if d == 0 || n <= d {
        return Err(DataError::InvalidArgument(format!(
            "make_regression needs n > d >= 1, got n={n} d={d}"
        )));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(DataError::InvalidArgument(format!("noise_std {noise_std}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let w: Array1<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let x = normal_matrix(&mut rng, n, d);
    let mut y = x.dot(&w);
    for v in y.iter_mut() {
        *v += noise_std * rng.sample::<f64, _>(StandardNormal);
    }
    let ds = LabeledDataset::new(x, Labels::Values(y.to_vec()))?;
    Ok((ds, w.to_vec()))
}

/// `k` isotropic Gaussian clusters with standard deviation `spread`; row `i` belongs to class
/// `i % k`.
pub fn make_blobs(n: usize, d: usize, k: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    make_blobs_with_centers(n, d, k, spread, seed).map(|(ds, _)| ds)
}

/// As [`make_blobs`], also returning the `k x d` matrix of cluster centers.
pub fn make_blobs_with_centers(
    n: usize,
    d: usize,
    k: usize,
    spread: f64,
    seed: u64,
) -> Result<(LabeledDataset, Array2<f64>)> {
    if k < 2 || d == 0 {
        return Err(DataError::InvalidArgument(format!(
            "make_blobs needs k >= 2 and d >= 1, got k={k} d={d}"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(DataError::InvalidArgument(format!("spread {spread}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let centers =
        Array2::from_shape_simple_fn((k, d), || rng.random_range(-CENTER_BOX..CENTER_BOX));
    let ids: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut x = normal_matrix(&mut rng, n, d);
    x *= spread;
    for (mut row, &c) in x.rows_mut().into_iter().zip(&ids) {
        row += &centers.row(c);
    }
    let ds = LabeledDataset::new(x, Labels::Classes { ids, classes: k })?;
    Ok((ds, centers))
}
