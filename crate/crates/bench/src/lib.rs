//! Fixtures shared by the benchmarks.

use selfcond_core::{Matrix, Rng};

/// `rows × cols` standard normal entries.
pub fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

/// Uniform random labels in `[0, k)`.
pub fn random_labels(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n).map(|_| rng.below(k)).collect()
}
