//! Ground-truth 2D Gaussian mixtures and fixed training sets.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Isotropic, uniformly weighted mixture of 2D Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub name: String,
    pub means: Vec<[f64; 2]>,
    /// Per-dimension variance shared by every mode.
    pub variance: f64,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(name: impl Into<String>, means: Vec<[f64; 2]>, variance: f64) -> Result<Self> {
        if !(variance > 0.0) || !variance.is_finite() {
            return Err(Error::contract(format!("variance must be positive, got {variance}")));
        }
        if means.is_empty() {
            return Err(Error::contract("mixture needs at least one mode"));
        }
        let w = 1.0 / means.len() as f64;
        Ok(Self {
            name: name.into(),
            weights: vec![w; means.len()],
            means,
            variance,
        })
    }

    pub fn num_modes(&self) -> usize {
        self.means.len()
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Eight modes evenly spaced on the unit circle, variance 1e-4.
pub fn make_ring() -> MixtureSpec {
    let means = (0..8)
        .map(|i| {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / 8.0;
            [angle.cos(), angle.sin()]
        })
        .collect();
    MixtureSpec::new("ring", means, 1e-4).expect("valid constants")
}

pub const GRID_VARIANCE: f64 = 0.0025;

/// 5×5 grid with means `(2i - 4, 2j - 4)`; mode `5i + j` sits at grid cell `(i, j)`.
pub fn make_grid(variance: f64) -> Result<MixtureSpec> {
    let mut means = Vec::with_capacity(25);
    for i in 0..5 {
        for j in 0..5 {
            means.push([2.0 * i as f64 - 4.0, 2.0 * j as f64 - 4.0]);
        }
    }
    MixtureSpec::new("grid", means, variance)
}

/// Draws `n` points; returns the points (`n × 2`) and the mode each came from.
pub fn sample(spec: &MixtureSpec, n: usize, rng: &mut Rng) -> (Matrix, Vec<usize>) {
    let sd = spec.std_dev();
    let mut data = Vec::with_capacity(2 * n);
    let mut modes = Vec::with_capacity(n);
    for _ in 0..n {
        let m = rng.below(spec.num_modes());
        let [mx, my] = spec.means[m];
        data.push(mx + sd * rng.normal());
        data.push(my + sd * rng.normal());
        modes.push(m);
    }
    (Matrix::from_vec(n, 2, data).expect("sized above"), modes)
}

/// A fixed training set with the random subset that k-means runs on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub points: Matrix,
    pub true_modes: Vec<usize>,
    pub clustering_subset: Vec<usize>,
    /// Current cluster label of every point; maintained by the trainer.
    pub labels: Vec<usize>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    /// Writes `x,y,true_mode` rows with a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,y,true_mode")?;
        for (row, mode) in self.points.iter_rows().zip(&self.true_modes) {
            writeln!(out, "{},{},{}", row[0], row[1], mode)?;
        }
        Ok(())
    }
}

pub fn build_training_set(
    spec: &MixtureSpec,
    n: usize,
    subset_size: usize,
    rng: &mut Rng,
) -> Result<TrainingSet> {
    if subset_size > n {
        return Err(Error::contract(format!(
            "clustering subset ({subset_size}) larger than training set ({n})"
        )));
    }
    let (points, true_modes) = sample(spec, n, rng);
    let clustering_subset = rng.sample_distinct(n, subset_size);
    Ok(TrainingSet {
        points,
        true_modes,
        clustering_subset,
        labels: vec![0; n],
    })
}
