//! Mode-collapse and clustering metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::clustering::Partition;
use crate::data::{sample, MixtureSpec, TrainingSet};
use crate::error::{Error, Result};
use crate::models::CondGanModel;
use crate::rng::Rng;

/// Index of the closest mixture mean; ties resolve to the lowest index.
pub fn nearest_mode(point: &[f64], spec: &MixtureSpec) -> usize {
    nearest_mode_with_distance(point, spec).0
}

fn nearest_mode_with_distance(point: &[f64], spec: &MixtureSpec) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, m) in spec.means.iter().enumerate() {
        let d2 = (point[0] - m[0]).powi(2) + (point[1] - m[1]).powi(2);
        if d2 < best.1 {
            best = (i, d2);
        }
    }
    (best.0, best.1.sqrt())
}

/// Within three standard deviations (inclusive) of the nearest mean.
pub fn high_quality(point: &[f64], spec: &MixtureSpec) -> bool {
    nearest_mode_with_distance(point, spec).1 <= 3.0 * spec.std_dev()
}

/// Number of modes owning at least one high-quality sample, where a sample
/// belongs to its nearest mode.
pub fn modes_covered(samples: &Matrix, spec: &MixtureSpec) -> usize {
    let mut hit = vec![false; spec.num_modes()];
    let radius = 3.0 * spec.std_dev();
    for p in samples.iter_rows() {
        let (m, d) = nearest_mode_with_distance(p, spec);
        if d <= radius {
            hit[m] = true;
        }
    }
    hit.iter().filter(|&&h| h).count()
}

pub fn high_quality_fraction(samples: &Matrix, spec: &MixtureSpec) -> f64 {
    if samples.rows() == 0 {
        return 0.0;
    }
    let good = samples.iter_rows().filter(|p| high_quality(p, spec)).count();
    good as f64 / samples.rows() as f64
}

/// Empirical distribution of nearest-mode assignments.
pub fn mode_histogram(samples: &Matrix, spec: &MixtureSpec) -> Vec<f64> {
    let mut counts = vec![0usize; spec.num_modes()];
    for p in samples.iter_rows() {
        counts[nearest_mode(p, spec)] += 1;
    }
    let n = samples.rows().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

/// `KL(p ‖ q)` in nats with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

/// `KL(p_fake ‖ p_real)` over nearest-mode histograms, using the mixture's
/// exact weights as `p_real`.
pub fn reverse_kl(fake_samples: &Matrix, spec: &MixtureSpec) -> Result<f64> {
    if fake_samples.rows() == 0 {
        return Err(Error::contract("reverse KL needs at least one sample"));
    }
    Ok(kl_divergence(&mode_histogram(fake_samples, spec), &spec.weights))
}

/// Variant with `p_real` taken from an empirical histogram of real samples.
pub fn reverse_kl_empirical(fake_samples: &Matrix, real_samples: &Matrix, spec: &MixtureSpec) -> Result<f64> {
    if fake_samples.rows() == 0 || real_samples.rows() == 0 {
        return Err(Error::contract("reverse KL needs at least one sample"));
    }
    let p_fake = mode_histogram(fake_samples, spec);
    let p_real = mode_histogram(real_samples, spec);
    // A fake mode with no real mass makes the divergence infinite.
    Ok(p_fake
        .iter()
        .zip(&p_real)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| if q > 0.0 { p * (p / q).ln() } else { f64::INFINITY })
        .sum::<f64>()
        .max(0.0))
}

/// Joint counts over densely re-indexed label values. Labels are re-indexed
/// in sorted order so that sums are evaluated in a fixed order.
fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<usize>>, Vec<usize>, Vec<usize>) {
    let dense = |xs: &[usize]| {
        let mut uniq = xs.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        let ids: Vec<usize> = xs.iter().map(|x| uniq.binary_search(x).unwrap()).collect();
        (ids, uniq.len())
    };
    let (ia, na) = dense(a);
    let (ib, nb) = dense(b);
    let mut joint = vec![vec![0usize; nb]; na];
    let mut ca = vec![0usize; na];
    let mut cb = vec![0usize; nb];
    for (&x, &y) in ia.iter().zip(&ib) {
        joint[x][y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    (joint, ca, cb)
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("label length mismatch: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::contract("labelings must be non-empty"));
    }
    Ok(())
}

/// `2 I(X; Y) / (H(X) + H(Y))` in nats. Two constant labelings give 1.
pub fn nmi(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    check_lengths(labels_a, labels_b)?;
    let n = labels_a.len() as f64;
    let (joint, ca, cb) = contingency(labels_a, labels_b);
    let ha = entropy(&ca, n);
    let hb = entropy(&cb, n);
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (x, row) in joint.iter().enumerate() {
        for (y, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            mi += pxy * (c as f64 * n / (ca[x] as f64 * cb[y] as f64)).ln();
        }
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// `(1/N) Σ_c max_y |π_c ∩ π*_y|`.
pub fn purity(inferred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(inferred, truth)?;
    let (joint, _, _) = contingency(inferred, truth);
    let hits: usize = joint.iter().map(|row| *row.iter().max().unwrap_or(&0)).sum();
    Ok(hits as f64 / inferred.len() as f64)
}

/// One evaluation snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub modes_covered: usize,
    pub high_quality_fraction: f64,
    pub reverse_kl: f64,
    pub nmi: f64,
    pub purity: f64,
    /// NMI between the last two full-set labelings; absent until a second
    /// clustering exists.
    pub stability_nmi: Option<f64>,
    pub clustering_objective: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "iteration,modes_covered,high_quality_fraction,reverse_kl,nmi,purity,stability_nmi,clustering_objective";

    /// CSV row in `CSV_HEADER` order; a missing stability NMI is an empty field.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.modes_covered,
            self.high_quality_fraction,
            self.reverse_kl,
            self.nmi,
            self.purity,
            self.stability_nmi.map(|v| v.to_string()).unwrap_or_default(),
            self.clustering_objective
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }

    /// Checks every field against its documented range.
    pub fn check_ranges(&self, num_modes: usize) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::contract(format!("{name} = {v} outside [0, 1]")))
            }
        };
        if self.modes_covered > num_modes {
            return Err(Error::contract(format!(
                "modes_covered {} exceeds {num_modes}",
                self.modes_covered
            )));
        }
        unit("high_quality_fraction", self.high_quality_fraction)?;
        unit("nmi", self.nmi)?;
        unit("purity", self.purity)?;
        if let Some(s) = self.stability_nmi {
            unit("stability_nmi", s)?;
        }
        if !(self.purity > 0.0) {
            return Err(Error::contract("purity must be positive"));
        }
        if !(self.reverse_kl >= 0.0) {
            return Err(Error::contract(format!("reverse_kl = {} is negative", self.reverse_kl)));
        }
        Ok(())
    }
}

/// Sample-quality part of a snapshot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleQuality {
    pub modes_covered: usize,
    pub high_quality_fraction: f64,
    pub reverse_kl: f64,
}

pub fn sample_quality(samples: &Matrix, spec: &MixtureSpec) -> Result<SampleQuality> {
    Ok(SampleQuality {
        modes_covered: modes_covered(samples, spec),
        high_quality_fraction: high_quality_fraction(samples, spec),
        reverse_kl: reverse_kl(samples, spec)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_samples: usize,
    /// Compare against the histogram of `n_samples` real draws instead of the exact weights.
    pub empirical_real: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            empirical_real: false,
        }
    }
}

/// Full snapshot: fakes drawn with `z ~ N(0, I)`, `c ~ P_π`, plus agreement of
/// the partition's full-set labels with the true modes. `iteration` and
/// `stability_nmi` are left for the caller.
pub fn evaluate(
    model: &CondGanModel,
    partition: &Partition,
    data: &TrainingSet,
    spec: &MixtureSpec,
    opts: EvalOptions,
    rng: &mut Rng,
) -> Result<MetricsRecord> {
    let n = opts.n_samples;
    if n == 0 {
        return Err(Error::contract("evaluation needs at least one sample"));
    }
    let classes: Vec<usize> = (0..n)
        .map(|_| {
            rng.weighted_index(&partition.sampling_weights)
                .ok_or_else(|| Error::contract("partition has no mass"))
        })
        .collect::<Result<_>>()?;
    let d = model.config.latent_dim;
    let z = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect())?;
    let fakes = model.generator_forward(&z, &classes)?;

    let mut quality = sample_quality(&fakes, spec)?;
    if opts.empirical_real {
        let (real, _) = sample(spec, n, rng);
        quality.reverse_kl = reverse_kl_empirical(&fakes, &real, spec)?;
    }
    Ok(MetricsRecord {
        iteration: 0,
        modes_covered: quality.modes_covered,
        high_quality_fraction: quality.high_quality_fraction,
        reverse_kl: quality.reverse_kl,
        nmi: nmi(&data.labels, &data.true_modes)?,
        purity: purity(&data.labels, &data.true_modes)?,
        stability_nmi: None,
        clustering_objective: partition.objective,
    })
}
