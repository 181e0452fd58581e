//! Self-conditioned GAN training loop.
//!
//! Each iteration takes one discriminator step and one generator step on
//! cluster-conditioned batches. The partition is rebuilt every
//! `recluster_every` iterations (warm start, k-means, Hungarian relabel,
//! nearest-centroid propagation), or, in online mode, updated every
//! iteration from the real mini-batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Matrix, Tape, LOG_FLOOR};
use crate::clustering::{
    self, counts, kmeans_pp_init, lloyd, match_clusters, propagate_labels, warm_start_centroids,
    KMeansFit, Matching, Partition,
};
use crate::data::{build_training_set, sample, MixtureSpec, TrainingSet};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalOptions, MetricsRecord};
use crate::models::{CondGanModel, ModelConfig};
use crate::rng::Rng;

/// Losses with a magnitude above this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub leaky_slope: f64,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: u64,
    /// Overrides `epochs` when set.
    pub iterations: Option<u64>,
    pub saturating_loss: bool,

    pub train_size: usize,
    pub subset_size: usize,
    /// Cluster every training point instead of a random subset.
    pub cluster_full_set: bool,
    /// Draw fresh mixture samples for every real batch.
    pub infinite_data: bool,

    pub recluster_every: u64,
    pub restarts: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,

    pub online: bool,
    pub online_start: u64,
    /// Start online counters at zero instead of the last subset cluster sizes.
    pub online_reset_counts: bool,

    pub no_warm_start: bool,
    pub no_matching: bool,
    pub random_labels: bool,
    pub unconditional: bool,

    pub seed: u64,
    pub eval_every: u64,
    pub eval_samples: usize,
    /// Compare against an empirical real histogram instead of exact weights.
    pub empirical_real_kl: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 100,
            latent_dim: 2,
            embed_dim: 32,
            gen_hidden: vec![128, 128],
            disc_hidden: vec![128, 128],
            leaky_slope: 0.2,
            batch_size: 100,
            learning_rate: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            epochs: 400,
            iterations: None,
            saturating_loss: false,
            train_size: 50_000,
            subset_size: 10_000,
            cluster_full_set: false,
            infinite_data: false,
            recluster_every: 10_000,
            restarts: clustering::DEFAULT_RESTARTS,
            kmeans_max_iters: clustering::DEFAULT_MAX_ITERS,
            kmeans_tol: clustering::DEFAULT_TOL,
            online: false,
            online_start: 25_000,
            online_reset_counts: false,
            no_warm_start: false,
            no_matching: false,
            random_labels: false,
            unconditional: false,
            seed: 0,
            eval_every: 10_000,
            eval_samples: 10_000,
            empirical_real_kl: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if self.recluster_every == 0 {
            return fail("recluster_every must be positive".into());
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.unconditional && self.k != 1 {
            return fail(format!("unconditional training requires k = 1, got {}", self.k));
        }
        if self.batch_size == 0 || self.train_size == 0 || self.eval_samples == 0 {
            return fail("batch_size, train_size and eval_samples must be positive".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        if self.subset_size > self.train_size {
            return fail(format!(
                "subset_size {} exceeds train_size {}",
                self.subset_size, self.train_size
            ));
        }
        let clustered = if self.cluster_full_set { self.train_size } else { self.subset_size };
        if !self.random_labels && clustered < self.k {
            return fail(format!("cannot form {} clusters from {clustered} points", self.k));
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive".into());
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> u64 {
        self.iterations
            .unwrap_or(self.epochs * self.train_size as u64 / self.batch_size as u64)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            k: self.k,
            latent_dim: self.latent_dim,
            data_dim: 2,
            embed_dim: self.embed_dim,
            gen_hidden: self.gen_hidden.clone(),
            disc_hidden: self.disc_hidden.clone(),
            leaky_slope: self.leaky_slope,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Batch reclustering is active at iteration `t` (1-based).
    fn batch_recluster_at(&self, t: u64) -> bool {
        !self.random_labels && t.is_multiple_of(self.recluster_every) && !(self.online && t >= self.online_start)
    }

    fn online_at(&self, t: u64) -> bool {
        self.online && !self.random_labels && t >= self.online_start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReclusterReport {
    pub iteration: u64,
    /// `rho[c_old] = c_new` before relabeling.
    pub matching: Matching,
    /// Within-cluster sum of squares of the new subset clustering.
    pub objective: f64,
    pub lloyd_iterations: usize,
    /// NMI between the previous and the new full-set labelings.
    pub stability_nmi: f64,
    /// Fraction of training points whose label id is unchanged.
    pub label_agreement: f64,
}

/// Per-cluster membership lists with O(1) moves.
#[derive(Clone, Debug, Default, PartialEq)]
struct Members {
    lists: Vec<Vec<usize>>,
    position: Vec<usize>,
}

impl Members {
    fn build(labels: &[usize], k: usize) -> Self {
        let mut lists = vec![Vec::new(); k];
        let mut position = vec![0; labels.len()];
        for (i, &l) in labels.iter().enumerate() {
            position[i] = lists[l].len();
            lists[l].push(i);
        }
        Self { lists, position }
    }

    fn relocate(&mut self, point: usize, from: usize, to: usize) {
        if from == to {
            return;
        }
        let pos = self.position[point];
        let list = &mut self.lists[from];
        list.swap_remove(pos);
        if let Some(&moved) = list.get(pos) {
            self.position[moved] = pos;
        }
        self.position[point] = self.lists[to].len();
        self.lists[to].push(point);
    }
}

/// Everything that evolves during a run. Serializes into checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainerState {
    pub model: CondGanModel,
    pub partition: Partition,
    pub iteration: u64,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub online_counts: Option<Vec<u64>>,
    pub history: Vec<MetricsRecord>,
    pub reports: Vec<ReclusterReport>,
    pub rng: Rng,
    pub eval_rng: Rng,
    pub last_stability_nmi: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub spec: MixtureSpec,
    pub data: TrainingSet,
    pub state: TrainerState,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// A conditioned real mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RealBatch {
    pub points: Matrix,
    pub classes: Vec<usize>,
    /// Training-set index of each row; `None` for freshly drawn data.
    pub indices: Option<Vec<usize>>,
}

/// Receives run artifacts as they are produced.
pub trait RunObserver {
    fn on_metrics(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    fn on_recluster(&mut self, _report: &ReclusterReport) -> Result<()> {
        Ok(())
    }

    /// Called once the iteration is complete; `milestone` is set when the
    /// step reclustered or recorded a snapshot.
    fn on_step_end(&mut self, _trainer: &Trainer, _milestone: bool) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NoopObserver;

impl RunObserver for NoopObserver {}

pub struct Trainer {
    pub config: TrainConfig,
    pub spec: MixtureSpec,
    pub data: TrainingSet,
    pub state: TrainerState,
    members: Members,
}

impl Trainer {
    /// Builds the training set and model, then performs the initial
    /// clustering in the randomly initialized feature space.
    pub fn new(config: TrainConfig, spec: MixtureSpec) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::seed_from_u64(config.seed);
        let eval_rng = rng.fork();
        let subset = if config.cluster_full_set { 0 } else { config.subset_size };
        let mut data = build_training_set(&spec, config.train_size, subset, &mut rng)?;
        if config.cluster_full_set {
            data.clustering_subset = (0..config.train_size).collect();
        }
        let model = CondGanModel::new(config.model_config(), &mut rng)?;
        let adam_g = AdamState::new(config.adam(), &model.generator_params());
        let adam_d = AdamState::new(config.adam(), &model.discriminator_params());

        let subset_features = model.discriminator_features(&data.points.select_rows(&data.clustering_subset));
        let partition = if config.random_labels {
            let labels: Vec<usize> = (0..data.len()).map(|_| rng.below(config.k)).collect();
            let assignments: Vec<usize> = data.clustering_subset.iter().map(|&i| labels[i]).collect();
            let centroids = clustering::cluster_means(
                &subset_features,
                &assignments,
                config.k,
                &Matrix::zeros(config.k, subset_features.cols()),
            );
            let objective = clustering::sum_of_squares(&subset_features, &assignments, &centroids);
            data.labels = labels;
            let fit = KMeansFit {
                assignments,
                centroids,
                objective,
                history: vec![objective],
                iterations: 0,
            };
            Partition::new(&fit, &data.labels)
        } else {
            let fit = clustering::cluster_initial_with(
                &subset_features,
                config.k,
                config.restarts,
                config.kmeans_max_iters,
                config.kmeans_tol,
                &mut rng,
            )?;
            let all = model.discriminator_features(&data.points);
            let prop = propagate_labels(&fit.centroids, &all)?;
            data.labels = prop.labels;
            Partition::new(&fit, &data.labels)
        };

        let members = Members::build(&data.labels, config.k);
        Ok(Self {
            state: TrainerState {
                model,
                partition,
                iteration: 0,
                adam_g,
                adam_d,
                online_counts: None,
                history: Vec::new(),
                reports: Vec::new(),
                rng,
                eval_rng,
                last_stability_nmi: None,
            },
            config,
            spec,
            data,
            members,
        })
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        if cp.format_version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint version {}",
                cp.format_version
            )));
        }
        cp.config.validate()?;
        let members = Members::build(&cp.data.labels, cp.config.k);
        Ok(Self {
            config: cp.config,
            spec: cp.spec,
            data: cp.data,
            state: cp.state,
            members,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            spec: self.spec.clone(),
            data: self.data.clone(),
            state: self.state.clone(),
        }
    }

    pub fn model(&self) -> &CondGanModel {
        &self.state.model
    }

    pub fn partition(&self) -> &Partition {
        &self.state.partition
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.state.history
    }

    /// Members of cluster `c` in the full training set.
    pub fn cluster_members(&self, c: usize) -> &[usize] {
        &self.members.lists[c]
    }

    fn sample_classes(&mut self, n: usize) -> Vec<usize> {
        let weights = &self.state.partition.sampling_weights;
        (0..n)
            .map(|_| self.state.rng.weighted_index(weights).expect("partition has mass"))
            .collect()
    }

    fn sample_latents(&mut self, n: usize) -> Matrix {
        let d = self.config.latent_dim;
        let data = (0..n * d).map(|_| self.state.rng.normal()).collect();
        Matrix::from_vec(n, d, data).expect("sized")
    }

    /// Draws `c ~ P_π` per row, then a uniform member of `π_c`.
    pub fn sample_real_batch(&mut self) -> RealBatch {
        let b = self.config.batch_size;
        if self.config.infinite_data {
            let (points, _) = sample(&self.spec, b, &mut self.state.rng);
            let features = self.state.model.discriminator_features(&points);
            let (classes, _) = clustering::assign_nearest(&features, &self.state.partition.centroids);
            return RealBatch {
                points,
                classes,
                indices: None,
            };
        }
        let classes = self.sample_classes(b);
        let indices: Vec<usize> = classes
            .iter()
            .map(|&c| {
                let list = &self.members.lists[c];
                list[self.state.rng.below(list.len())]
            })
            .collect();
        RealBatch {
            points: self.data.points.select_rows(&indices),
            classes,
            indices: Some(indices),
        }
    }

    /// One discriminator update on `real` paired with fakes of the same classes.
    pub fn d_step(&mut self, real: &RealBatch) -> Result<f64> {
        let z = self.sample_latents(real.points.rows());
        self.d_step_with(real, &z)
    }

    /// `d_step` with caller-supplied latents.
    pub fn d_step_with(&mut self, real: &RealBatch, z: &Matrix) -> Result<f64> {
        let it = self.state.iteration;
        let model = &self.state.model;
        let mut tape = Tape::new();
        let gvars = model.bind_generator(&mut tape, false);
        let dvars = model.bind_discriminator(&mut tape, true);
        let zv = tape.leaf(z.clone());
        let fake = model.generator_on_tape(&mut tape, &gvars, zv, &real.classes)?;
        let xv = tape.leaf(real.points.clone());
        let real_out = model.discriminator_on_tape(&mut tape, &dvars, xv, &real.classes)?;
        let fake_out = model.discriminator_on_tape(&mut tape, &dvars, fake, &real.classes)?;

        // -[mean log D(x,c) + mean log(1 - D(G(z,c),c))], with 1 - σ(l) = σ(-l).
        let p_real = tape.sigmoid(real_out.logits);
        let log_real = tape.log_floored(p_real, LOG_FLOOR).map_err(|e| diverged(e, it))?;
        let neg_fake = tape.neg(fake_out.logits);
        let p_fake = tape.sigmoid(neg_fake);
        let log_fake = tape.log_floored(p_fake, LOG_FLOOR).map_err(|e| diverged(e, it))?;
        let m_real = tape.mean(log_real);
        let m_fake = tape.mean(log_fake);
        let total = tape.add(m_real, m_fake)?;
        let loss = tape.neg(total);
        let value = tape.scalar(loss);
        self.check_loss(value)?;

        tape.backward(loss)?;
        dvars.collect_grads(&tape, &mut self.state.model);
        let mut params = self.state.model.discriminator_params_mut();
        self.state.adam_d.step(&mut params);
        Ok(value)
    }

    /// Discriminator loss on a fixed batch and latents, without updating anything.
    pub fn d_loss(&self, real: &RealBatch, z: &Matrix) -> Result<f64> {
        let model = &self.state.model;
        let fake = model.generator_forward(z, &real.classes)?;
        let lr = model.discriminator_forward(&real.points, &real.classes)?;
        let lf = model.discriminator_forward(&fake, &real.classes)?;
        let mean_log = |logits: &Matrix, sign: f64| {
            let s: f64 = logits
                .data()
                .iter()
                .map(|&l| crate::autodiff::sigmoid(sign * l).max(LOG_FLOOR).ln())
                .sum();
            s / logits.len() as f64
        };
        Ok(-(mean_log(&lr, 1.0) + mean_log(&lf, -1.0)))
    }

    /// One generator update with fresh `c ~ P_π` and `z`.
    pub fn g_step(&mut self) -> Result<f64> {
        let n = self.config.batch_size;
        let it = self.state.iteration;
        let classes = self.sample_classes(n);
        let z = self.sample_latents(n);
        let model = &self.state.model;
        let mut tape = Tape::new();
        let gvars = model.bind_generator(&mut tape, true);
        let dvars = model.bind_discriminator(&mut tape, false);
        let zv = tape.leaf(z);
        let fake = model.generator_on_tape(&mut tape, &gvars, zv, &classes)?;
        let out = model.discriminator_on_tape(&mut tape, &dvars, fake, &classes)?;
        let loss = if self.config.saturating_loss {
            // minimize mean log(1 - D(G(z,c),c))
            let neg = tape.neg(out.logits);
            let p = tape.sigmoid(neg);
            let lp = tape.log_floored(p, LOG_FLOOR).map_err(|e| diverged(e, it))?;
            tape.mean(lp)
        } else {
            // minimize -mean log D(G(z,c),c)
            let p = tape.sigmoid(out.logits);
            let lp = tape.log_floored(p, LOG_FLOOR).map_err(|e| diverged(e, it))?;
            let m = tape.mean(lp);
            tape.neg(m)
        };
        let value = tape.scalar(loss);
        self.check_loss(value)?;

        tape.backward(loss)?;
        gvars.collect_grads(&tape, &mut self.state.model);
        let mut params = self.state.model.generator_params_mut();
        self.state.adam_g.step(&mut params);
        self.state.model.project_embeddings()?;
        Ok(value)
    }

    fn check_loss(&self, loss: f64) -> Result<()> {
        if !loss.is_finite() || loss.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                iteration: self.state.iteration,
                loss,
            });
        }
        Ok(())
    }

    /// Re-partitions the data in the current feature space.
    pub fn recluster(&mut self) -> Result<ReclusterReport> {
        let cfg = &self.config;
        let k = cfg.k;
        let model = &self.state.model;
        let subset_points = self.data.points.select_rows(&self.data.clustering_subset);
        let features = model.discriminator_features(&subset_points);
        let old = &self.state.partition;

        let init = if cfg.no_warm_start {
            kmeans_pp_init(&features, k, &mut self.state.rng)?
        } else {
            warm_start_centroids(&old.assignments, k, &features, &mut self.state.rng)?
        };
        let fit = lloyd(&features, &init, cfg.kmeans_max_iters, cfg.kmeans_tol);

        let matching = if cfg.no_matching {
            Matching::identity(k)
        } else {
            match_clusters(&old.assignments, &fit.assignments, k)?
        };
        let relabel = matching.relabel_map();
        let assignments: Vec<usize> = fit.assignments.iter().map(|&c| relabel[c]).collect();
        let mut centroids = Matrix::zeros(k, fit.centroids.cols());
        for (new_id, &old_id) in relabel.iter().enumerate() {
            centroids.row_mut(old_id).copy_from_slice(fit.centroids.row(new_id));
        }
        let relabeled = KMeansFit {
            assignments,
            centroids,
            objective: fit.objective,
            history: fit.history,
            iterations: fit.iterations,
        };

        let all = model.discriminator_features(&self.data.points);
        let prop = propagate_labels(&relabeled.centroids, &all)?;
        let stability_nmi = evaluation::nmi(&self.data.labels, &prop.labels)?;
        let same = self.data.labels.iter().zip(&prop.labels).filter(|(a, b)| a == b).count();

        self.data.labels = prop.labels;
        self.members = Members::build(&self.data.labels, k);
        self.state.partition = Partition::new(&relabeled, &self.data.labels);
        self.state.last_stability_nmi = Some(stability_nmi);

        let report = ReclusterReport {
            iteration: self.state.iteration,
            matching,
            objective: relabeled.objective,
            lloyd_iterations: relabeled.iterations,
            stability_nmi,
            label_agreement: same as f64 / self.data.len() as f64,
        };
        self.state.reports.push(report.clone());
        Ok(report)
    }

    /// Online k-means step on a real batch; moves the batch points to their
    /// nearest (updated) centroid.
    pub fn online_step(&mut self, real: &RealBatch) -> Result<()> {
        let k = self.config.k;
        if self.state.online_counts.is_none() {
            let init = if self.config.online_reset_counts {
                vec![0; k]
            } else {
                counts(&self.state.partition.assignments, k)
                    .into_iter()
                    .map(|c| c as u64)
                    .collect()
            };
            self.state.online_counts = Some(init);
        }
        let features = self.state.model.discriminator_features(&real.points);
        let counts_buf = self.state.online_counts.as_mut().expect("initialized above");
        let assigned = clustering::online_update(&mut self.state.partition.centroids, counts_buf, &features)?;
        if let Some(indices) = &real.indices {
            for (&i, &c) in indices.iter().zip(&assigned) {
                let from = self.data.labels[i];
                self.members.relocate(i, from, c);
                self.data.labels[i] = c;
            }
            self.state.partition.refresh_sizes(&self.data.labels);
        }
        Ok(())
    }

    /// Evaluation snapshot at the current iteration; uses its own random stream.
    pub fn evaluate(&mut self) -> Result<MetricsRecord> {
        let mut rng = self.state.eval_rng.fork();
        let opts = EvalOptions {
            n_samples: self.config.eval_samples,
            empirical_real: self.config.empirical_real_kl,
        };
        let mut record = evaluation::evaluate(&self.state.model, &self.state.partition, &self.data, &self.spec, opts, &mut rng)?;
        record.iteration = self.state.iteration;
        record.stability_nmi = self.state.last_stability_nmi;
        Ok(record)
    }

    /// Generates `n` samples with `c ~ P_π` from a dedicated seed.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Matrix> {
        let mut rng = Rng::seed_from_u64(seed);
        let weights = &self.state.partition.sampling_weights;
        let classes: Vec<usize> = (0..n)
            .map(|_| rng.weighted_index(weights).expect("partition has mass"))
            .collect();
        let d = self.config.latent_dim;
        let z = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect())?;
        self.state.model.generator_forward(&z, &classes)
    }

    /// One full iteration: D step, G step, then partition maintenance and
    /// evaluation as scheduled.
    pub fn step(&mut self, observer: &mut dyn RunObserver) -> Result<()> {
        self.state.iteration += 1;
        let t = self.state.iteration;
        let real = self.sample_real_batch();
        self.d_step(&real)?;
        self.g_step()?;

        let mut milestone = false;
        if self.config.online_at(t) {
            self.online_step(&real)?;
        } else if self.config.batch_recluster_at(t) {
            let report = self.recluster()?;
            observer.on_recluster(&report)?;
            milestone = true;
        }

        if t.is_multiple_of(self.config.eval_every) || t == self.config.total_iterations() {
            let record = self.evaluate()?;
            observer.on_metrics(&record)?;
            self.state.history.push(record);
            milestone = true;
        }
        observer.on_step_end(self, milestone)
    }

    /// Runs until the configured iteration budget. On error the history up
    /// to the failure remains available in `state.history`.
    pub fn run(&mut self, observer: &mut dyn RunObserver) -> Result<()> {
        let total = self.config.total_iterations();
        while self.state.iteration < total {
            self.step(observer)?;
        }
        Ok(())
    }
}

/// NaN activations surface as a domain error from the floored log.
fn diverged(e: Error, iteration: u64) -> Error {
    match e {
        Error::NumericDomain { value, .. } => Error::Divergence { iteration, loss: value },
        other => other,
    }
}

/// Trains from scratch and returns the finished trainer.
pub fn train(config: TrainConfig, spec: MixtureSpec) -> Result<Trainer> {
    let mut trainer = Trainer::new(config, spec)?;
    trainer.run(&mut NoopObserver)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_grid, make_ring, GRID_VARIANCE};

    fn small(seed: u64) -> TrainConfig {
        TrainConfig {
            k: 5,
            gen_hidden: vec![16, 16],
            disc_hidden: vec![16, 16],
            embed_dim: 8,
            batch_size: 32,
            train_size: 600,
            subset_size: 300,
            iterations: Some(60),
            recluster_every: 20,
            restarts: 2,
            eval_every: 20,
            eval_samples: 400,
            seed,
            ..TrainConfig::default()
        }
    }

    fn zero_head(tr: &mut Trainer) {
        tr.state.model.disc_head.weight.value.fill(0.0);
        tr.state.model.disc_head.bias.value.fill(0.0);
    }

    #[test]
    fn d_loss_at_zero_logits_is_two_log_two() {
        let mut tr = Trainer::new(small(1), make_ring()).unwrap();
        zero_head(&mut tr);
        let real = tr.sample_real_batch();
        let loss = tr.d_step(&real).unwrap();
        assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn g_loss_at_zero_logits_is_log_two() {
        let mut tr = Trainer::new(small(1), make_ring()).unwrap();
        zero_head(&mut tr);
        let loss = tr.g_step().unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn steps_only_touch_their_own_network() {
        let mut tr = Trainer::new(small(2), make_ring()).unwrap();
        let g_before = serde_json::to_string(&tr.state.model.generator_params()).unwrap();
        let d_before = serde_json::to_string(&tr.state.model.discriminator_params()).unwrap();
        let real = tr.sample_real_batch();
        tr.d_step(&real).unwrap();
        let g_mid = serde_json::to_string(&tr.state.model.generator_params()).unwrap();
        let d_mid = serde_json::to_string(&tr.state.model.discriminator_params()).unwrap();
        assert_eq!(g_before, g_mid);
        assert_ne!(d_before, d_mid);
        tr.g_step().unwrap();
        let g_after = serde_json::to_string(&tr.state.model.generator_params()).unwrap();
        let d_after = serde_json::to_string(&tr.state.model.discriminator_params()).unwrap();
        assert_eq!(d_mid, d_after);
        assert_ne!(g_mid, g_after);
        assert!(tr.state.model.embedding_norm_error() < 1e-12);
    }

    #[test]
    fn d_step_reports_the_pre_update_loss_and_lowers_it() {
        let cfg = TrainConfig { learning_rate: 1e-4, ..small(14) };
        let mut tr = Trainer::new(cfg, make_ring()).unwrap();
        let real = tr.sample_real_batch();
        let z = tr.sample_latents(real.points.rows());
        let before = tr.d_loss(&real, &z).unwrap();
        let reported = tr.d_step_with(&real, &z).unwrap();
        let after = tr.d_loss(&real, &z).unwrap();
        assert!((before - reported).abs() < 1e-12, "{before} vs {reported}");
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn real_batches_follow_partition_weights() {
        let cfg = TrainConfig { k: 4, batch_size: 100, ..small(3) };
        let mut tr = Trainer::new(cfg, make_grid(GRID_VARIANCE).unwrap()).unwrap();
        let k = tr.config.k;
        let mut hits = vec![0usize; k];
        for _ in 0..100 {
            let batch = tr.sample_real_batch();
            for (&c, &i) in batch.classes.iter().zip(batch.indices.as_ref().unwrap()) {
                assert_eq!(tr.data.labels[i], c);
                hits[c] += 1;
            }
        }
        for (c, &h) in hits.iter().enumerate() {
            let f = h as f64 / 10_000.0;
            assert!((f - tr.partition().sampling_weights[c]).abs() < 0.02, "cluster {c}: {f}");
        }
    }

    #[test]
    fn unmatched_relabeling_keeps_nmi_but_loses_agreement() {
        let cfg = TrainConfig { no_warm_start: true, ..small(15) };
        let mut matched = Trainer::new(cfg.clone(), make_grid(GRID_VARIANCE).unwrap()).unwrap();
        let mut unmatched = Trainer::from_checkpoint(Checkpoint {
            config: TrainConfig { no_matching: true, ..cfg },
            ..matched.checkpoint()
        })
        .unwrap();
        let a = matched.recluster().unwrap();
        let b = unmatched.recluster().unwrap();
        assert_ne!(b.matching.relabel_map(), a.matching.relabel_map());
        assert!((a.stability_nmi - b.stability_nmi).abs() < 1e-12);
        assert!(b.label_agreement < a.label_agreement);
    }

    #[test]
    fn reported_objective_matches_direct_evaluation() {
        let mut tr = Trainer::new(small(16), make_grid(GRID_VARIANCE).unwrap()).unwrap();
        let report = tr.recluster().unwrap();
        let subset = tr.data.points.select_rows(&tr.data.clustering_subset);
        let features = tr.model().discriminator_features(&subset);
        let p = tr.partition();
        let direct = clustering::sum_of_squares(&features, &p.assignments, &p.centroids);
        assert!((direct - report.objective).abs() <= 1e-9 * direct.max(1.0));
        assert_eq!(p.objective, report.objective);
    }

    #[test]
    fn online_phase_stops_batch_reclustering() {
        let cfg = TrainConfig { online: true, online_start: 40, ..small(17) };
        let tr = train(cfg, make_ring()).unwrap();
        let rc: Vec<u64> = tr.state.reports.iter().map(|r| r.iteration).collect();
        assert_eq!(rc, vec![20]);
        let counts: u64 = tr.state.online_counts.as_ref().unwrap().iter().sum();
        assert_eq!(counts, 300 + 21 * 32);
    }

    #[test]
    fn reclustering_without_training_is_a_fixed_point() {
        let mut tr = Trainer::new(small(4), make_grid(GRID_VARIANCE).unwrap()).unwrap();
        tr.recluster().unwrap();
        let labels = tr.data.labels.clone();
        let report = tr.recluster().unwrap();
        assert_eq!(report.matching.rho, (0..tr.config.k).collect::<Vec<_>>());
        assert_eq!(report.matching.cost, 0);
        assert_eq!(report.stability_nmi, 1.0);
        assert_eq!(tr.data.labels, labels);
    }

    #[test]
    fn members_track_labels() {
        let mut tr = Trainer::new(TrainConfig { online: true, online_start: 0, ..small(5) }, make_ring()).unwrap();
        for _ in 0..10 {
            tr.step(&mut NoopObserver).unwrap();
        }
        assert!(tr.state.online_counts.is_some());
        for c in 0..tr.config.k {
            for &i in tr.cluster_members(c) {
                assert_eq!(tr.data.labels[i], c);
            }
            assert_eq!(tr.cluster_members(c).len(), tr.partition().cluster_sizes[c]);
        }
    }

    #[test]
    fn online_counts_grow_by_batch_size() {
        let cfg = TrainConfig { online: true, online_start: 0, ..small(6) };
        let mut tr = Trainer::new(cfg, make_ring()).unwrap();
        tr.step(&mut NoopObserver).unwrap();
        let after_one: u64 = tr.state.online_counts.as_ref().unwrap().iter().sum();
        tr.step(&mut NoopObserver).unwrap();
        let after_two: u64 = tr.state.online_counts.as_ref().unwrap().iter().sum();
        assert_eq!(after_one, 300 + 32);
        assert_eq!(after_two - after_one, 32);
    }

    #[test]
    fn random_labels_never_change() {
        let cfg = TrainConfig { random_labels: true, ..small(7) };
        let mut tr = Trainer::new(cfg, make_ring()).unwrap();
        let labels = tr.data.labels.clone();
        tr.run(&mut NoopObserver).unwrap();
        assert_eq!(tr.data.labels, labels);
        assert!(tr.state.reports.is_empty());
    }

    #[test]
    fn unconditional_requires_single_cluster() {
        let bad = TrainConfig { unconditional: true, ..small(0) };
        assert!(matches!(Trainer::new(bad, make_ring()), Err(Error::Contract(_))));
        let good = TrainConfig { unconditional: true, k: 1, ..small(0) };
        let mut tr = Trainer::new(good, make_ring()).unwrap();
        tr.run(&mut NoopObserver).unwrap();
        assert_eq!(tr.partition().sampling_weights, vec![1.0]);
    }

    #[test]
    fn schedule_records_history_and_reclusters() {
        let tr = train(small(8), make_ring()).unwrap();
        let its: Vec<u64> = tr.history().iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![20, 40, 60]);
        let rc: Vec<u64> = tr.state.reports.iter().map(|r| r.iteration).collect();
        assert_eq!(rc, vec![20, 40, 60]);
        for r in tr.history() {
            r.check_ranges(8).unwrap();
        }
    }

    #[test]
    fn same_seed_same_history() {
        let a = train(small(9), make_ring()).unwrap();
        let b = train(small(9), make_ring()).unwrap();
        let ja: Vec<String> = a.history().iter().map(|r| r.to_json()).collect();
        let jb: Vec<String> = b.history().iter().map(|r| r.to_json()).collect();
        assert_eq!(ja, jb);
        let c = train(small(10), make_ring()).unwrap();
        assert_ne!(serde_json::to_string(a.model()).unwrap(), serde_json::to_string(c.model()).unwrap());
    }

    #[test]
    fn resume_from_checkpoint_is_exact() {
        let straight = train(small(11), make_ring()).unwrap();

        let mut first = Trainer::new(small(11), make_ring()).unwrap();
        for _ in 0..30 {
            first.step(&mut NoopObserver).unwrap();
        }
        let json = serde_json::to_string(&first.checkpoint()).unwrap();
        drop(first);
        let mut resumed = Trainer::from_checkpoint(serde_json::from_str(&json).unwrap()).unwrap();
        resumed.run(&mut NoopObserver).unwrap();

        assert_eq!(
            serde_json::to_string(&straight.checkpoint()).unwrap(),
            serde_json::to_string(&resumed.checkpoint()).unwrap()
        );
    }

    #[test]
    fn infinite_data_and_variants_run() {
        for cfg in [
            TrainConfig { infinite_data: true, ..small(12) },
            TrainConfig { saturating_loss: true, ..small(12) },
            TrainConfig { no_warm_start: true, no_matching: true, ..small(12) },
            TrainConfig { cluster_full_set: true, ..small(12) },
            TrainConfig { empirical_real_kl: true, ..small(12) },
        ] {
            let tr = train(cfg, make_ring()).unwrap();
            assert_eq!(tr.history().len(), 3);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig { recluster_every: 0, ..small(0) },
            TrainConfig { subset_size: 601, ..small(0) },
            TrainConfig { k: 400, subset_size: 300, ..small(0) },
            TrainConfig { learning_rate: 0.0, ..small(0) },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Contract(_))), "{cfg:?}");
        }
    }

    #[test]
    fn divergence_is_reported() {
        let mut tr = Trainer::new(small(13), make_ring()).unwrap();
        tr.state.model.disc_head.weight.value.fill(f64::NAN);
        let real = tr.sample_real_batch();
        assert!(matches!(tr.d_step(&real), Err(Error::Divergence { .. })));
    }

    #[test]
    fn default_budget_is_four_hundred_epochs() {
        assert_eq!(TrainConfig::default().total_iterations(), 200_000);
    }
}
