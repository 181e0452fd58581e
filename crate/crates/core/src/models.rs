//! Conditional generator `G(z, c)` and conditional discriminator
//! `D(x, c) = D_h(D_f(x))[c]`.
//!
//! The generator is conditioned by concatenating a learned unit-norm class
//! embedding to the latent vector at its first layer. The discriminator is an
//! unconditional MLP trunk (`D_f`) followed by a k-way linear head (`D_h`)
//! whose output is masked to the requested class.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Param, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of classes (clusters).
    pub k: usize,
    pub latent_dim: usize,
    pub data_dim: usize,
    pub embed_dim: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    /// Negative slope of the discriminator's LeakyReLU.
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 100,
            latent_dim: 2,
            data_dim: 2,
            embed_dim: 32,
            gen_hidden: vec![128, 128],
            disc_hidden: vec![128, 128],
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        *self.disc_hidden.last().unwrap_or(&self.data_dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `fan_in × fan_out`
    pub weight: Param,
    /// `1 × fan_out`
    pub bias: Param,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    He,
    Xavier,
}

impl Linear {
    fn new(fan_in: usize, fan_out: usize, init: Init, rng: &mut Rng) -> Self {
        let std = match init {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
        };
        let data = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
        Self {
            weight: Param::new(Matrix::from_vec(fan_in, fan_out, data).expect("sized")),
            bias: Param::new(Matrix::zeros(1, fan_out)),
        }
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> (Var, Var) {
        let bind = |tape: &mut Tape, p: &Param| {
            if trainable {
                tape.param(p.value.clone())
            } else {
                tape.leaf(p.value.clone())
            }
        };
        (bind(tape, &self.weight), bind(tape, &self.bias))
    }

    /// Untracked forward: `x · W + b`.
    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weight.value).expect("layer widths are consistent");
        out.add_row_in_place(self.bias.value.data());
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CondGanModel {
    pub config: ModelConfig,
    pub generator: Vec<Linear>,
    /// Feature trunk `D_f`.
    pub disc_trunk: Vec<Linear>,
    /// k-way head `D_h`.
    pub disc_head: Linear,
    /// `k × embed_dim`, unit-norm rows.
    pub embeddings: Param,
}

/// Tape handles for generator parameters, in `generator_params` order.
#[derive(Clone, Debug)]
pub struct GeneratorVars {
    layers: Vec<(Var, Var)>,
    embeddings: Var,
}

/// Tape handles for discriminator parameters, in `discriminator_params` order.
#[derive(Clone, Debug)]
pub struct DiscriminatorVars {
    trunk: Vec<(Var, Var)>,
    head: (Var, Var),
}

/// Outputs of one discriminator pass: the shared features and the masked logit.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorOutput {
    pub features: Var,
    pub logits: Var,
}

impl CondGanModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        if config.k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        if config.embed_dim == 0 || config.latent_dim == 0 || config.data_dim == 0 {
            return Err(Error::contract("model dimensions must be positive"));
        }

        let mut generator = Vec::new();
        let mut width = config.latent_dim + config.embed_dim;
        for &h in &config.gen_hidden {
            generator.push(Linear::new(width, h, Init::He, rng));
            width = h;
        }
        generator.push(Linear::new(width, config.data_dim, Init::Xavier, rng));

        let mut disc_trunk = Vec::new();
        let mut width = config.data_dim;
        for &h in &config.disc_hidden {
            disc_trunk.push(Linear::new(width, h, Init::He, rng));
            width = h;
        }
        let disc_head = Linear::new(width, config.k, Init::Xavier, rng);

        let emb = (0..config.k * config.embed_dim).map(|_| rng.normal()).collect();
        let embeddings = Param::new(Matrix::from_vec(config.k, config.embed_dim, emb)?);

        let mut model = Self {
            config,
            generator,
            disc_trunk,
            disc_head,
            embeddings,
        };
        model.project_embeddings()?;
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn generator_params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for l in &self.generator {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.embeddings);
        out
    }

    pub fn generator_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for l in &mut self.generator {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.embeddings);
        out
    }

    pub fn discriminator_params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for l in self.disc_trunk.iter().chain(std::iter::once(&self.disc_head)) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn discriminator_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for l in self.disc_trunk.iter_mut().chain(std::iter::once(&mut self.disc_head)) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    fn check_classes(&self, classes: &[usize]) -> Result<()> {
        match classes.iter().find(|&&c| c >= self.config.k) {
            Some(&bad) => Err(Error::ClassIndex { index: bad, k: self.config.k }),
            None => Ok(()),
        }
    }

    pub fn bind_generator(&self, tape: &mut Tape, trainable: bool) -> GeneratorVars {
        let layers = self.generator.iter().map(|l| l.bind(tape, trainable)).collect();
        let embeddings = if trainable {
            tape.param(self.embeddings.value.clone())
        } else {
            tape.leaf(self.embeddings.value.clone())
        };
        GeneratorVars { layers, embeddings }
    }

    pub fn bind_discriminator(&self, tape: &mut Tape, trainable: bool) -> DiscriminatorVars {
        let trunk = self.disc_trunk.iter().map(|l| l.bind(tape, trainable)).collect();
        let head = self.disc_head.bind(tape, trainable);
        DiscriminatorVars { trunk, head }
    }

    /// `G(z, c)` on a tape: `[z | E_c]` through ReLU hidden layers and a linear output.
    pub fn generator_on_tape(
        &self,
        tape: &mut Tape,
        vars: &GeneratorVars,
        z: Var,
        classes: &[usize],
    ) -> Result<Var> {
        self.check_classes(classes)?;
        if tape.shape(z) != (classes.len(), self.config.latent_dim) {
            return Err(Error::Dimension {
                op: "generator_forward",
                lhs: tape.shape(z),
                rhs: (classes.len(), self.config.latent_dim),
            });
        }
        let emb = tape.gather_rows(vars.embeddings, classes)?;
        let mut h = tape.concat_cols(z, emb)?;
        let last = vars.layers.len() - 1;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add_row(lin, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// `D_f(x)` on a tape.
    pub fn features_on_tape(&self, tape: &mut Tape, vars: &DiscriminatorVars, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b) in &vars.trunk {
            let lin = tape.matmul(h, w)?;
            let pre = tape.add_row(lin, b)?;
            h = tape.leaky_relu(pre, self.config.leaky_slope);
        }
        Ok(h)
    }

    /// Masked conditional logit `D_h(D_f(x))[c]`, one per row, plus the features.
    pub fn discriminator_on_tape(
        &self,
        tape: &mut Tape,
        vars: &DiscriminatorVars,
        x: Var,
        classes: &[usize],
    ) -> Result<DiscriminatorOutput> {
        self.check_classes(classes)?;
        let features = self.features_on_tape(tape, vars, x)?;
        let (w, b) = vars.head;
        let logits = tape.select_linear(features, w, b, classes)?;
        Ok(DiscriminatorOutput { features, logits })
    }

    /// Untracked `G(z, c)`; returns `batch × data_dim`.
    pub fn generator_forward(&self, z: &Matrix, classes: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind_generator(&mut tape, false);
        let zv = tape.leaf(z.clone());
        let out = self.generator_on_tape(&mut tape, &vars, zv, classes)?;
        Ok(tape.value(out).clone())
    }

    /// Untracked masked logits `D(x, c)`; returns `batch × 1`.
    pub fn discriminator_forward(&self, x: &Matrix, classes: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind_discriminator(&mut tape, false);
        let xv = tape.leaf(x.clone());
        let out = self.discriminator_on_tape(&mut tape, &vars, xv, classes)?;
        Ok(tape.value(out.logits).clone())
    }

    /// All k logits `D_h(D_f(x))`; returns `batch × k`.
    pub fn discriminator_logits(&self, x: &Matrix) -> Matrix {
        self.disc_head.apply(&self.discriminator_features(x))
    }

    /// `D_f(x)`, the post-activation output of the last hidden layer, computed
    /// without a tape. Numerically identical to [`Self::features_on_tape`].
    pub fn discriminator_features(&self, x: &Matrix) -> Matrix {
        let alpha = self.config.leaky_slope;
        let mut h = x.clone();
        for layer in &self.disc_trunk {
            h = layer.apply(&h);
            for v in h.data_mut() {
                if *v <= 0.0 {
                    *v *= alpha;
                }
            }
        }
        h
    }

    /// Re-normalizes every embedding row to unit Euclidean norm.
    pub fn project_embeddings(&mut self) -> Result<()> {
        let e = &mut self.embeddings.value;
        for r in 0..e.rows() {
            let row = e.row_mut(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::DegenerateEmbedding { row: r });
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(())
    }

    /// Largest deviation of an embedding row norm from 1.
    pub fn embedding_norm_error(&self) -> f64 {
        self.embeddings
            .value
            .iter_rows()
            .map(|r| (r.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

impl GeneratorVars {
    /// Adds the tape gradients into the model's generator parameters.
    pub fn collect_grads(&self, tape: &Tape, model: &mut CondGanModel) {
        let vars = self
            .layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .chain(std::iter::once(self.embeddings));
        for (var, param) in vars.zip(model.generator_params_mut()) {
            if let Some(g) = tape.grad(var) {
                param.accumulate_grad(g);
            }
        }
    }
}

impl DiscriminatorVars {
    /// Adds the tape gradients into the model's discriminator parameters.
    pub fn collect_grads(&self, tape: &Tape, model: &mut CondGanModel) {
        let vars = self
            .trunk
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|&(w, b)| [w, b]);
        for (var, param) in vars.zip(model.discriminator_params_mut()) {
            if let Some(g) = tape.grad(var) {
                param.accumulate_grad(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(k: usize) -> ModelConfig {
        ModelConfig {
            k,
            gen_hidden: vec![16, 16],
            disc_hidden: vec![16, 16],
            embed_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn model(k: usize, seed: u64) -> CondGanModel {
        CondGanModel::new(small_config(k), &mut Rng::seed_from_u64(seed)).unwrap()
    }

    fn latents(n: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn generator_output_shape_and_determinism() {
        let m = model(5, 1);
        let mut rng = Rng::seed_from_u64(2);
        let z1 = latents(1, &mut rng);
        let z = Matrix::from_rows(&[z1.row(0), z1.row(0), z1.row(0)]);
        let out = m.generator_forward(&z, &[3, 3, 1]).unwrap();
        assert_eq!(out.shape(), (3, 2));
        assert_eq!(out.row(0), out.row(1));
        assert_ne!(out.row(0), out.row(2));
    }

    #[test]
    fn generator_rejects_out_of_range_class() {
        let m = model(5, 1);
        let z = Matrix::zeros(1, 2);
        assert!(matches!(
            m.generator_forward(&z, &[5]),
            Err(Error::ClassIndex { index: 5, k: 5 })
        ));
        let x = Matrix::zeros(1, 2);
        assert!(matches!(m.discriminator_forward(&x, &[7]), Err(Error::ClassIndex { .. })));
    }

    #[test]
    fn zeroed_head_returns_bias_of_class() {
        let mut m = model(5, 3);
        m.disc_head.weight.value.fill(0.0);
        m.disc_head.bias.value = Matrix::from_rows(&[[0.1, 0.2, 0.3, 0.4, 0.5]]);
        let x = Matrix::from_rows(&[[1.0, -2.0], [0.5, 0.5], [3.0, 1.0]]);
        let out = m.discriminator_forward(&x, &[0, 4, 2]).unwrap();
        assert_eq!(out.data(), &[0.1, 0.5, 0.3]);
    }

    #[test]
    fn masking_selects_the_class_logit() {
        let m = model(5, 4);
        let x = Matrix::from_rows(&[[0.3, -0.7], [1.5, 0.2]]);
        let all = m.discriminator_logits(&x);
        let masked = m.discriminator_forward(&x, &[3, 3]).unwrap();
        assert_eq!(masked.get(0, 0), all.get(0, 3));
        assert_eq!(masked.get(1, 0), all.get(1, 3));
    }

    #[test]
    fn features_are_shared_across_classes() {
        let m = model(5, 5);
        let x = Matrix::from_rows(&[[0.3, -0.7]]);
        let mut tape = Tape::new();
        let vars = m.bind_discriminator(&mut tape, false);
        let xv = tape.leaf(x.clone());
        let a = m.discriminator_on_tape(&mut tape, &vars, xv, &[0]).unwrap();
        let b = m.discriminator_on_tape(&mut tape, &vars, xv, &[4]).unwrap();
        assert_eq!(tape.value(a.features), tape.value(b.features));
        assert_eq!(tape.value(a.features), &m.discriminator_features(&x));
        assert_ne!(tape.value(a.logits), tape.value(b.logits));
    }

    #[test]
    fn feature_width_matches_config() {
        let m = model(3, 6);
        let x = Matrix::from_rows(&[[0.0, 0.0], [10.0, -4.0], [0.1, 0.2]]);
        let f = m.discriminator_features(&x);
        assert_eq!(f.shape(), (3, 16));
        assert_eq!(m.discriminator_features(&x), f);
    }

    #[test]
    fn projection_normalizes_rows() {
        let mut m = model(2, 7);
        let mut row = vec![0.0; 8];
        row[0] = 3.0;
        row[1] = 4.0;
        m.embeddings.value.row_mut(0).copy_from_slice(&row);
        m.project_embeddings().unwrap();
        assert_eq!(&m.embeddings.value.row(0)[..3], &[0.6, 0.8, 0.0]);
        let before = m.embeddings.value.clone();
        m.project_embeddings().unwrap();
        for (a, b) in before.data().iter().zip(m.embeddings.value.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!(m.embedding_norm_error() < 1e-12);
    }

    #[test]
    fn projection_rejects_zero_row() {
        let mut m = model(2, 8);
        m.embeddings.value.row_mut(1).iter_mut().for_each(|x| *x = 0.0);
        assert!(matches!(
            m.project_embeddings(),
            Err(Error::DegenerateEmbedding { row: 1 })
        ));
    }

    #[test]
    fn head_has_k_outputs() {
        let m = model(7, 9);
        assert_eq!(m.disc_head.weight.shape(), (16, 7));
        assert_eq!(m.discriminator_logits(&Matrix::zeros(4, 2)).shape(), (4, 7));
    }

    #[test]
    fn checkpoint_json_is_bit_exact() {
        let m = model(4, 10);
        let json = serde_json::to_string(&m).unwrap();
        let back: CondGanModel = serde_json::from_str(&json).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.generator_params().iter().zip(back.generator_params()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
