use serde::{Deserialize, Serialize};

use super::Matrix;

/// A trainable matrix together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Matrix,
    #[serde(skip_serializing, default)]
    pub grad: Option<Matrix>,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        Self { value, grad: None }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &Matrix) {
        match &mut self.grad {
            Some(buf) => buf.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Param]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            first_moment: zeros(),
            second_moment: zeros(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update over `params` (same order as at
    /// construction), then clears their gradients. A parameter without a
    /// gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        assert_eq!(
            params.len(),
            self.first_moment.len(),
            "parameter set does not match optimizer state"
        );
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        for ((param, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let Some(grad) = param.grad.take() else {
                // Zero gradient: moments decay, parameters still move by the
                // momentum term.
                for ((x, mi), vi) in param
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mi *= beta1;
                    *vi *= beta2;
                    let m_hat = *mi / bias1;
                    let v_hat = *vi / bias2;
                    *x -= learning_rate * m_hat / (v_hat.sqrt() + eps);
                }
                continue;
            };
            for (((x, &g), mi), vi) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *x -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64) -> Param {
        Param::new(Matrix::scalar(x))
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let config = AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut p = Param::new(Matrix::from_rows(&[[1.0, 1.0, 1.0]]));
        let mut state = AdamState::new(config, &[&p]);
        let g = [0.3, -2.0, 1e-3];
        p.grad = Some(Matrix::from_rows(&[g]));
        state.step(&mut [&mut p]);
        for (x, gi) in p.value.data().iter().zip(g) {
            let expected = 1.0 - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-12, "{x} vs {expected}");
        }
        assert_eq!(state.step, 1);
        assert!(p.grad.is_none());
    }

    #[test]
    fn zero_gradient_leaves_fresh_params_unchanged() {
        let mut p = scalar_param(2.5);
        let mut state = AdamState::new(AdamConfig::default(), &[&p]);
        p.grad = Some(Matrix::scalar(0.0));
        state.step(&mut [&mut p]);
        assert_eq!(p.value.data(), &[2.5]);
        state.step(&mut [&mut p]);
        assert_eq!(p.value.data(), &[2.5]);
        assert_eq!(state.step, 2);
    }

    /// Scalar transcription of the published recurrence, kept separate from
    /// the matrix implementation.
    fn reference_adam(x0: f64, lr: f64, b1: f64, b2: f64, eps: f64, steps: usize) -> f64 {
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        x
    }

    #[test]
    fn quadratic_descent_matches_reference_and_converges() {
        let config = AdamConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut p = scalar_param(1.0);
        let mut state = AdamState::new(config, &[&p]);
        for _ in 0..200 {
            let x = p.value.data()[0];
            p.grad = Some(Matrix::scalar(2.0 * x));
            state.step(&mut [&mut p]);
        }
        let x = p.value.data()[0];
        let reference = reference_adam(1.0, 0.1, 0.9, 0.999, 1e-8, 200);
        assert_eq!(x.to_bits(), reference.to_bits());
        assert!(x.abs() < 0.05, "x = {x}");
    }

    #[test]
    fn deterministic_given_state() {
        let run = || {
            let mut p = Param::new(Matrix::from_rows(&[[0.5, -0.25]]));
            let mut s = AdamState::new(AdamConfig::default(), &[&p]);
            for i in 0..10 {
                p.grad = Some(Matrix::from_rows(&[[i as f64 * 0.1, -0.3]]));
                s.step(&mut [&mut p]);
            }
            p.value
        };
        assert_eq!(run(), run());
    }
}
