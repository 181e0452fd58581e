//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use selfcond_core::autodiff::{Matrix, Tape, Var};
use selfcond_core::clustering::matching_costs;
use selfcond_core::data::{make_grid, sample, GRID_VARIANCE};
use selfcond_core::Rng;

pub const FD_STEP: f64 = 1e-5;

/// Gradient entries smaller than this are compared absolutely: central
/// differences carry roughly 1e-11 of rounding noise at this step size.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub enum Act {
    Relu,
    Leaky(f64),
    Tanh,
    Sigmoid,
    Identity,
}

#[derive(Clone, Copy, Debug)]
pub enum Loss {
    /// Non-saturating GAN term on selected class logits.
    LogSigmoid,
    SumSquares,
    MeanTanhGap,
    ScaledSum(f64),
}

/// A randomly shaped MLP graph. Parameters are held outside the tape so the
/// graph can be rebuilt with perturbed values.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub input: Matrix,
    pub classes: Vec<usize>,
    pub embed: bool,
    pub acts: Vec<Act>,
    pub select_head: bool,
    pub loss: Loss,
    /// Optional embedding table, then (W, b) per layer, then the head (W, b).
    pub params: Vec<Matrix>,
}

fn randn(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

impl RandomGraph {
    /// Depth 1..=3 hidden layers, widths 1..=16.
    pub fn generate(rng: &mut Rng) -> Self {
        let m = 1 + rng.below(8);
        let d0 = 1 + rng.below(6);
        let k = 1 + rng.below(5);
        let depth = 1 + rng.below(3);
        let embed = rng.below(2) == 0;
        let select_head = rng.below(2) == 0;
        let classes: Vec<usize> = (0..m).map(|_| rng.below(k)).collect();
        let mut params = Vec::new();
        let mut width = d0;
        if embed {
            let e = 1 + rng.below(4);
            params.push(randn(k, e, 1.0, rng));
            width += e;
        }
        let mut acts = Vec::new();
        for _ in 0..depth {
            let out = 1 + rng.below(16);
            params.push(randn(width, out, (1.0 / width as f64).sqrt(), rng));
            params.push(randn(1, out, 0.3, rng));
            acts.push(match rng.below(5) {
                0 => Act::Relu,
                1 => Act::Leaky(0.05 + 0.5 * rng.uniform()),
                2 => Act::Tanh,
                3 => Act::Sigmoid,
                _ => Act::Identity,
            });
            width = out;
        }
        let head_out = if select_head { k } else { 1 + rng.below(4) };
        params.push(randn(width, head_out, (1.0 / width as f64).sqrt(), rng));
        params.push(randn(1, head_out, 0.3, rng));
        let loss = if select_head {
            Loss::LogSigmoid
        } else {
            match rng.below(3) {
                0 => Loss::SumSquares,
                1 => Loss::MeanTanhGap,
                _ => Loss::ScaledSum(rng.normal()),
            }
        };
        Self {
            input: randn(m, d0, 1.0, rng),
            classes,
            embed,
            acts,
            select_head,
            loss,
            params,
        }
    }

    /// Builds the graph on `tape`; returns (loss, parameter vars, kink
    /// pre-activations) where the last lists every ReLU/LeakyReLU input.
    pub fn build(&self, tape: &mut Tape, params: &[Matrix]) -> (Var, Vec<Var>, Vec<Var>) {
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let mut kinks = Vec::new();
        let mut h = tape.leaf(self.input.clone());
        let mut next = 0;
        if self.embed {
            let e = tape.gather_rows(vars[0], &self.classes).unwrap();
            h = tape.concat_cols(h, e).unwrap();
            next = 1;
        }
        for act in &self.acts {
            let pre = tape.matmul(h, vars[next]).unwrap();
            let pre = tape.add_row(pre, vars[next + 1]).unwrap();
            next += 2;
            h = match *act {
                Act::Relu => {
                    kinks.push(pre);
                    tape.relu(pre)
                }
                Act::Leaky(a) => {
                    kinks.push(pre);
                    tape.leaky_relu(pre, a)
                }
                Act::Tanh => tape.tanh(pre),
                Act::Sigmoid => tape.sigmoid(pre),
                Act::Identity => pre,
            };
        }
        let (w, b) = (vars[next], vars[next + 1]);
        let loss = if self.select_head {
            let logits = tape.select_linear(h, w, b, &self.classes).unwrap();
            let p = tape.sigmoid(logits);
            let l = tape.log_floored(p, 1e-12).unwrap();
            let m = tape.mean(l);
            tape.neg(m)
        } else {
            let out = tape.matmul(h, w).unwrap();
            let out = tape.add_row(out, b).unwrap();
            match self.loss {
                Loss::SumSquares => {
                    let sq = tape.mul(out, out).unwrap();
                    tape.sum(sq)
                }
                Loss::MeanTanhGap => {
                    let t = tape.tanh(out);
                    let d = tape.sub(out, t).unwrap();
                    tape.mean(d)
                }
                Loss::ScaledSum(s) => {
                    let col = tape.select_cols(out, &vec![0; self.input.rows()]).unwrap();
                    let x = tape.scale(col, s);
                    let y = tape.add(x, col).unwrap();
                    tape.sum(y)
                }
                Loss::LogSigmoid => unreachable!(),
            }
        };
        (loss, vars, kinks)
    }

    pub fn loss_at(&self, params: &[Matrix]) -> f64 {
        let mut tape = Tape::new();
        let (loss, _, _) = self.build(&mut tape, params);
        tape.scalar(loss)
    }

    /// Smallest |pre-activation| feeding a kinked activation.
    pub fn kink_margin(&self) -> f64 {
        let mut tape = Tape::new();
        let (_, _, kinks) = self.build(&mut tape, &self.params);
        kinks
            .iter()
            .flat_map(|&v| tape.value(v).data().to_vec())
            .map(f64::abs)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Worst relative error between tape gradients and central differences.
pub fn max_gradient_error(graph: &RandomGraph) -> f64 {
    let mut tape = Tape::new();
    let (loss, vars, _) = graph.build(&mut tape, &graph.params);
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("every parameter is reachable").clone();
        for j in 0..graph.params[pi].len() {
            let mut plus = graph.params.clone();
            plus[pi].data_mut()[j] += FD_STEP;
            let mut minus = graph.params.clone();
            minus[pi].data_mut()[j] -= FD_STEP;
            let numeric = (graph.loss_at(&plus) - graph.loss_at(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

/// Random graph whose kinks sit well clear of the finite-difference step.
pub fn smooth_graph(rng: &mut Rng) -> RandomGraph {
    loop {
        let g = RandomGraph::generate(rng);
        if g.kink_margin() > 1e-3 {
            return g;
        }
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..k {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Minimum matching cost by exhausting all k! permutations.
pub fn brute_force_matching_cost(old: &[usize], new: &[usize], k: usize) -> usize {
    let costs = matching_costs(old, new, k);
    permutations(k)
        .iter()
        .map(|rho| rho.iter().enumerate().map(|(o, &n)| costs[o][n]).sum::<i64>() as usize)
        .min()
        .unwrap()
}

/// 25 well-separated grid blobs plus the exact optimal k-means objective:
/// the within-blob scatter about each blob's sample mean.
pub fn grid_blobs(n: usize, rng: &mut Rng) -> (Matrix, f64) {
    let spec = make_grid(GRID_VARIANCE).unwrap();
    let (points, modes) = sample(&spec, n, rng);
    let mut sums = [[0.0; 2]; 25];
    let mut counts = [0usize; 25];
    for (i, &m) in modes.iter().enumerate() {
        sums[m][0] += points.get(i, 0);
        sums[m][1] += points.get(i, 1);
        counts[m] += 1;
    }
    let optimum = modes
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let c = counts[m] as f64;
            let dx = points.get(i, 0) - sums[m][0] / c;
            let dy = points.get(i, 1) - sums[m][1] / c;
            dx * dx + dy * dy
        })
        .sum();
    (points, optimum)
}
