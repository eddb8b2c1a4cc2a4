//! One-hidden-layer tanh network trained by full-batch gradient descent on
//! mean squared error.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Flat parameter layout: hidden weights (row-major, `hidden x inputs`),
/// hidden biases, output weights, output bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub inputs: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop once an epoch improves the loss by less than this.
    pub tolerance: f64,
}

impl Mlp {
    pub fn n_params(inputs: usize, hidden: usize) -> usize {
        hidden * inputs + 2 * hidden + 1
    }

    /// Glorot-uniform hidden weights, zero hidden biases, zero output
    /// weights and output bias at `bias`. The network starts out
    /// predicting `bias` everywhere, so constant targets fit exactly.
    pub fn init(inputs: usize, hidden: usize, bias: f64, rng: &mut impl Rng) -> Self {
        let mut params = vec![0.0; Self::n_params(inputs, hidden)];
        let a = (6.0 / (inputs + hidden) as f64).sqrt();
        for w in &mut params[..hidden * inputs] {
            *w = rng.random_range(-a..a);
        }
        params[hidden * inputs + 2 * hidden] = bias;
        Mlp {
            inputs,
            hidden,
            params,
        }
    }

    /// Every parameter uniform in `[-scale, scale]`.
    pub fn random(inputs: usize, hidden: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let params = (0..Self::n_params(inputs, hidden))
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Mlp {
            inputs,
            hidden,
            params,
        }
    }

    fn hidden_activations(&self, x: &[f64], z: &mut [f64]) {
        let (w1, rest) = self.params.split_at(self.hidden * self.inputs);
        let b1 = &rest[..self.hidden];
        for h in 0..self.hidden {
            let row = &w1[h * self.inputs..(h + 1) * self.inputs];
            let a: f64 = b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            z[h] = a.tanh();
        }
    }

    fn output(&self, z: &[f64]) -> f64 {
        let out = self.hidden * self.inputs + self.hidden;
        let w2 = &self.params[out..out + self.hidden];
        self.params[out + self.hidden] + w2.iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; self.hidden];
        self.hidden_activations(x, &mut z);
        self.output(&z)
    }

    pub fn loss(&self, xs: &[Vec<f64>], ys: &[f64]) -> f64 {
        xs.iter()
            .zip(ys)
            .map(|(x, y)| {
                let e = self.predict(x) - y;
                e * e
            })
            .sum::<f64>()
            / ys.len() as f64
    }

    /// Loss and its analytic gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, xs: &[Vec<f64>], ys: &[f64]) -> (f64, Vec<f64>) {
        let n = ys.len() as f64;
        let (ni, nh) = (self.inputs, self.hidden);
        let out = nh * ni + nh;
        let mut grad = vec![0.0; self.params.len()];
        let mut z = vec![0.0; nh];
        let mut loss = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            self.hidden_activations(x, &mut z);
            let e = self.output(&z) - y;
            loss += e * e;
            let g = 2.0 * e / n;
            grad[out + nh] += g;
            for h in 0..nh {
                grad[out + h] += g * z[h];
                let da = g * self.params[out + h] * (1.0 - z[h] * z[h]);
                grad[nh * ni + h] += da;
                let row = &mut grad[h * ni..(h + 1) * ni];
                for (gw, v) in row.iter_mut().zip(x) {
                    *gw += da * v;
                }
            }
        }
        (loss / n, grad)
    }

    pub fn fit(xs: &[Vec<f64>], ys: &[f64], params: MlpParams, rng: &mut impl Rng) -> Self {
        let inputs = xs.first().map_or(0, Vec::len);
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let mut net = Mlp::init(inputs, params.hidden, mean, rng);
        let mut prev = f64::INFINITY;
        for _ in 0..params.epochs {
            let (loss, grad) = net.loss_and_gradient(xs, ys);
            if prev - loss < params.tolerance {
                break;
            }
            prev = loss;
            for (p, g) in net.params.iter_mut().zip(&grad) {
                *p -= params.learning_rate * g;
            }
        }
        net
    }
}
