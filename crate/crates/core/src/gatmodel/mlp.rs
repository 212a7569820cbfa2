//! Per-source-domain mapper MLP aligning a source embedding row to the
//! target feature space: dense layers d -> 16 -> 4 -> d with ReLU between
//! layers and a linear output.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;

pub const HIDDEN: [usize; 2] = [16, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperMlp {
    /// Dense weights, row-major: w[k] has shape out_k x in_k.
    pub weights: [Matrix; 3],
    pub biases: [Vec<f64>; 3],
    pub dim: usize,
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: Vec<f64>,
    /// Post-ReLU hidden activations.
    pub hidden: [Vec<f64>; 2],
    pub output: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: [Matrix; 3],
    pub biases: [Vec<f64>; 3],
}

impl MapperMlp {
    pub fn init(dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let sizes = Self::layer_sizes(dim);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for &(n_in, n_out) in &sizes {
            weights.push(Matrix::from_flat(
                n_out,
                n_in,
                (0..n_out * n_in).map(|_| normal.sample(rng)).collect(),
            ));
            biases.push(vec![0.0; n_out]);
        }
        Self {
            weights: weights.try_into().expect("3 layers"),
            biases: biases.try_into().expect("3 layers"),
            dim,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        let sizes = Self::layer_sizes(dim);
        Self {
            weights: [
                Matrix::zeros(sizes[0].1, sizes[0].0),
                Matrix::zeros(sizes[1].1, sizes[1].0),
                Matrix::zeros(sizes[2].1, sizes[2].0),
            ],
            biases: [
                vec![0.0; sizes[0].1],
                vec![0.0; sizes[1].1],
                vec![0.0; sizes[2].1],
            ],
            dim,
        }
    }

    fn layer_sizes(dim: usize) -> [(usize, usize); 3] {
        [(dim, HIDDEN[0]), (HIDDEN[0], HIDDEN[1]), (HIDDEN[1], dim)]
    }

    pub fn param_count(dim: usize) -> usize {
        Self::layer_sizes(dim)
            .iter()
            .map(|&(n_in, n_out)| n_in * n_out + n_out)
            .sum()
    }

    /// Deterministic forward pass; the cache feeds the backward pass.
    pub fn forward(&self, x: &[f64]) -> MlpCache {
        debug_assert_eq!(x.len(), self.dim);
        let z1 = dense(&self.weights[0], &self.biases[0], x);
        let h1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
        let z2 = dense(&self.weights[1], &self.biases[1], &h1);
        let h2: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();
        let output = dense(&self.weights[2], &self.biases[2], &h2);
        MlpCache {
            input: x.to_vec(),
            hidden: [h1, h2],
            output,
        }
    }

    pub fn map(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).output
    }

    /// Backpropagate `d_out = dL/d(output)` through the saved activations.
    /// Accumulates into `grads`; the gradient into the input is discarded
    /// because source rows are constants on the target side.
    pub fn backward(&self, cache: &MlpCache, d_out: &[f64], grads: &mut MlpGrads) {
        let d_h2 = dense_backward(
            &self.weights[2],
            &cache.hidden[1],
            d_out,
            &mut grads.weights[2],
            &mut grads.biases[2],
        );
        let d_z2: Vec<f64> = d_h2
            .iter()
            .zip(&cache.hidden[1])
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        let d_h1 = dense_backward(
            &self.weights[1],
            &cache.hidden[0],
            &d_z2,
            &mut grads.weights[1],
            &mut grads.biases[1],
        );
        let d_z1: Vec<f64> = d_h1
            .iter()
            .zip(&cache.hidden[0])
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        dense_backward(
            &self.weights[0],
            &cache.input,
            &d_z1,
            &mut grads.weights[0],
            &mut grads.biases[0],
        );
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::param_count(self.dim));
        for k in 0..3 {
            out.extend_from_slice(self.weights[k].as_slice());
            out.extend_from_slice(&self.biases[k]);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut at = 0;
        for k in 0..3 {
            let w = self.weights[k].as_mut_slice();
            w.copy_from_slice(&flat[at..at + w.len()]);
            at += w.len();
            let b = &mut self.biases[k];
            let n = b.len();
            b.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        debug_assert_eq!(at, flat.len());
    }
}

impl MlpGrads {
    pub fn zeros(dim: usize) -> Self {
        let z = MapperMlp::zeros(dim);
        Self {
            weights: z.weights,
            biases: z.biases,
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for k in 0..3 {
            out.extend_from_slice(self.weights[k].as_slice());
            out.extend_from_slice(&self.biases[k]);
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for k in 0..3 {
            for w in self.weights[k].as_mut_slice() {
                *w *= s;
            }
            for b in self.biases[k].iter_mut() {
                *b *= s;
            }
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, s: f64) {
        for k in 0..3 {
            for (a, b) in self.weights[k]
                .as_mut_slice()
                .iter_mut()
                .zip(other.weights[k].as_slice())
            {
                *a += s * b;
            }
            for (a, b) in self.biases[k].iter_mut().zip(&other.biases[k]) {
                *a += s * b;
            }
        }
    }
}

fn dense(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (o, row) in out.iter_mut().zip(w.iter_rows()) {
        for (wij, xj) in row.iter().zip(x) {
            *o += wij * xj;
        }
    }
    out
}

/// Gradient of a dense layer: fills dW += d_out * x^T and db += d_out,
/// returns dL/dx.
fn dense_backward(
    w: &Matrix,
    x: &[f64],
    d_out: &[f64],
    dw: &mut Matrix,
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (i, g) in d_out.iter().enumerate() {
        db[i] += g;
        let wrow = w.row(i);
        let dwrow = dw.row_mut(i);
        for j in 0..x.len() {
            dwrow[j] += g * x[j];
            dx[j] += g * wrow[j];
        }
    }
    dx
}
