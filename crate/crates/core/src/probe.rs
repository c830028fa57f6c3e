//! Logistic-regression probe for checking how much label signal a set of
//! patch features carries.

use crate::error::{Error, Result};
use crate::tape::sigmoid;

#[derive(Clone, Debug)]
pub struct LogisticProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl LogisticProbe {
    /// Full-batch gradient descent on the L2-penalized log loss, with inputs
    /// standardized on the training rows.
    pub fn fit(x: &[f64], dim: usize, y: &[u8], l2: f64, iters: usize, lr: f64) -> Result<Self> {
        if dim == 0 || x.len() != y.len() * dim || y.is_empty() {
            return Err(Error::Data("probe inputs do not match".into()));
        }
        let n = y.len();
        let mut mean = vec![0.0; dim];
        let mut std = vec![0.0; dim];
        for row in x.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        for row in x.chunks_exact(dim) {
            for ((s, v), m) in std.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in &mut std {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let z: Vec<f64> = x
            .chunks_exact(dim)
            .flat_map(|row| row.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s))
            .collect();

        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let mut gw = vec![0.0; dim];
        for _ in 0..iters {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (row, &t) in z.chunks_exact(dim).zip(y) {
                let p = sigmoid(row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b);
                let r = (p - t as f64) / n as f64;
                gb += r;
                for (g, v) in gw.iter_mut().zip(row) {
                    *g += r * v;
                }
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= lr * (g + l2 * *wi);
            }
            b -= lr * gb;
        }
        Ok(Self {
            weights: w,
            bias: b,
            mean,
            std,
        })
    }

    pub fn score(&self, row: &[f64]) -> f64 {
        let s: f64 = row
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| (v - m) / s * w)
            .sum();
        sigmoid(s + self.bias)
    }
}
