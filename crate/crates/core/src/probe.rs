//! Post-hoc linear probe: multinomial logistic regression on standardized
//! features, trained by full-batch gradient descent.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[classes][dim + 1]`, bias last.
    weights: Vec<Vec<f64>>,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

impl LinearProbe {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, opts: ProbeOptions) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::InvalidArgument(format!(
                "probe needs equal non-empty inputs, got {} rows and {} labels",
                x.len(),
                y.len()
            )));
        }
        let dim = x[0].len();
        if x.iter().any(|r| r.len() != dim) || y.iter().any(|&c| c >= classes) {
            return Err(Error::InvalidArgument("ragged probe features or label out of range".into()));
        }
        let n = x.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| {
                let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut probe = Self {
            mean,
            scale,
            weights: vec![vec![0.0; dim + 1]; classes],
        };
        let xs: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        let mut grad = vec![vec![0.0; dim + 1]; classes];
        let mut p = vec![0.0; classes];
        for _ in 0..opts.iterations {
            grad.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
            for (row, &label) in xs.iter().zip(y) {
                probe.scores_into(row, &mut p);
                softmax_in_place(&mut p);
                for (c, g) in grad.iter_mut().enumerate() {
                    let err = p[c] - if c == label { 1.0 } else { 0.0 };
                    for (gj, xj) in g.iter_mut().zip(row) {
                        *gj += err * xj;
                    }
                    g[dim] += err;
                }
            }
            for (w, g) in probe.weights.iter_mut().zip(&grad) {
                for j in 0..=dim {
                    let reg = if j < dim { opts.l2 * w[j] } else { 0.0 };
                    w[j] -= opts.lr * (g[j] / n + reg);
                }
            }
        }
        Ok(probe)
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn scores_into(&self, standardized: &[f64], out: &mut [f64]) {
        let dim = standardized.len();
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o = w[dim] + w[..dim].iter().zip(standardized).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let mut s = vec![0.0; self.weights.len()];
        self.scores_into(&self.standardize(row), &mut s);
        crate::metrics::argmax_rows(&s, s.len())[0]
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &c)| self.predict(r) == c).count();
        hits as f64 / x.len().max(1) as f64
    }
}

/// Fits a modality classifier on `train[m]` rows (label `m`) and reports its
/// accuracy on `test`.
pub fn modality_probe(train: &[Vec<Vec<f64>>; 3], test: &[Vec<Vec<f64>>; 3], opts: ProbeOptions) -> Result<f64> {
    let flatten = |sets: &[Vec<Vec<f64>>; 3]| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (m, rows) in sets.iter().enumerate() {
            x.extend(rows.iter().cloned());
            y.extend(std::iter::repeat_n(m, rows.len()));
        }
        (x, y)
    };
    let (xtr, ytr) = flatten(train);
    let (xte, yte) = flatten(test);
    let probe = LinearProbe::fit(&xtr, &ytr, 3, opts)?;
    Ok(probe.accuracy(&xte, &yte))
}
