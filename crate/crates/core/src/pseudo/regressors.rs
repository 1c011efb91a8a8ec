//! Outcome regressors used as nuisance models.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpSpec, ParamSet};
use crate::rng;
use crate::scalar::Scalar;

/// Brute-force k-nearest-neighbour mean under Euclidean distance. Ties are
/// broken by training order.
#[derive(Clone, Debug)]
pub struct KnnRegressor<T> {
    k: usize,
    xs: Vec<Vec<T>>,
    ys: Vec<T>,
}

impl<T: Scalar> KnnRegressor<T> {
    pub fn fit(xs: Vec<Vec<T>>, ys: Vec<T>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Fit(format!(
                "k-NN needs matching non-empty data, got {} rows and {} targets",
                xs.len(),
                ys.len()
            )));
        }
        Ok(Self { k, xs, ys })
    }

    pub fn predict(&self, x: &[T]) -> T {
        let mut dist: Vec<(T, usize)> = self
            .xs
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let d = row
                    .iter()
                    .zip(x)
                    .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
                (d, i)
            })
            .collect();
        let k = self.k.min(dist.len());
        let cmp = |a: &(T, usize), b: &(T, usize)| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        };
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        let sum: T = dist[..k].iter().map(|&(_, i)| self.ys[i]).sum();
        sum / T::lit(k as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpRegressorConfig {
    pub hidden_dim: usize,
    pub n_residual_blocks: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for MlpRegressorConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            n_residual_blocks: 1,
            epochs: 60,
            batch_size: 32,
            lr: 0.01,
        }
    }
}

/// Residual MLP on standardized inputs and targets, trained by minibatch SGD.
#[derive(Clone, Debug)]
pub struct MlpRegressor<T> {
    net: Mlp<T>,
    x_mean: Vec<T>,
    x_scale: Vec<T>,
    y_mean: T,
    y_scale: T,
}

fn standardize<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> (T, T) {
    let n = T::lit(values.clone().count().max(1) as f64);
    let mean = values.clone().sum::<T>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<T>() / n;
    let sd = var.sqrt();
    (mean, if sd > T::lit(1e-12) { sd } else { T::one() })
}

impl<T: Scalar> MlpRegressor<T> {
    pub fn fit(xs: &[Vec<T>], ys: &[T], cfg: &MlpRegressorConfig, seed: u64) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Fit(format!(
                "MLP regressor needs matching non-empty data, got {} rows and {} targets",
                xs.len(),
                ys.len()
            )));
        }
        if cfg.batch_size == 0 || cfg.hidden_dim == 0 || !(cfg.lr > 0.0) {
            return Err(Error::Config(format!("invalid MLP regressor config {cfg:?}")));
        }
        let d = xs[0].len();
        let (x_mean, x_scale): (Vec<T>, Vec<T>) =
            (0..d).map(|j| standardize(xs.iter().map(|r| r[j]))).unzip();
        let (y_mean, y_scale) = standardize(ys.iter().copied());
        let zx: Vec<Vec<T>> = xs
            .iter()
            .map(|r| {
                r.iter()
                    .zip(x_mean.iter().zip(&x_scale))
                    .map(|(&v, (&m, &s))| (v - m) / s)
                    .collect()
            })
            .collect();
        let zy: Vec<T> = ys.iter().map(|&y| (y - y_mean) / y_scale).collect();

        let spec = MlpSpec {
            input_dim: d,
            hidden_dim: cfg.hidden_dim,
            n_residual_blocks: cfg.n_residual_blocks,
            output_dim: 1,
        };
        let mut rng = rng::stream(seed, 0);
        let mut net = Mlp::init(spec, &mut rng)?;
        let lr = T::lit(cfg.lr);
        let mut order: Vec<usize> = (0..zx.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                let mut grad = net.zeros_like();
                let scale = T::lit(2.0 / chunk.len() as f64);
                for &i in chunk {
                    let tr = net.trace(&zx[i])?;
                    let dout = [(tr.output[0] - zy[i]) * scale];
                    net.backward(&tr, &dout, &mut grad);
                }
                for (p, g) in net.tensors_mut().into_iter().zip(grad.tensors()) {
                    for (v, &gv) in p.iter_mut().zip(g) {
                        *v -= lr * gv;
                    }
                }
            }
        }
        if !net.is_finite() {
            return Err(Error::Fit("MLP regressor diverged".into()));
        }
        Ok(Self {
            net,
            x_mean,
            x_scale,
            y_mean,
            y_scale,
        })
    }

    pub fn predict(&self, x: &[T]) -> Result<T> {
        let z: Vec<T> = x
            .iter()
            .zip(self.x_mean.iter().zip(&self.x_scale))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect();
        Ok(self.net.forward(&z)?[0] * self.y_scale + self.y_mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn one_nearest_neighbour() {
        let knn = KnnRegressor::fit(vec![vec![0.0], vec![1.0]], vec![0.0, 1.0], 1).unwrap();
        assert_eq!(knn.predict(&[0.9]), 1.0);
        assert_eq!(knn.predict(&[0.1]), 0.0);
    }

    #[test]
    fn knn_ties_use_training_order_and_k_is_capped() {
        let knn = KnnRegressor::fit(vec![vec![1.0], vec![-1.0], vec![5.0]], vec![10.0, 20.0, 30.0], 1)
            .unwrap();
        assert_eq!(knn.predict(&[0.0]), 10.0);
        let all = KnnRegressor::fit(vec![vec![0.0], vec![1.0]], vec![2.0, 4.0], 10).unwrap();
        assert_eq!(all.predict(&[0.0]), 3.0);
        assert!(KnnRegressor::<f64>::fit(vec![], vec![], 1).is_err());
    }

    #[test]
    fn mlp_beats_variance_on_linear_signal() {
        let mut rng = rng::stream(5, 0);
        let coef = [0.8, -0.5, 0.3, 0.1];
        let mut draw = |n: usize| -> (Vec<Vec<f64>>, Vec<f64>) {
            let xs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let ys = xs
                .iter()
                .map(|x| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    x.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>() + 0.3 * noise
                })
                .collect();
            (xs, ys)
        };
        let (xs, ys) = draw(2000);
        let (xt, yt) = draw(500);
        let model = MlpRegressor::fit(&xs, &ys, &MlpRegressorConfig::default(), 1).unwrap();
        let mse = xt
            .iter()
            .zip(&yt)
            .map(|(x, y)| (model.predict(x).unwrap() - y).powi(2))
            .sum::<f64>()
            / 500.0;
        let mean = yt.iter().sum::<f64>() / 500.0;
        let var = yt.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / 500.0;
        assert!(mse < var, "mse {mse} vs var {var}");
        assert!(mse < 0.2, "mse {mse}");
    }
}
