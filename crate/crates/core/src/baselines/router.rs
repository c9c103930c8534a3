//! Two-stage router: a logistic classifier on prompt features predicting
//! whether the device can handle a prompt, fit on the BCE loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::Prompt;
use crate::error::{Error, Result};
use crate::policy::{ActionMask, PolicyParams};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl RouterParams {
    pub fn constant(probability: f64, dim: usize) -> Self {
        let p = probability.clamp(1e-12, 1.0 - 1e-12);
        RouterParams {
            weights: vec![0.0; dim],
            bias: (p / (1.0 - p)).ln(),
        }
    }

    /// Predicted probability that the device handles `features` on its own.
    pub fn probability(&self, features: &[f64]) -> f64 {
        let z: f64 = self.weights.iter().zip(features).map(|(w, x)| w * x).sum::<f64>() + self.bias;
        sigmoid(z)
    }

    pub fn predicts_device(&self, features: &[f64]) -> bool {
        self.probability(features) >= 0.5
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once every gradient coordinate is below this.
    pub tolerance: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            learning_rate: 0.5,
            max_iters: 5000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterFit {
    pub params: RouterParams,
    pub iterations: usize,
    pub loss: f64,
    pub positive_rate: f64,
    pub train_accuracy: f64,
    /// Labels were all equal; the router is a constant.
    pub degenerate: bool,
}

fn bce(params: &RouterParams, xs: &[&[f64]], labels: &[bool]) -> f64 {
    let eps = 1e-15;
    xs.iter()
        .zip(labels)
        .map(|(x, &z)| {
            let p = params.probability(x).clamp(eps, 1.0 - eps);
            if z {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / xs.len() as f64
}

fn accuracy(params: &RouterParams, xs: &[&[f64]], labels: &[bool]) -> f64 {
    let hits = xs
        .iter()
        .zip(labels)
        .filter(|(x, &z)| params.predicts_device(x) == z)
        .count();
    hits as f64 / xs.len() as f64
}

/// Full-batch gradient descent on the mean binary cross-entropy.
pub fn fit_logistic(xs: &[&[f64]], labels: &[bool], cfg: &LogisticConfig) -> Result<RouterFit> {
    if xs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if xs.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows for {} labels",
            xs.len(),
            labels.len()
        )));
    }
    let dim = xs[0].len();
    if xs.iter().any(|x| x.len() != dim) {
        return Err(Error::DimensionMismatch("router features have mixed dimension".into()));
    }
    let n = xs.len() as f64;
    let positives = labels.iter().filter(|&&z| z).count();
    let positive_rate = positives as f64 / n;

    if positives == 0 || positives == labels.len() {
        log::warn!(
            "router labels are all {}; falling back to a constant router",
            if positives == 0 { "0" } else { "1" }
        );
        let params = RouterParams::constant((positives as f64 + 0.5) / (n + 1.0), dim);
        return Ok(RouterFit {
            loss: bce(&params, xs, labels),
            train_accuracy: accuracy(&params, xs, labels),
            params,
            iterations: 0,
            positive_rate,
            degenerate: true,
        });
    }

    let mut params = RouterParams {
        weights: vec![0.0; dim],
        bias: 0.0,
    };
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (x, &z) in xs.iter().zip(labels) {
            let err = params.probability(x) - f64::from(u8::from(z));
            for (g, xi) in gw.iter_mut().zip(x.iter()) {
                *g += err * xi;
            }
            gb += err;
        }
        gw.iter_mut().for_each(|g| *g /= n);
        gb /= n;
        let max_grad = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
        for (w, g) in params.weights.iter_mut().zip(&gw) {
            *w -= cfg.learning_rate * g;
        }
        params.bias -= cfg.learning_rate * gb;
        if max_grad < cfg.tolerance {
            break;
        }
    }
    Ok(RouterFit {
        loss: bce(&params, xs, labels),
        train_accuracy: accuracy(&params, xs, labels),
        params,
        iterations,
        positive_rate,
        degenerate: false,
    })
}

/// `z = 1` iff any of `n_samples` device-only draws is correct.
pub fn router_labels(dataset: &[Prompt], policy: &PolicyParams, n_samples: usize, seed: u64) -> Result<Vec<bool>> {
    if n_samples < 2 {
        return Err(Error::config("router.n_samples", "must be >= 2"));
    }
    dataset
        .par_iter()
        .map(|p| {
            let mut rng = rng::stream(seed, Purpose::RouterLabels, &[p.id as u64]);
            let g = policy.sample_group_masked(p, n_samples, ActionMask::DeviceOnly, &mut rng)?;
            Ok(g.responses.iter().any(|r| p.action_table[r.action_index].is_correct))
        })
        .collect()
}

pub fn train_router(
    dataset: &[Prompt],
    policy: &PolicyParams,
    n_samples: usize,
    seed: u64,
    cfg: &LogisticConfig,
) -> Result<RouterFit> {
    let labels = router_labels(dataset, policy, n_samples, seed)?;
    let xs: Vec<&[f64]> = dataset.iter().map(|p| p.features.as_slice()).collect();
    fit_logistic(&xs, &labels, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_labels_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let labels: Vec<bool> = rows.iter().map(|x| x[0] + 0.5 * x[1] > 0.2).collect();
        let xs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let fit = fit_logistic(&xs, &labels, &LogisticConfig::default()).unwrap();
        assert!(!fit.degenerate);
        assert!(fit.train_accuracy >= 0.99, "{}", fit.train_accuracy);
    }

    #[test]
    fn all_positive_labels_route_everything_to_device() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.1, -1.0]).collect();
        let xs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let fit = fit_logistic(&xs, &[true; 50], &LogisticConfig::default()).unwrap();
        assert!(fit.degenerate);
        assert!(rows.iter().all(|x| fit.params.predicts_device(x)));
        let fit = fit_logistic(&xs, &[false; 50], &LogisticConfig::default()).unwrap();
        assert!(rows.iter().all(|x| !fit.params.predicts_device(x)));
    }

    #[test]
    fn gradient_descent_lowers_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let labels: Vec<bool> = rows
            .iter()
            .map(|x| rng.random::<f64>() < 1.0 / (1.0 + (-2.0 * x[0]).exp()))
            .collect();
        let xs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let zero = RouterParams::constant(0.5, 1);
        let fit = fit_logistic(&xs, &labels, &LogisticConfig::default()).unwrap();
        assert!(fit.loss < bce(&zero, &xs, &labels));
        assert!(fit.params.weights[0] > 0.5);
    }
}
