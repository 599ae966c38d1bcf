use serde::{Deserialize, Serialize};

use super::spec::NetworkSpec;

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

/// Running statistics for one normalized layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnStats {
    fn fresh(width: usize) -> Self {
        BnStats { running_mean: vec![0.0; width], running_var: vec![1.0; width] }
    }
}

/// Batch-norm running statistics, kept apart from the learned parameters.
///
/// `layers[l]` is `Some` exactly for linear layers followed by batch norm.
/// Variances are population (biased) variances throughout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub layers: Vec<Option<BnStats>>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(spec: &NetworkSpec) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| spec.has_bn(l).then(|| BnStats::fresh(spec.layer_sizes[l + 1])))
            .collect();
        BatchNormState { layers, momentum: DEFAULT_BN_MOMENTUM, epsilon: DEFAULT_BN_EPSILON }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.iter().all(Option::is_none)
    }

    /// Resets running statistics to mean 0 / variance 1.
    pub fn reset(&mut self) {
        for s in self.layers.iter_mut().flatten() {
            *s = BnStats::fresh(s.running_mean.len());
        }
    }

    pub(crate) fn update(&mut self, l: usize, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        if let Some(s) = self.layers[l].as_mut() {
            for (r, &b) in s.running_mean.iter_mut().zip(mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, &b) in s.running_var.iter_mut().zip(var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Permutes per-feature arrays of layer `l`: new feature `i` is old `perm[i]`.
    pub fn permute_layer(&mut self, l: usize, perm: &[usize]) {
        if let Some(s) = self.layers[l].as_mut() {
            s.running_mean = perm.iter().map(|&p| s.running_mean[p]).collect();
            s.running_var = perm.iter().map(|&p| s.running_var[p]).collect();
        }
    }
}

/// Streaming mean/variance accumulator (Chan et al. pairwise merge).
#[derive(Clone, Debug)]
pub(crate) struct MomentAccumulator {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(width: usize) -> Self {
        MomentAccumulator { count: 0.0, mean: vec![0.0; width], m2: vec![0.0; width] }
    }

    pub fn merge(&mut self, n: usize, mean: &[f64], var: &[f64]) {
        let nb = n as f64;
        let total = self.count + nb;
        if nb == 0.0 {
            return;
        }
        for j in 0..self.mean.len() {
            let delta = mean[j] - self.mean[j];
            self.mean[j] += delta * nb / total;
            self.m2[j] += var[j] * nb + delta * delta * self.count * nb / total;
        }
        self.count = total;
    }

    pub fn finish(self) -> BnStats {
        let c = self.count.max(1.0);
        BnStats { running_mean: self.mean, running_var: self.m2.into_iter().map(|m| m / c).collect() }
    }
}
