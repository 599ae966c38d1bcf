//! Hidden-unit permutations that leave the network function unchanged.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{loss_curve, AlphaGrid, InterpOptions, InterpolationReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{BatchNormState, NetworkSpec, ParameterVector};
use crate::rng::seeded;

/// One permutation per hidden layer; new unit `i` is old unit `layers[l][i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    pub layers: Vec<Vec<usize>>,
}

impl Permutation {
    pub fn identity(spec: &NetworkSpec) -> Self {
        Permutation { layers: spec.hidden_widths().iter().map(|&w| (0..w).collect()).collect() }
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|p| p.iter().enumerate().all(|(i, &j)| i == j))
    }

    fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let widths = spec.hidden_widths();
        if self.layers.len() != widths.len() {
            return Err(Error::dim("one permutation per hidden layer expected"));
        }
        for (p, &w) in self.layers.iter().zip(widths) {
            let mut seen = vec![false; w];
            if p.len() != w || p.iter().any(|&j| j >= w || std::mem::replace(&mut seen[j], true)) {
                return Err(Error::config("not a permutation of the hidden units"));
            }
        }
        Ok(())
    }
}

pub fn random_permutation(spec: &NetworkSpec, seed: u64) -> Permutation {
    let mut rng = seeded(seed, 2);
    let mut p = Permutation::identity(spec);
    for layer in &mut p.layers {
        layer.shuffle(&mut rng);
    }
    p
}

/// Reorders hidden units: rows (and bias / BN affine entries) of layer `l`
/// and the matching input columns of layer `l + 1`.
pub fn permute_params(spec: &NetworkSpec, theta: &ParameterVector, perm: &Permutation) -> Result<ParameterVector> {
    perm.validate(spec)?;
    let slots = theta.layout().layer_slots(spec)?;
    let mut out = theta.clone();
    for (l, p) in perm.layers.iter().enumerate() {
        // Layer l + 1 is touched twice (columns now, rows next), so read from the latest state.
        let src = out.values().to_vec();
        let dst = out.values_mut();
        let cur = &slots[l];
        let fin = cur.fan_in;
        for (i, &j) in p.iter().enumerate() {
            let (to, from) = (cur.weight.start + i * fin, cur.weight.start + j * fin);
            dst[to..to + fin].copy_from_slice(&src[from..from + fin]);
            for r in [&cur.bias, &cur.gamma, &cur.beta].into_iter().flatten() {
                dst[r.start + i] = src[r.start + j];
            }
        }
        let next = &slots[l + 1];
        let nin = next.fan_in;
        for o in 0..next.fan_out {
            for (i, &j) in p.iter().enumerate() {
                dst[next.weight.start + o * nin + i] = src[next.weight.start + o * nin + j];
            }
        }
    }
    Ok(out)
}

pub fn permute_bn(bn: &BatchNormState, perm: &Permutation) -> BatchNormState {
    let mut out = bn.clone();
    for (l, p) in perm.layers.iter().enumerate() {
        out.permute_layer(l, p);
    }
    out
}

pub fn random_permutation_of(theta: &ParameterVector, spec: &NetworkSpec, seed: u64) -> Result<ParameterVector> {
    permute_params(spec, theta, &random_permutation(spec, seed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutedSide {
    Init,
    Solution,
}

/// Re-runs the interpolation with one endpoint replaced by a permuted copy.
#[allow(clippy::too_many_arguments)]
pub fn permuted_interpolation(
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    theta_t: &ParameterVector,
    bn: &BatchNormState,
    train: &Dataset,
    grid: &AlphaGrid,
    options: &InterpOptions,
    side: PermutedSide,
    seed: u64,
) -> Result<InterpolationReport> {
    let perm = random_permutation(spec, seed);
    match side {
        PermutedSide::Init => {
            let p0 = permute_params(spec, theta0, &perm)?;
            loss_curve(spec, &p0, theta_t, bn, train, None, grid, options)
        }
        PermutedSide::Solution => {
            let pt = permute_params(spec, theta_t, &perm)?;
            loss_curve(spec, theta0, &pt, &permute_bn(bn, &perm), train, None, grid, options)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, initialize, Activation, BnMode, InitScheme, LossKind};
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn identity_permutation_changes_nothing() {
        let spec = NetworkSpec::new(vec![3, 5, 4, 2], Activation::Relu, LossKind::Mse);
        let (theta, _) = initialize(&spec, 1).unwrap();
        let p = Permutation::identity(&spec);
        assert!(p.is_identity());
        assert_eq!(permute_params(&spec, &theta, &p).unwrap(), theta);
    }

    #[test]
    fn permuted_network_computes_the_same_function() {
        for bn in [false, true] {
            let spec = NetworkSpec::new(vec![4, 7, 6, 3], Activation::Tanh, LossKind::SoftmaxCrossEntropy)
                .with_batch_norm(bn)
                .with_init(InitScheme::Gaussian { scale: 0.8 });
            let (mut theta, mut state) = initialize(&spec, 4).unwrap();
            // Non-trivial BN affine and statistics.
            let mut rng = seeded(7, 0);
            for v in theta.values_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
            for s in state.layers.iter_mut().flatten() {
                for (m, v) in s.running_mean.iter_mut().zip(s.running_var.iter_mut()) {
                    *m = rng.random_range(-1.0..1.0);
                    *v = rng.random_range(0.5..2.0);
                }
            }
            let x = Array2::from_shape_fn((100, 4), |_| rng.random_range(-2.0..2.0));
            for seed in 0..5 {
                let perm = random_permutation(&spec, seed);
                assert!(!perm.is_identity());
                let pt = permute_params(&spec, &theta, &perm).unwrap();
                let ps = permute_bn(&state, &perm);
                let a = forward(&spec, &theta, BnMode::Eval(&state), x.view()).unwrap();
                let b = forward(&spec, &pt, BnMode::Eval(&ps), x.view()).unwrap();
                let err = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(err <= 1e-12, "{err}");
            }
        }
    }

    #[test]
    fn rejects_invalid_permutations() {
        let spec = NetworkSpec::new(vec![2, 3, 1], Activation::Relu, LossKind::Mse);
        let (theta, _) = initialize(&spec, 0).unwrap();
        let bad = Permutation { layers: vec![vec![0, 0, 1]] };
        assert!(permute_params(&spec, &theta, &bad).is_err());
    }
}
