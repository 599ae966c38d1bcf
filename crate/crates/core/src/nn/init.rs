use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::batchnorm::BatchNormState;
use super::params::{Layout, ParameterVector};
use super::spec::{InitScheme, NetworkSpec};
use crate::error::Result;
use crate::rng::seeded;

/// Draws initial parameters; identical seeds give bit-identical output.
pub fn initialize(spec: &NetworkSpec, seed: u64) -> Result<(ParameterVector, BatchNormState)> {
    spec.validate()?;
    let layout = Arc::new(Layout::for_spec(spec));
    let slots = layout.layer_slots(spec)?;
    let mut theta = ParameterVector::zeros(layout);
    let mut rng = seeded(seed, 0);
    let vals = theta.values_mut();

    match spec.init {
        InitScheme::KaimingUniform => {
            for s in &slots {
                let bound = (6.0 / s.fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).unwrap();
                fill(&mut vals[s.weight.clone()], &dist, &mut rng);
            }
        }
        InitScheme::Gaussian { scale } => {
            let dist = Normal::new(0.0, scale).unwrap();
            for s in &slots {
                fill(&mut vals[s.weight.clone()], &dist, &mut rng);
            }
        }
        InitScheme::BalancedLinear { scale } => {
            let dist = Normal::new(0.0, scale).unwrap();
            let (w, v) = (&slots[0], &slots[1]);
            fill(&mut vals[w.weight.clone()], &dist, &mut rng);
            // W is k x d row-major, V is d x k row-major; V = Wᵀ.
            let (k, d) = (w.fan_out, w.fan_in);
            for i in 0..d {
                for j in 0..k {
                    vals[v.weight.start + i * k + j] = vals[w.weight.start + j * d + i];
                }
            }
        }
    }
    for s in &slots {
        if let Some(g) = &s.gamma {
            vals[g.clone()].fill(1.0);
        }
    }
    Ok((theta, BatchNormState::new(spec)))
}

fn fill<D: Distribution<f64>>(dst: &mut [f64], dist: &D, rng: &mut impl Rng) {
    for v in dst {
        *v = dist.sample(rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::{Activation, LossKind};

    #[test]
    fn same_seed_same_parameters() {
        let spec = NetworkSpec::new(vec![7, 5, 3], Activation::Tanh, LossKind::Mse);
        let (a, _) = initialize(&spec, 42).unwrap();
        let (b, _) = initialize(&spec, 42).unwrap();
        let (c, _) = initialize(&spec, 43).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn balanced_init_is_exactly_transposed() {
        let spec = NetworkSpec::new(vec![6, 4, 6], Activation::Identity, LossKind::Mse)
            .with_init(InitScheme::BalancedLinear { scale: 0.3 });
        let (theta, _) = initialize(&spec, 9).unwrap();
        let w = theta.slice("layer0.weight").unwrap();
        let v = theta.slice("layer1.weight").unwrap();
        let mut max_diff: f64 = 0.0;
        for i in 0..6 {
            for j in 0..4 {
                max_diff = max_diff.max((v[i * 4 + j] - w[j * 6 + i]).abs());
            }
        }
        assert_eq!(max_diff, 0.0);
    }

    #[test]
    fn kaiming_uniform_variance_matches_closed_form() {
        // U(-b, b) has variance b²/3 = (6/fan_in)/3 = 2/fan_in.
        let spec = NetworkSpec::new(vec![100, 400, 1], Activation::Relu, LossKind::Mse);
        let (theta, _) = initialize(&spec, 1).unwrap();
        let w = theta.slice("layer0.weight").unwrap();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expected: f64 = (6.0 / 100.0) * 4.0 / 12.0;
        assert!((var.sqrt() / expected.sqrt() - 1.0).abs() < 0.1, "std {} vs {}", var.sqrt(), expected.sqrt());
        assert!(theta.slice("layer0.bias").unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn bn_scales_start_at_one() {
        let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Relu, LossKind::Mse).with_batch_norm(true);
        let (theta, bn) = initialize(&spec, 0).unwrap();
        assert!(theta.slice("layer0.bn_gamma").unwrap().iter().all(|&g| g == 1.0));
        assert!(bn.layers[0].is_some() && bn.layers[1].is_none());
    }
}
