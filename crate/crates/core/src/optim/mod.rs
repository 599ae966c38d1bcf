//! Optimizers, grafting, and the mini-batch training loop.

mod optimizers;

use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use optimizers::{
    grafted_step, grafted_step_layerwise, step_adam, step_rmsprop, step_sgd, AdamState, BaseOptimizer,
    GraftNorm, Optimizer, OptimizerConfig, OptimizerKind, RmspropState, SgdState, SwitchConfig,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    accuracy_count, initialize, loss_gradient_outputs, Batch, BatchNormState, BnMode, NetworkSpec,
    ParameterVector, TargetsRef,
};
use crate::rng::seeded;

/// Losses above this (or non-finite) abort a run as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Per-epoch averages of the mini-batch training loss and accuracy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochHistory {
    pub train_loss: Vec<f64>,
    /// `None` for regression tasks.
    pub train_accuracy: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub params: ParameterVector,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub history: EpochHistory,
    /// Starts with θ₀ (step 0) and ends with θ_T.
    pub snapshots: Vec<Snapshot>,
    pub bn: BatchNormState,
    pub diverged: Option<Divergence>,
    pub steps: usize,
    pub wall_clock_secs: f64,
}

impl TrainRecord {
    pub fn initial(&self) -> &ParameterVector {
        &self.snapshots[0].params
    }

    pub fn final_params(&self) -> &ParameterVector {
        &self.snapshots.last().expect("record has snapshots").params
    }

    /// Same history, snapshots, statistics and divergence; wall-clock ignored.
    pub fn same_outcome(&self, other: &TrainRecord) -> bool {
        self.history == other.history
            && self.snapshots == other.snapshots
            && self.bn == other.bn
            && self.diverged == other.diverged
            && self.steps == other.steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Store a snapshot every this many steps; 0 keeps only the endpoints.
    #[serde(default)]
    pub snapshot_every: usize,
}

impl TrainOptions {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainOptions { epochs, batch_size, seed, snapshot_every: 0 }
    }

    pub fn with_snapshots(mut self, every: usize) -> Self {
        self.snapshot_every = every;
        self
    }
}

/// Initializes from `options.seed` and trains. Honors `opt.switch`.
pub fn train(spec: &NetworkSpec, data: &Dataset, opt: &OptimizerConfig, options: &TrainOptions) -> Result<TrainRecord> {
    let (theta0, bn0) = initialize(spec, options.seed)?;
    train_from(spec, data, opt, theta0, bn0, options)
}

/// Trains from the given starting point. Honors `opt.switch`.
pub fn train_from(
    spec: &NetworkSpec,
    data: &Dataset,
    opt: &OptimizerConfig,
    theta0: ParameterVector,
    bn0: BatchNormState,
    options: &TrainOptions,
) -> Result<TrainRecord> {
    let phases = match &opt.switch {
        Some(sw) => {
            let mut first = opt.clone();
            first.switch = None;
            vec![(first, sw.epoch), (sw.to.clone(), options.epochs.saturating_sub(sw.epoch))]
        }
        None => vec![(opt.clone(), options.epochs)],
    };
    run_phases(spec, data, &phases, theta0, bn0, options)
}

/// Trains `switch_epoch` epochs with `opt_a`, then the rest with a freshly
/// initialized `opt_b`. The shuffling stream continues across the switch.
pub fn train_with_switch(
    spec: &NetworkSpec,
    data: &Dataset,
    opt_a: &OptimizerConfig,
    opt_b: &OptimizerConfig,
    switch_epoch: usize,
    options: &TrainOptions,
) -> Result<TrainRecord> {
    if switch_epoch > options.epochs {
        return Err(Error::config(format!(
            "switch epoch {switch_epoch} exceeds total epochs {}",
            options.epochs
        )));
    }
    let (theta0, bn0) = initialize(spec, options.seed)?;
    let phases = vec![(opt_a.clone(), switch_epoch), (opt_b.clone(), options.epochs - switch_epoch)];
    run_phases(spec, data, &phases, theta0, bn0, options)
}

fn run_phases(
    spec: &NetworkSpec,
    data: &Dataset,
    phases: &[(OptimizerConfig, usize)],
    theta0: ParameterVector,
    bn0: BatchNormState,
    options: &TrainOptions,
) -> Result<TrainRecord> {
    spec.validate()?;
    let n = data.len();
    if data.dim() != spec.input_dim() {
        return Err(Error::dim(format!("data has {} features, network expects {}", data.dim(), spec.input_dim())));
    }
    if options.batch_size == 0 || options.batch_size > n {
        return Err(Error::config(format!("batch size {} must lie in [1, {n}]", options.batch_size)));
    }
    for (cfg, _) in phases {
        cfg.validate()?;
    }
    let start = Instant::now();
    let mut theta = theta0;
    let mut bn = bn0;
    let mut rng = seeded(options.seed, 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = EpochHistory::default();
    let mut snapshots = vec![Snapshot { step: 0, params: theta.clone() }];
    let mut diverged = None;
    let mut step = 0;
    let uses_bn = !bn.is_empty();

    'outer: for (cfg, epochs) in phases {
        let mut optimizer = Optimizer::new(cfg)?;
        for _ in 0..*epochs {
            order.shuffle(&mut rng);
            let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
            for chunk in order.chunks(options.batch_size) {
                // A single-row batch has no batch variance to normalize by.
                if uses_bn && chunk.len() < 2 {
                    continue;
                }
                let inputs = data.inputs.select(Axis(0), chunk);
                let targets = data.targets.gather(chunk);
                let batch = Batch::new(inputs.view(), targets.view());
                let (loss, grad, out) = loss_gradient_outputs(spec, &theta, BnMode::Train(&mut bn), &batch)?;
                if !loss.is_finite() || loss > DIVERGENCE_THRESHOLD {
                    diverged = Some(Divergence { step, loss });
                    break 'outer;
                }
                loss_sum += loss * chunk.len() as f64;
                seen += chunk.len();
                if let TargetsRef::Labels(l) = targets.view() {
                    correct += accuracy_count(&out, l);
                }
                optimizer.step(&mut theta, &grad)?;
                step += 1;
                if !theta.is_finite() {
                    diverged = Some(Divergence { step, loss: f64::NAN });
                    break 'outer;
                }
                if options.snapshot_every > 0 && step % options.snapshot_every == 0 {
                    snapshots.push(Snapshot { step, params: theta.clone() });
                }
            }
            history.train_loss.push(loss_sum / seen.max(1) as f64);
            history
                .train_accuracy
                .push(data.num_classes.map(|_| correct as f64 / seen.max(1) as f64));
        }
    }
    if snapshots.last().map(|s| s.step) != Some(step) {
        snapshots.push(Snapshot { step, params: theta.clone() });
    }
    Ok(TrainRecord {
        history,
        snapshots,
        bn,
        diverged,
        steps: step,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use ndarray::Array2;

    use super::*;
    use crate::data::synthetic_blobs;
    use crate::nn::{evaluate, loss, Activation, InitScheme, LossKind};

    fn blobs() -> Dataset {
        synthetic_blobs(3, 150, 4, 4.0, 11).unwrap()
    }

    fn mlp(d: usize, k: usize) -> NetworkSpec {
        NetworkSpec::new(vec![d, 16, k], Activation::Relu, LossKind::SoftmaxCrossEntropy)
    }

    #[test]
    fn full_batch_gd_on_quadratic_decreases_every_step() {
        // Linear regression with identity features: L(w) = ½·mean‖w − y‖², convex.
        let x = Array2::eye(4);
        let y = Array2::from_shape_fn((4, 1), |(i, _)| i as f64 - 1.5);
        let data = Dataset::regression(x, y, "quadratic").unwrap();
        let spec = NetworkSpec::new(vec![4, 1], Activation::Identity, LossKind::Mse)
            .with_init(InitScheme::Gaussian { scale: 1.0 });
        let opt = OptimizerConfig::sgd(0.5).with_momentum(0.0);
        let rec = train(&spec, &data, &opt, &TrainOptions::new(30, 4, 0).with_snapshots(1)).unwrap();
        let bn = BatchNormState::new(&spec);
        let losses: Vec<f64> = rec
            .snapshots
            .iter()
            .map(|s| loss(&spec, &s.params, BnMode::Eval(&bn), &data.batch()).unwrap())
            .collect();
        assert_eq!(losses.len(), 31);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn blobs_are_learned() {
        let data = blobs();
        let spec = mlp(4, 3);
        let rec = train(&spec, &data, &OptimizerConfig::sgd(0.1), &TrainOptions::new(50, 16, 3)).unwrap();
        let ev = evaluate(&spec, rec.final_params(), &rec.bn, data.inputs.view(), data.targets.view()).unwrap();
        assert!(ev.accuracy.unwrap() > 0.95, "{ev:?}");
        assert!(rec.diverged.is_none());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = blobs();
        let rec = train(&mlp(4, 3), &data, &OptimizerConfig::adam(0.0), &TrainOptions::new(3, 32, 1)).unwrap();
        assert_eq!(rec.initial(), rec.final_params());
        assert!(rec.steps > 0);
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs();
        let spec = mlp(4, 3).with_batch_norm(true);
        let o = TrainOptions::new(3, 20, 8).with_snapshots(5);
        let a = train(&spec, &data, &OptimizerConfig::adam(0.01), &o).unwrap();
        let b = train(&spec, &data, &OptimizerConfig::adam(0.01), &o).unwrap();
        assert!(a.same_outcome(&b));
        let c = train(&spec, &data, &OptimizerConfig::adam(0.01), &TrainOptions { seed: 9, ..o }).unwrap();
        assert!(!a.same_outcome(&c));
    }

    #[test]
    fn snapshot_stride_and_endpoints() {
        let data = blobs();
        let rec = train(&mlp(4, 3), &data, &OptimizerConfig::sgd(0.05), &TrainOptions::new(2, 32, 0).with_snapshots(4))
            .unwrap();
        // 150 rows / 32 = 5 batches per epoch, 10 steps.
        assert_eq!(rec.steps, 10);
        let steps: Vec<usize> = rec.snapshots.iter().map(|s| s.step).collect();
        assert_eq!(steps, vec![0, 4, 8, 10]);
    }

    #[test]
    fn switch_edge_cases_match_single_optimizers() {
        let data = blobs();
        let spec = mlp(4, 3);
        let o = TrainOptions::new(4, 25, 2);
        let sgd = OptimizerConfig::sgd(0.05);
        let adam = OptimizerConfig::adam(0.01);
        let at0 = train_with_switch(&spec, &data, &sgd, &adam, 0, &o).unwrap();
        let adam_only = train(&spec, &data, &adam, &o).unwrap();
        assert!(at0.same_outcome(&adam_only));
        let at_end = train_with_switch(&spec, &data, &sgd, &adam, 4, &o).unwrap();
        let sgd_only = train(&spec, &data, &sgd, &o).unwrap();
        assert!(at_end.same_outcome(&sgd_only));
        let via_cfg = train(&spec, &data, &sgd.clone().switching_to(2, adam.clone()), &o).unwrap();
        let direct = train_with_switch(&spec, &data, &sgd, &adam, 2, &o).unwrap();
        assert!(via_cfg.same_outcome(&direct));
        assert!(train_with_switch(&spec, &data, &sgd, &adam, 5, &o).is_err());
    }

    #[test]
    fn divergence_is_recorded() {
        let data = blobs();
        let rec = train(&mlp(4, 3), &data, &OptimizerConfig::sgd(1e4).with_momentum(0.0), &TrainOptions::new(20, 10, 0))
            .unwrap();
        assert!(rec.diverged.is_some());
    }

    #[test]
    fn rejects_oversized_batch() {
        let data = blobs();
        assert!(train(&mlp(4, 3), &data, &OptimizerConfig::sgd(0.1), &TrainOptions::new(1, 151, 0)).is_err());
    }
}
