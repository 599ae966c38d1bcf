//! Linear interpolation between parameter vectors and the min-Δ statistic.

mod permute;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use permute::{
    permute_bn, permute_params, permuted_interpolation, random_permutation, random_permutation_of, Permutation,
    PermutedSide,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::weight_distance;
use crate::io::{csv_bytes, fmt_f64, write_atomic};
use crate::nn::{evaluate, warm_up_bn, BatchNormState, Evaluation, NetworkSpec, ParameterVector};

pub const DEFAULT_STEPS: usize = 50;

/// Uniform grid on [0, 1] with exact endpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaGrid {
    values: Vec<f64>,
}

impl AlphaGrid {
    pub fn new(n_steps: usize) -> Result<Self> {
        if n_steps < 2 {
            return Err(Error::config("an alpha grid needs at least 2 points"));
        }
        let last = (n_steps - 1) as f64;
        let mut values: Vec<f64> = (0..n_steps).map(|i| i as f64 / last).collect();
        values[n_steps - 1] = 1.0;
        Ok(AlphaGrid { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.values.len() - 1) as f64
    }
}

impl Default for AlphaGrid {
    fn default() -> Self {
        AlphaGrid::new(DEFAULT_STEPS).unwrap()
    }
}

/// `θ_α = (1 − α)θ₀ + αθ_T`; exact at both endpoints.
pub fn theta_at(theta0: &ParameterVector, theta_t: &ParameterVector, alpha: f64) -> Result<ParameterVector> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    theta0.lerp(theta_t, alpha)
}

/// Smallest Δ ≥ 0 such that no later value exceeds an earlier one by more than Δ.
pub fn min_delta(values: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    let mut delta: f64 = 0.0;
    for &v in values {
        best = best.min(v);
        delta = delta.max(v - best);
    }
    delta
}

/// Largest rise of the curve above the higher of its two endpoints.
pub fn barrier_height(values: &[f64]) -> f64 {
    let ends = values[0].max(values[values.len() - 1]);
    values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) - ends
}

/// How batch-norm statistics are chosen at each interpolated point.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterpOptions {
    /// Recompute statistics from the training inputs at every α.
    pub bn_warmup: bool,
    /// Use only the first rows of the training set for warm-up.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_rows: Option<usize>,
}

impl InterpOptions {
    pub fn warmup() -> Self {
        InterpOptions { bn_warmup: true, warmup_rows: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationReport {
    pub alphas: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub train_accuracy: Option<Vec<f64>>,
    pub test_loss: Option<Vec<f64>>,
    pub test_accuracy: Option<Vec<f64>>,
    pub bn_warmed: bool,
    /// Grid indices whose loss was not finite.
    pub nan_points: Vec<usize>,
    /// `None` when any training loss was not finite.
    pub min_delta: Option<f64>,
    pub distance_abs: f64,
    pub distance_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_ref: Option<String>,
}

impl InterpolationReport {
    pub fn is_degenerate(&self) -> bool {
        !self.nan_points.is_empty()
    }

    pub fn is_monotone(&self, tolerance: f64) -> bool {
        self.min_delta.is_some_and(|d| d <= tolerance)
    }

    pub fn barrier_height(&self) -> f64 {
        barrier_height(&self.train_loss)
    }

    pub fn with_refs(mut self, init: impl Into<String>, fin: impl Into<String>) -> Self {
        self.init_ref = Some(init.into());
        self.final_ref = Some(fin.into());
        self
    }

    pub fn csv(&self) -> Result<Vec<u8>> {
        let opt = |v: &Option<Vec<f64>>, i: usize| v.as_ref().map(|v| fmt_f64(v[i])).unwrap_or_default();
        let rows = (0..self.alphas.len()).map(|i| {
            vec![
                fmt_f64(self.alphas[i]),
                fmt_f64(self.train_loss[i]),
                opt(&self.train_accuracy, i),
                opt(&self.test_loss, i),
                opt(&self.test_accuracy, i),
                (self.bn_warmed as u8).to_string(),
            ]
        });
        csv_bytes(&["alpha", "train_loss", "train_acc", "test_loss", "test_acc", "bn_warmed"], rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.csv()?)
    }
}

/// Statistics used to evaluate `θ` under `options`.
pub fn bn_state_for(
    spec: &NetworkSpec,
    theta: &ParameterVector,
    bn: &BatchNormState,
    train: &Dataset,
    options: &InterpOptions,
) -> Result<BatchNormState> {
    if options.bn_warmup && !bn.is_empty() {
        let rows = options.warmup_rows.unwrap_or(train.len()).min(train.len());
        warm_up_bn(spec, theta, bn, train.inputs.slice(ndarray::s![..rows, ..]))
    } else {
        Ok(bn.clone())
    }
}

/// Whole-dataset loss (and accuracy) along the segment from `θ₀` to `θ_T`.
///
/// Without warm-up every point is evaluated with `bn`. Non-finite points are
/// kept and listed in `nan_points`.
#[allow(clippy::too_many_arguments)]
pub fn loss_curve(
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    theta_t: &ParameterVector,
    bn: &BatchNormState,
    train: &Dataset,
    test: Option<&Dataset>,
    grid: &AlphaGrid,
    options: &InterpOptions,
) -> Result<InterpolationReport> {
    if !theta0.same_layout(theta_t) {
        return Err(Error::LayoutMismatch);
    }
    let eval_point = |alpha: f64| -> Result<(Evaluation, Option<Evaluation>)> {
        let theta = theta_at(theta0, theta_t, alpha)?;
        let state = match bn_state_for(spec, &theta, bn, train, options) {
            Err(Error::Numeric(_)) => return Ok((NAN_EVAL, test.map(|_| NAN_EVAL))),
            other => other?,
        };
        let ev = |d: &Dataset| evaluate(spec, &theta, &state, d.inputs.view(), d.targets.view());
        let tr = ev(train).or_else(nan_on_numeric)?;
        let te = match test {
            Some(d) => Some(ev(d).or_else(nan_on_numeric)?),
            None => None,
        };
        Ok((tr, te))
    };
    let points: Vec<(Evaluation, Option<Evaluation>)> =
        grid.values().par_iter().map(|&a| eval_point(a)).collect::<Result<_>>()?;

    let train_loss: Vec<f64> = points.iter().map(|p| p.0.loss).collect();
    let train_accuracy = collect_opt(points.iter().map(|p| p.0.accuracy));
    let test_loss = test.map(|_| points.iter().map(|p| p.1.map_or(f64::NAN, |e| e.loss)).collect());
    let test_accuracy = collect_opt(points.iter().map(|p| p.1.and_then(|e| e.accuracy)));
    let nan_points: Vec<usize> = (0..points.len()).filter(|&i| !train_loss[i].is_finite()).collect();
    let (distance_abs, distance_norm) = weight_distance(theta0, theta_t)?;
    Ok(InterpolationReport {
        alphas: grid.values().to_vec(),
        min_delta: nan_points.is_empty().then(|| min_delta(&train_loss)),
        train_loss,
        train_accuracy,
        test_loss,
        test_accuracy,
        bn_warmed: options.bn_warmup && !bn.is_empty(),
        nan_points,
        distance_abs,
        distance_norm,
        init_ref: None,
        final_ref: None,
    })
}

const NAN_EVAL: Evaluation = Evaluation { loss: f64::NAN, accuracy: None };

fn nan_on_numeric(e: Error) -> Result<Evaluation> {
    match e {
        Error::Numeric(_) => Ok(NAN_EVAL),
        other => Err(other),
    }
}

fn collect_opt(it: impl Iterator<Item = Option<f64>>) -> Option<Vec<f64>> {
    let v: Vec<Option<f64>> = it.collect();
    v.iter().any(Option::is_some).then(|| v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
}

/// Every pairing among a set of initializations and a set of optima.
#[derive(Clone, Debug)]
pub struct CrossPairs {
    /// `init_init[i][j]`: init i to init j (i < j filled; others `None`).
    pub init_init: Vec<Vec<Option<InterpolationReport>>>,
    /// `init_opt[i][j]`: init i to optimum j; off-diagonal entries pair unrelated runs.
    pub init_opt: Vec<Vec<InterpolationReport>>,
    pub opt_opt: Vec<Vec<Option<InterpolationReport>>>,
}

pub fn cross_pairs(
    spec: &NetworkSpec,
    inits: &[ParameterVector],
    optima: &[ParameterVector],
    bn: &BatchNormState,
    train: &Dataset,
    grid: &AlphaGrid,
    options: &InterpOptions,
) -> Result<CrossPairs> {
    let curve = |a: &ParameterVector, b: &ParameterVector| loss_curve(spec, a, b, bn, train, None, grid, options);
    let upper = |set: &[ParameterVector]| -> Result<Vec<Vec<Option<InterpolationReport>>>> {
        (0..set.len())
            .map(|i| (0..set.len()).map(|j| if i < j { curve(&set[i], &set[j]).map(Some) } else { Ok(None) }).collect())
            .collect()
    };
    Ok(CrossPairs {
        init_init: upper(inits)?,
        init_opt: inits
            .iter()
            .map(|a| optima.iter().map(|b| curve(a, b)).collect::<Result<Vec<_>>>())
            .collect::<Result<_>>()?,
        opt_opt: upper(optima)?,
    })
}
