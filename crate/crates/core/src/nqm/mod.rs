//! Noisy quadratic model: `L(θ) = ½θᵀKθ` trained with gradients `Kθ + c`, `c ~ N(0, K)`.
//!
//! Along the interpolation `θ_α = θ₁ + α(θ₂ − θ₁)` the derivative of the loss is
//! linear in `α`, so monotonicity is decided by its two endpoint values.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_bytes, fmt_f64, write_atomic};
use crate::rng::{seeded, Rng};

/// Endpoint statistics within this distance of zero count as non-positive.
pub const BOUNDARY_TOLERANCE: f64 = 1e-12;

const TRIAL_STREAM: u64 = 1 << 40;

/// How the final iterate is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Run the recursion step by step.
    Iterate,
    /// Draw from the exact law of the `steps`-th iterate, which is Gaussian
    /// per coordinate: `ρᵀθ₀ + N(0, lr²k(1 − ρ^{2T})/(1 − ρ²))`, `ρ = 1 − lr·k`.
    ExactLaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NqmConfig {
    /// Diagonal of `K`.
    pub curvature: Vec<f64>,
    pub lr: f64,
    pub steps: usize,
    pub trials: usize,
    pub seed: u64,
    /// `false` drops the gradient noise.
    pub noise: bool,
    pub sampler: Sampler,
}

/// `diag(1, 1/2, …, 1/d)`.
pub fn harmonic_curvature(d: usize) -> Vec<f64> {
    (1..=d).map(|i| 1.0 / i as f64).collect()
}

/// `10 · (1/lr) · max(1/k_i)`: long enough for the slowest coordinate to forget θ₀.
pub fn asymptotic_steps(curvature: &[f64], lr: f64) -> usize {
    let k_min = curvature.iter().cloned().fold(f64::INFINITY, f64::min);
    (10.0 / (lr * k_min)).ceil() as usize
}

impl NqmConfig {
    pub fn new(d: usize, lr: f64, trials: usize, seed: u64) -> Self {
        let curvature = harmonic_curvature(d);
        let steps = asymptotic_steps(&curvature, lr);
        NqmConfig { curvature, lr, steps, trials, seed, noise: true, sampler: Sampler::ExactLaw }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_sampler(mut self, sampler: Sampler) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn without_noise(mut self) -> Self {
        self.noise = false;
        self
    }

    pub fn d(&self) -> usize {
        self.curvature.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.curvature.is_empty() {
            return Err(Error::config("NQM dimension must be positive"));
        }
        if self.curvature.iter().any(|&k| !(k.is_finite() && k > 0.0)) {
            return Err(Error::config("curvatures must be finite and positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        Ok(())
    }

    /// True when every coordinate contracts (`lr < 2/max k`).
    pub fn is_stable(&self) -> bool {
        let k_max = self.curvature.iter().cloned().fold(0.0, f64::max);
        self.lr * k_max < 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NqmTrial {
    pub theta0: Vec<f64>,
    pub theta_t: Vec<f64>,
    pub diverged: bool,
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn trial_rng(seed: u64, trial: usize) -> Rng {
    seeded(seed, TRIAL_STREAM + trial as u64)
}

fn simulate_trial(cfg: &NqmConfig, trial: usize) -> NqmTrial {
    let mut rng = trial_rng(cfg.seed, trial);
    let theta0: Vec<f64> = (0..cfg.d()).map(|_| normal(&mut rng)).collect();
    let mut theta = theta0.clone();
    match cfg.sampler {
        Sampler::Iterate => {
            for _ in 0..cfg.steps {
                for (t, &k) in theta.iter_mut().zip(&cfg.curvature) {
                    let c = if cfg.noise { k.sqrt() * normal(&mut rng) } else { 0.0 };
                    *t -= cfg.lr * (k * *t + c);
                }
            }
        }
        Sampler::ExactLaw => {
            for (t, &k) in theta.iter_mut().zip(&cfg.curvature) {
                let rho = 1.0 - cfg.lr * k;
                let decay = rho.powf(cfg.steps as f64);
                *t *= decay;
                if cfg.noise {
                    // Σ_{s<T} ρ^{2s}, guarded for ρ² = 1.
                    let geo = if (1.0 - rho * rho).abs() < 1e-300 {
                        cfg.steps as f64
                    } else {
                        (1.0 - decay * decay) / (1.0 - rho * rho)
                    };
                    *t += (cfg.lr * cfg.lr * k * geo).sqrt() * normal(&mut rng);
                }
            }
        }
    }
    let diverged = theta.iter().any(|t| !t.is_finite() || t.abs() > 1e150);
    NqmTrial { theta0, theta_t: theta, diverged }
}

/// Independent trials, parallel and deterministic per seed.
pub fn simulate(cfg: &NqmConfig) -> Result<Vec<NqmTrial>> {
    cfg.validate()?;
    Ok((0..cfg.trials).into_par_iter().map(|t| simulate_trial(cfg, t)).collect())
}

pub fn quadratic_loss(theta: &[f64], curvature: &[f64]) -> f64 {
    0.5 * theta.iter().zip(curvature).map(|(t, k)| k * t * t).sum::<f64>()
}

/// `((θ₂−θ₁)ᵀKθ₁, (θ₂−θ₁)ᵀKθ₂)`: the loss derivative at `α = 0` and `α = 1`.
pub fn endpoint_statistics(theta1: &[f64], theta2: &[f64], curvature: &[f64]) -> Result<(f64, f64)> {
    if theta1.len() != theta2.len() || theta1.len() != curvature.len() {
        return Err(Error::dim("NQM vectors differ in length"));
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for ((a, b), k) in theta1.iter().zip(theta2).zip(curvature) {
        let dk = (b - a) * k;
        s1 += dk * a;
        s2 += dk * b;
    }
    Ok((s1, s2))
}

/// Both endpoint derivatives non-positive (up to the boundary tolerance).
pub fn monotone_exact(theta1: &[f64], theta2: &[f64], curvature: &[f64]) -> Result<bool> {
    let (s1, s2) = endpoint_statistics(theta1, theta2, curvature)?;
    Ok(s1 <= BOUNDARY_TOLERANCE && s2 <= BOUNDARY_TOLERANCE)
}

/// Loss sampled at `points` evenly spaced α, evaluated from `θ_α` directly.
pub fn grid_losses(theta1: &[f64], theta2: &[f64], curvature: &[f64], points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::config("grid needs at least two points"));
    }
    if theta1.len() != theta2.len() || theta1.len() != curvature.len() {
        return Err(Error::dim("NQM vectors differ in length"));
    }
    let last = (points - 1) as f64;
    Ok((0..points)
        .map(|i| {
            let a = i as f64 / last;
            0.5 * theta1
                .iter()
                .zip(theta2)
                .zip(curvature)
                .map(|((x, y), k)| {
                    let t = (1.0 - a) * x + a * y;
                    k * t * t
                })
                .sum::<f64>()
        })
        .collect())
}

pub fn grid_monotone(theta1: &[f64], theta2: &[f64], curvature: &[f64], points: usize) -> Result<bool> {
    Ok(grid_losses(theta1, theta2, curvature, points)?.windows(2).all(|w| w[1] <= w[0]))
}

/// Trials a grid of this resolution cannot resolve: an endpoint derivative
/// sits in the tolerance band, or a positive one is too small to produce a
/// rise within the outermost grid cell.
pub fn is_grid_boundary(theta1: &[f64], theta2: &[f64], curvature: &[f64], points: usize) -> Result<bool> {
    let (s1, s2) = endpoint_statistics(theta1, theta2, curvature)?;
    let q: f64 = theta1.iter().zip(theta2).zip(curvature).map(|((a, b), k)| k * (b - a) * (b - a)).sum();
    let half_cell = 0.5 * q / (points - 1) as f64;
    let blind = |s: f64| s.abs() <= BOUNDARY_TOLERANCE || (s > 0.0 && s <= half_cell);
    // The last cell's loss change can drown in rounding of the losses themselves.
    let scale = quadratic_loss(theta1, curvature).max(quadratic_loss(theta2, curvature));
    let rounding = 1e-12 * scale * (points - 1) as f64;
    Ok(blind(s2) || s1.abs() <= BOUNDARY_TOLERANCE || (s2 - half_cell).abs() <= rounding)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

impl Histogram {
    pub fn from_values(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() || bins == 0 {
            return Err(Error::config("histogram needs values and at least one bin"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for v in values {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Ok(Histogram { edges, counts, mean, std })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    pub stat1: f64,
    pub stat2: f64,
    pub monotone: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MliRate {
    pub rate: f64,
    pub diverged: usize,
    pub outcomes: Vec<TrialOutcome>,
    /// Distribution of `(θ₂−θ₁)ᵀKθ₂`.
    pub histogram: Histogram,
}

pub const DEFAULT_BINS: usize = 50;

/// Fraction of trials whose interpolation is monotone; diverged trials count as
/// non-monotone.
pub fn monte_carlo_mli_rate(cfg: &NqmConfig, bins: usize) -> Result<MliRate> {
    if cfg.trials == 0 {
        return Err(Error::config("need at least one trial"));
    }
    let trials = simulate(cfg)?;
    let outcomes: Vec<TrialOutcome> = trials
        .par_iter()
        .map(|t| {
            let (stat1, stat2) = endpoint_statistics(&t.theta0, &t.theta_t, &cfg.curvature)?;
            let monotone = !t.diverged && stat1 <= BOUNDARY_TOLERANCE && stat2 <= BOUNDARY_TOLERANCE;
            Ok(TrialOutcome { stat1, stat2, monotone })
        })
        .collect::<Result<_>>()?;
    let diverged = trials.iter().filter(|t| t.diverged).count();
    let finite: Vec<f64> = outcomes.iter().map(|o| o.stat2).filter(|s| s.is_finite()).collect();
    let histogram = if finite.is_empty() {
        Histogram { edges: vec![], counts: vec![], mean: f64::NAN, std: f64::NAN }
    } else {
        Histogram::from_values(&finite, bins)?
    };
    let rate = outcomes.iter().filter(|o| o.monotone).count() as f64 / outcomes.len() as f64;
    Ok(MliRate { rate, diverged, outcomes, histogram })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAgreement {
    pub trials: usize,
    pub boundary: usize,
    /// Disagreements among non-boundary trials.
    pub disagreements: usize,
    /// Disagreements among all trials, boundary ones included.
    pub raw_disagreements: usize,
}

/// Compares the endpoint criterion with a dense grid evaluation on each trial.
pub fn grid_agreement(cfg: &NqmConfig, trials: &[NqmTrial], points: usize) -> Result<GridAgreement> {
    let k = &cfg.curvature;
    let rows: Vec<(bool, bool)> = trials
        .par_iter()
        .map(|t| {
            let exact = monotone_exact(&t.theta0, &t.theta_t, k)?;
            let grid = grid_monotone(&t.theta0, &t.theta_t, k, points)?;
            Ok((exact == grid, is_grid_boundary(&t.theta0, &t.theta_t, k, points)?))
        })
        .collect::<Result<_>>()?;
    Ok(GridAgreement {
        trials: rows.len(),
        boundary: rows.iter().filter(|r| r.1).count(),
        disagreements: rows.iter().filter(|r| !r.0 && !r.1).count(),
        raw_disagreements: rows.iter().filter(|r| !r.0).count(),
    })
}

pub fn trials_csv(cfg: &NqmConfig, result: &MliRate) -> Result<Vec<u8>> {
    csv_bytes(
        &["trial", "lr", "d", "steps", "stat1", "stat2", "monotone"],
        result.outcomes.iter().enumerate().map(|(i, o)| {
            vec![
                i.to_string(),
                fmt_f64(cfg.lr),
                cfg.d().to_string(),
                cfg.steps.to_string(),
                fmt_f64(o.stat1),
                fmt_f64(o.stat2),
                (o.monotone as u8).to_string(),
            ]
        }),
    )
}

pub fn write_trials_csv(path: impl AsRef<Path>, cfg: &NqmConfig, result: &MliRate) -> Result<()> {
    write_atomic(path.as_ref(), &trials_csv(cfg, result)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_examples() {
        let k = [1.0];
        let (_, s2) = endpoint_statistics(&[1.0], &[-0.5], &k).unwrap();
        assert_eq!(s2, 0.75);
        assert!(!monotone_exact(&[1.0], &[-0.5], &k).unwrap());
        assert!(monotone_exact(&[1.0, -2.0], &[0.0, 0.0], &[1.0, 0.5]).unwrap());
    }

    #[test]
    fn zero_learning_rate_keeps_the_start() {
        for sampler in [Sampler::Iterate, Sampler::ExactLaw] {
            let cfg = NqmConfig::new(5, 0.0, 3, 2).with_steps(20).with_sampler(sampler);
            for t in simulate(&cfg).unwrap() {
                assert_eq!(t.theta0, t.theta_t);
            }
        }
    }

    #[test]
    fn noise_free_descent_decreases_the_loss_geometrically() {
        let mut cfg = NqmConfig::new(4, 0.5, 1, 0).without_noise().with_sampler(Sampler::Iterate);
        let k = cfg.curvature.clone();
        let mut prev = f64::INFINITY;
        for steps in 0..40 {
            cfg.steps = steps;
            let t = &simulate(&cfg).unwrap()[0];
            let l = quadratic_loss(&t.theta_t, &k);
            assert!(l < prev);
            prev = l;
        }
        cfg.steps = 2000;
        assert!(simulate(&cfg).unwrap()[0].theta_t.iter().all(|t| t.abs() < 1e-12));
        let r = monte_carlo_mli_rate(&cfg.clone().with_steps(50), 10).unwrap();
        assert_eq!(r.rate, 1.0);
    }

    #[test]
    fn exact_law_matches_the_iterates_in_distribution() {
        let base = NqmConfig::new(3, 0.2, 4000, 9).with_steps(30);
        let a = simulate(&base.clone().with_sampler(Sampler::Iterate)).unwrap();
        let b = simulate(&base.clone().with_sampler(Sampler::ExactLaw)).unwrap();
        for i in 0..3 {
            let var = |ts: &[NqmTrial]| ts.iter().map(|t| t.theta_t[i].powi(2)).sum::<f64>() / ts.len() as f64;
            let (va, vb) = (var(&a), var(&b));
            assert!((va - vb).abs() < 0.1 * va, "coordinate {i}: {va} vs {vb}");
        }
    }

    #[test]
    fn histogram_counts_every_value() {
        let h = Histogram::from_values(&[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(h.counts, vec![2, 2]);
        assert_eq!(h.mean, 1.5);
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = NqmConfig::new(6, 0.1, 5, 3).with_steps(12).with_sampler(Sampler::Iterate);
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
    }
}
