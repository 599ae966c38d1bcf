//! Random-curve harness for the small-Gauss-length monotonicity theorem.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::curve_gauss_length;
use crate::error::{Error, Result};
use crate::interp::AlphaGrid;
use crate::rng::seeded;

/// A smooth curve on [0, 1] that ends at `z_star`.
#[derive(Clone, Debug, PartialEq)]
pub enum Curve {
    /// `z* + (1−α)(r₀ + Σ_j a_j sin(jπα) u_j)`.
    PerturbedLine { z_star: Vec<f64>, r0: Vec<f64>, terms: Vec<(f64, Vec<f64>)> },
    /// Planar spiral with radius `1−α` and angle `turns·2π·α` in the first two coordinates.
    Spiral { z_star: Vec<f64>, turns: f64 },
}

impl Curve {
    pub fn z_star(&self) -> &[f64] {
        match self {
            Curve::PerturbedLine { z_star, .. } | Curve::Spiral { z_star, .. } => z_star,
        }
    }

    pub fn at(&self, alpha: f64) -> Vec<f64> {
        match self {
            Curve::PerturbedLine { z_star, r0, terms } => {
                let mut off = r0.clone();
                for (j, (a, u)) in terms.iter().enumerate() {
                    let s = a * ((j + 1) as f64 * PI * alpha).sin();
                    for (o, uk) in off.iter_mut().zip(u) {
                        *o += s * uk;
                    }
                }
                z_star.iter().zip(&off).map(|(z, o)| z + (1.0 - alpha) * o).collect()
            }
            Curve::Spiral { z_star, turns } => {
                let (r, t) = (1.0 - alpha, 2.0 * PI * turns * alpha);
                let mut z = z_star.clone();
                z[0] += r * t.cos();
                z[1] += r * t.sin();
                z
            }
        }
    }

    pub fn sample(&self, grid: &AlphaGrid) -> Result<CurveSample> {
        let points: Vec<Vec<f64>> = grid.values().iter().map(|&a| self.at(a)).collect();
        let sq_dist: Vec<f64> = points
            .iter()
            .map(|p| p.iter().zip(self.z_star()).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let gl = curve_gauss_length(&points, grid.spacing())?;
        Ok(CurveSample {
            is_monotone: sq_dist.windows(2).all(|w| w[1] <= w[0]),
            gauss_length: gl.value,
            max_step_angle: gl.max_step_angle,
            sq_dist,
            points,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveSample {
    pub points: Vec<Vec<f64>>,
    /// `‖z(α_i) − z*‖²` on the grid.
    pub sq_dist: Vec<f64>,
    pub gauss_length: f64,
    pub max_step_angle: f64,
    pub is_monotone: bool,
}

fn unit(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random member of the perturbed-line family with 1–4 sine terms and a
/// log-uniform amplitude scale, so Gauss lengths range from near 0 to beyond 2π.
pub fn perturbed_line(d: usize, rng: &mut impl Rng) -> Curve {
    let z_star: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let r0 = unit(d, rng);
    let j_max = rng.random_range(1..=4);
    let scale = 10f64.powf(rng.random_range(-2.5..0.6));
    let terms = (0..j_max)
        .map(|_| {
            let a: f64 = StandardNormal.sample(rng);
            (scale * a, unit(d, rng))
        })
        .collect();
    Curve::PerturbedLine { z_star, r0, terms }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpiralWitness {
    pub gauss_length: f64,
    pub is_monotone: bool,
}

/// Radius `1−α`, angle `8πα`: distance to the target shrinks monotonically
/// while the tangent turns far more than a right angle.
pub fn spiral_witness(d: usize, grid: &AlphaGrid) -> Result<SpiralWitness> {
    if d < 2 {
        return Err(Error::config("the spiral needs at least 2 dimensions"));
    }
    let s = Curve::Spiral { z_star: vec![0.5; d], turns: 4.0 }.sample(grid)?;
    Ok(SpiralWitness { gauss_length: s.gauss_length, is_monotone: s.is_monotone })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub d: usize,
    pub threshold: f64,
    pub generated: usize,
    pub below_threshold: usize,
    pub below_threshold_monotone: usize,
    /// Gauss lengths of sub-threshold curves that were not monotone.
    pub violations: Vec<f64>,
    pub above_threshold: usize,
    pub above_threshold_non_monotone: usize,
    pub max_gauss_length: f64,
    pub spiral: SpiralWitness,
}

impl TheoremReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty() && self.spiral.is_monotone && self.spiral.gauss_length > FRAC_PI_2
    }
}

/// Draws curves until `n_curves` have Gauss length below `π/2 − gl_margin`
/// and checks each of those for monotone distance to its endpoint.
pub fn verify_small_gauss_theorem(n_curves: usize, d: usize, gl_margin: f64, seed: u64) -> Result<TheoremReport> {
    if n_curves == 0 || d == 0 {
        return Err(Error::config("need at least one curve of positive dimension"));
    }
    let grid = AlphaGrid::new(super::DEFAULT_FINE_STEPS)?;
    let threshold = FRAC_PI_2 - gl_margin;
    let mut rng = seeded(seed, 4);
    let mut r = TheoremReport {
        d,
        threshold,
        generated: 0,
        below_threshold: 0,
        below_threshold_monotone: 0,
        violations: Vec::new(),
        above_threshold: 0,
        above_threshold_non_monotone: 0,
        max_gauss_length: 0.0,
        spiral: spiral_witness(d.max(2), &grid)?,
    };
    let cap = 100 * n_curves;
    while r.below_threshold < n_curves {
        if r.generated >= cap {
            return Err(Error::Degenerate(format!("only {} sub-threshold curves in {cap} draws", r.below_threshold)));
        }
        let s = perturbed_line(d, &mut rng).sample(&grid)?;
        r.generated += 1;
        r.max_gauss_length = r.max_gauss_length.max(s.gauss_length);
        if s.gauss_length < threshold {
            r.below_threshold += 1;
            if s.is_monotone {
                r.below_threshold_monotone += 1;
            } else {
                r.violations.push(s.gauss_length);
            }
        } else {
            r.above_threshold += 1;
            r.above_threshold_non_monotone += usize::from(!s.is_monotone);
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_line_curve_is_monotone_with_zero_length() {
        let c = Curve::PerturbedLine { z_star: vec![1.0, -1.0, 2.0], r0: vec![0.0, 0.6, 0.8], terms: vec![] };
        let s = c.sample(&AlphaGrid::new(1024).unwrap()).unwrap();
        assert!(s.is_monotone);
        assert_eq!(s.gauss_length, 0.0);
        assert_eq!(s.points.last().unwrap(), &vec![1.0, -1.0, 2.0]);
    }

    #[test]
    fn spiral_is_monotone_and_turns_a_lot() {
        let w = spiral_witness(2, &AlphaGrid::new(1024).unwrap()).unwrap();
        assert!(w.is_monotone);
        assert!(w.gauss_length > FRAC_PI_2);
        assert!(w.gauss_length > 8.0 * PI * 0.9);
    }

    #[test]
    fn harness_finds_no_violations() {
        let r = verify_small_gauss_theorem(200, 3, 0.05, 1).unwrap();
        assert!(r.holds(), "{r:?}");
        assert_eq!(r.below_threshold, 200);
        // The family must also reach past the threshold, where violations can occur.
        assert!(r.above_threshold > 0 && r.max_gauss_length > PI);
    }
}
