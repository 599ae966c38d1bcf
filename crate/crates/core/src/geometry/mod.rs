//! Function-space geometry of interpolation paths: logit trajectories,
//! discrete Gauss length, weight distances and log-log fits.

mod theorem;

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use theorem::{
    perturbed_line, spiral_witness, verify_small_gauss_theorem, Curve, CurveSample, SpiralWitness, TheoremReport,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interp::{bn_state_for, theta_at, AlphaGrid, InterpOptions};
use crate::io::{csv_bytes, fmt_f64, write_atomic};
use crate::nn::{forward, BatchNormState, BnMode, NetworkSpec, ParameterVector};
use crate::rng::seeded;

pub const DEFAULT_FINE_STEPS: usize = 1024;

/// Relative tangent-norm tolerance: tangents shorter than this times the
/// longest tangent are skipped.
pub const TANGENT_TOLERANCE: f64 = 1e-12;

/// `(‖θ_T − θ₀‖, ‖θ_T − θ₀‖ / ‖θ₀‖)`; the ratio is `None` when `θ₀ = 0`.
pub fn weight_distance(theta0: &ParameterVector, theta_t: &ParameterVector) -> Result<(f64, Option<f64>)> {
    let d = theta_t.sub(theta0)?.norm();
    let n0 = theta0.norm();
    Ok((d, (n0 > 0.0).then(|| d / n0)))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Angle between two unit vectors, accurate near 0 and π.
fn unit_angle(a: &[f64], b: &[f64]) -> f64 {
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussLength {
    /// Total turning of the normalized tangents.
    pub value: f64,
    /// Tangents skipped for being shorter than the tolerance.
    pub skipped: usize,
    /// Largest angle between consecutive kept tangents.
    pub max_step_angle: f64,
}

impl GaussLength {
    /// Consecutive tangents turn by less than a right angle, so sphere and
    /// projective angles agree.
    pub fn grid_is_fine(&self) -> bool {
        self.max_step_angle < FRAC_PI_2
    }
}

/// Unit tangents above the tolerance, with their indices.
fn kept_units(tangents: &[Vec<f64>]) -> Result<Vec<(usize, Vec<f64>)>> {
    let norms: Vec<f64> = tangents.iter().map(|t| norm(t)).collect();
    if norms.iter().any(|n| !n.is_finite()) {
        return Err(Error::Degenerate("non-finite tangent".into()));
    }
    let tau = TANGENT_TOLERANCE * norms.iter().fold(0.0f64, |m, &n| m.max(n));
    let units: Vec<(usize, Vec<f64>)> = tangents
        .iter()
        .zip(&norms)
        .enumerate()
        .filter(|(_, (_, &n))| n > tau)
        .map(|(i, (t, &n))| (i, t.iter().map(|v| v / n).collect()))
        .collect();
    if units.len() < 2 {
        return Err(Error::Degenerate(format!(
            "{} of {} tangents below tolerance",
            tangents.len() - units.len(),
            tangents.len()
        )));
    }
    Ok(units)
}

/// Sum of angles between consecutive normalized tangents.
pub fn gauss_length(tangents: &[Vec<f64>]) -> Result<GaussLength> {
    if tangents.len() < 2 {
        return Err(Error::config("gauss length needs at least 2 tangents"));
    }
    let units = kept_units(tangents)?;
    let angles: Vec<f64> = units.windows(2).map(|w| unit_angle(&w[0].1, &w[1].1)).collect();
    Ok(GaussLength {
        value: angles.iter().sum(),
        skipped: tangents.len() - units.len(),
        max_step_angle: angles.iter().fold(0.0, |m, &a| m.max(a)),
    })
}

/// Gauss length of a uniformly sampled curve from its chords.
///
/// Chord `i` points along the tangent at the middle of cell `i`, so chord
/// turning misses half a cell at each end; that is added back from the end
/// angles. Angles within the rounding error of the difference quotients
/// count as zero.
pub fn curve_gauss_length(points: &[Vec<f64>], spacing: f64) -> Result<GaussLength> {
    if points.len() < 3 {
        return Err(Error::config("gauss length needs at least 3 points"));
    }
    let tangents = chords(points, spacing);
    let units = kept_units(&tangents)?;
    let noise: Vec<f64> = (0..tangents.len())
        .map(|i| {
            let span = norm(&points[i]) + norm(&points[i + 1]);
            4.0 * f64::EPSILON * span / (norm(&tangents[i]) * spacing)
        })
        .collect();
    let angles: Vec<f64> = units
        .windows(2)
        .map(|w| {
            let a = unit_angle(&w[0].1, &w[1].1);
            if a <= noise[w[0].0] + noise[w[1].0] {
                0.0
            } else {
                a
            }
        })
        .collect();
    let ends = 0.5 * (angles[0] + angles[angles.len() - 1]);
    Ok(GaussLength {
        value: angles.iter().sum::<f64>() + ends,
        skipped: tangents.len() - units.len(),
        max_step_angle: angles.iter().fold(0.0, |m, &a| m.max(a)),
    })
}

/// Forward chords `(z_{i+1} − z_i)/Δα`.
pub fn chords(points: &[Vec<f64>], spacing: f64) -> Vec<Vec<f64>> {
    points
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| (b - a) / spacing).collect())
        .collect()
}

/// Network outputs for one example along an interpolation path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitTrajectory {
    pub example_id: usize,
    pub alphas: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    /// Forward chords, one per grid cell.
    pub tangents: Vec<Vec<f64>>,
    pub gauss: Option<GaussLength>,
    pub degenerate: bool,
}

impl LogitTrajectory {
    pub fn from_points(example_id: usize, grid: &AlphaGrid, points: Vec<Vec<f64>>) -> Result<Self> {
        let finite = points.iter().flatten().all(|v| v.is_finite());
        let gauss = if finite { curve_gauss_length(&points, grid.spacing()).ok() } else { None };
        let tangents = chords(&points, grid.spacing());
        Ok(LogitTrajectory {
            example_id,
            alphas: grid.values().to_vec(),
            points,
            tangents,
            degenerate: gauss.is_none(),
            gauss,
        })
    }

    pub fn gauss_length(&self) -> Option<f64> {
        self.gauss.map(|g| g.value)
    }
}

/// Outputs for every row of `x` at every grid point, as `[grid][row][k]`.
fn outputs_along(
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    theta_t: &ParameterVector,
    bn: &BatchNormState,
    warmup: Option<(&Dataset, &InterpOptions)>,
    x: ArrayView2<f64>,
    grid: &AlphaGrid,
) -> Result<Vec<Array2<f64>>> {
    grid.values()
        .par_iter()
        .map(|&a| {
            let theta = theta_at(theta0, theta_t, a)?;
            let state = match warmup {
                Some((train, opts)) => bn_state_for(spec, &theta, bn, train, opts),
                None => Ok(bn.clone()),
            };
            let out = state.and_then(|s| forward(spec, &theta, BnMode::Eval(&s), x));
            match out {
                Err(Error::Numeric(_)) => Ok(Array2::from_elem((x.nrows(), spec.output_dim()), f64::NAN)),
                other => other,
            }
        })
        .collect()
}

/// Logit trajectories for every row of `x` (ids are row indices unless `ids` is given).
#[allow(clippy::too_many_arguments)]
pub fn logit_trajectories(
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    theta_t: &ParameterVector,
    bn: &BatchNormState,
    warmup: Option<(&Dataset, &InterpOptions)>,
    x: ArrayView2<f64>,
    ids: Option<&[usize]>,
    grid: &AlphaGrid,
) -> Result<Vec<LogitTrajectory>> {
    if x.ncols() != spec.input_dim() {
        return Err(Error::dim(format!("inputs have {} features, network expects {}", x.ncols(), spec.input_dim())));
    }
    let outs = outputs_along(spec, theta0, theta_t, bn, warmup, x, grid)?;
    (0..x.nrows())
        .map(|r| {
            let points = outs.iter().map(|o| o.row(r).to_vec()).collect();
            LogitTrajectory::from_points(ids.map_or(r, |ids| ids[r]), grid, points)
        })
        .collect()
}

pub fn logit_trajectory(
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    theta_t: &ParameterVector,
    bn: &BatchNormState,
    x: &[f64],
    grid: &AlphaGrid,
) -> Result<LogitTrajectory> {
    let xm = ndarray::ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::dim(e.to_string()))?;
    Ok(logit_trajectories(spec, theta0, theta_t, bn, None, xm, None, grid)?.remove(0))
}

/// Tangents from central differences in parameter space,
/// `(f(θ_α + hΔθ) − f(θ_α − hΔθ)) / 2h` with `h` relative to `‖Δθ‖`.
pub fn directional_tangents(
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    theta_t: &ParameterVector,
    bn: &BatchNormState,
    x: &[f64],
    alphas: &[f64],
    h_rel: f64,
) -> Result<Vec<Vec<f64>>> {
    let delta = theta_t.sub(theta0)?;
    let h = h_rel / delta.norm();
    let xm = ndarray::ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::dim(e.to_string()))?;
    alphas
        .iter()
        .map(|&a| {
            let base = theta0.lerp(theta_t, a)?;
            let mut plus = base.clone();
            plus.axpy(h, &delta)?;
            let mut minus = base;
            minus.axpy(-h, &delta)?;
            let fp = forward(spec, &plus, BnMode::Eval(bn), xm)?;
            let fm = forward(spec, &minus, BnMode::Eval(bn), xm)?;
            Ok(((fp - fm) / (2.0 * h)).row(0).to_vec())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageGaussLength {
    pub mean: f64,
    pub used: usize,
    pub degenerate: usize,
    /// Trajectories whose grid stayed too coarse after refinement.
    pub coarse: usize,
    pub fine_steps: usize,
    pub per_example: Vec<(usize, Option<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussOptions {
    pub sample_size: usize,
    pub fine_steps: usize,
    pub seed: u64,
    /// Grid doublings tried when consecutive tangents turn by a right angle or more.
    pub max_refinements: usize,
    pub interp: InterpOptions,
}

impl Default for GaussOptions {
    fn default() -> Self {
        GaussOptions {
            sample_size: 100,
            fine_steps: DEFAULT_FINE_STEPS,
            seed: 0,
            max_refinements: 2,
            interp: InterpOptions::default(),
        }
    }
}

/// Mean Gauss length over a seeded sample of examples; degenerate
/// trajectories are excluded and counted.
pub fn average_gauss_length(
    spec: &NetworkSpec,
    theta0: &ParameterVector,
    theta_t: &ParameterVector,
    bn: &BatchNormState,
    data: &Dataset,
    options: &GaussOptions,
) -> Result<AverageGaussLength> {
    if options.sample_size == 0 || options.sample_size > data.len() {
        return Err(Error::config(format!("sample size {} must lie in [1, {}]", options.sample_size, data.len())));
    }
    let mut ids = index::sample(&mut seeded(options.seed, 3), data.len(), options.sample_size).into_vec();
    ids.sort_unstable();
    let x = data.inputs.select(Axis(0), &ids);
    let warm = options.interp.bn_warmup.then_some((data, &options.interp));
    let mut steps = options.fine_steps;
    let mut trajs = logit_trajectories(spec, theta0, theta_t, bn, warm, x.view(), Some(&ids), &AlphaGrid::new(steps)?)?;
    for _ in 0..options.max_refinements {
        let coarse: Vec<usize> = (0..trajs.len()).filter(|&i| trajs[i].gauss.is_some_and(|g| !g.grid_is_fine())).collect();
        if coarse.is_empty() {
            break;
        }
        steps = 2 * steps - 1;
        let grid = AlphaGrid::new(steps)?;
        let sub = x.select(Axis(0), &coarse);
        let sub_ids: Vec<usize> = coarse.iter().map(|&i| ids[i]).collect();
        let refined = logit_trajectories(spec, theta0, theta_t, bn, warm, sub.view(), Some(&sub_ids), &grid)?;
        for (i, t) in coarse.into_iter().zip(refined) {
            trajs[i] = t;
        }
    }
    let per_example: Vec<(usize, Option<f64>)> = trajs.iter().map(|t| (t.example_id, t.gauss_length())).collect();
    let vals: Vec<f64> = per_example.iter().filter_map(|p| p.1).collect();
    if vals.is_empty() {
        return Err(Error::Degenerate("every trajectory is degenerate".into()));
    }
    Ok(AverageGaussLength {
        mean: vals.iter().sum::<f64>() / vals.len() as f64,
        used: vals.len(),
        degenerate: per_example.len() - vals.len(),
        coarse: trajs.iter().filter(|t| t.gauss.is_some_and(|g| !g.grid_is_fine())).count(),
        fine_steps: options.fine_steps,
        per_example,
    })
}

pub fn trajectories_csv(trajs: &[LogitTrajectory]) -> Result<Vec<u8>> {
    let k = trajs.first().map_or(0, |t| t.points[0].len());
    let mut header = vec!["example_id".to_string(), "alpha".to_string()];
    header.extend((0..k).map(|j| format!("z{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = trajs.iter().flat_map(|t| {
        t.alphas.iter().zip(&t.points).map(move |(a, p)| {
            let mut row = vec![t.example_id.to_string(), fmt_f64(*a)];
            row.extend(p.iter().map(|v| fmt_f64(*v)));
            row
        })
    });
    csv_bytes(&header, rows)
}

pub fn summary_csv(trajs: &[LogitTrajectory]) -> Result<Vec<u8>> {
    let rows = trajs.iter().map(|t| {
        vec![
            t.example_id.to_string(),
            t.gauss_length().map(fmt_f64).unwrap_or_default(),
            (t.degenerate as u8).to_string(),
        ]
    });
    csv_bytes(&["example_id", "gauss_length", "degenerate"], rows)
}

pub fn write_trajectory_csvs(trajs: &[LogitTrajectory], points: impl AsRef<Path>, summary: impl AsRef<Path>) -> Result<()> {
    write_atomic(points.as_ref(), &trajectories_csv(trajs)?)?;
    write_atomic(summary.as_ref(), &summary_csv(trajs)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub used: usize,
    /// Pairs dropped for a non-positive or non-finite coordinate.
    pub excluded: usize,
    /// All `y` equal: slope 0 and R² reported as 0.
    pub flat: bool,
}

/// Least squares of `log y` on `log x`.
pub fn powerlaw_fit(pairs: &[(f64, f64)]) -> Result<PowerLawFit> {
    let logs: Vec<(f64, f64)> = pairs
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let excluded = pairs.len() - logs.len();
    let n = logs.len() as f64;
    if logs.len() < 3 {
        return Err(Error::config(format!("power-law fit needs 3 positive pairs, got {}", logs.len())));
    }
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let flat = syy == 0.0;
    let r_squared = if flat {
        0.0
    } else {
        let sse: f64 = logs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        1.0 - sse / syy
    };
    Ok(PowerLawFit { slope, intercept, r_squared, used: logs.len(), excluded, flat })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn arc(phi: f64, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let t = phi * i as f64 / (n - 1) as f64;
                vec![t.cos(), t.sin()]
            })
            .collect()
    }

    #[test]
    fn straight_lines_have_zero_gauss_length() {
        for d in [1, 2, 5, 40] {
            let dir: Vec<f64> = (0..d).map(|j| (j as f64 * 0.37 + 0.1).sin()).collect();
            let pts: Vec<Vec<f64>> = (0..1024)
                .map(|i| dir.iter().enumerate().map(|(j, v)| j as f64 + v * i as f64 / 1023.0).collect())
                .collect();
            let g = curve_gauss_length(&pts, 1.0 / 1023.0).unwrap();
            assert_eq!(g.value, 0.0, "d = {d}");
        }
    }

    #[test]
    fn arcs_turn_by_their_angle() {
        for phi in [PI / 4.0, PI / 2.0, PI, 2.0 * PI] {
            let g = curve_gauss_length(&arc(phi, 1024), 1.0 / 1023.0).unwrap();
            assert!((g.value - phi).abs() < 1e-3, "{phi}: {}", g.value);
            assert!(g.grid_is_fine());
        }
    }

    #[test]
    fn plain_chord_turning_misses_one_step() {
        let phi = PI;
        let g = gauss_length(&chords(&arc(phi, 1024), 1.0 / 1023.0)).unwrap();
        assert!((g.value - phi * 1022.0 / 1023.0).abs() < 1e-9, "{}", g.value);
    }

    #[test]
    fn identical_points_are_degenerate() {
        let pts = vec![vec![1.0, 2.0]; 10];
        assert!(curve_gauss_length(&pts, 0.1).is_err());
    }

    #[test]
    fn refinement_changes_arc_estimate_little() {
        let a = curve_gauss_length(&arc(1.3, 513), 1.0 / 512.0).unwrap().value;
        let b = curve_gauss_length(&arc(1.3, 1025), 1.0 / 1024.0).unwrap().value;
        assert!((a - b).abs() < 1e-3);
    }

    #[test]
    fn reparameterization_does_not_change_estimate() {
        let n = 1024;
        let phi = 2.5;
        let z = |s: f64| vec![(phi * s).cos(), (phi * s).sin(), s];
        let even: Vec<Vec<f64>> = (0..n).map(|i| z(i as f64 / (n - 1) as f64)).collect();
        let squared: Vec<Vec<f64>> = (0..n).map(|i| z((i as f64 / (n - 1) as f64).powi(2))).collect();
        let a = curve_gauss_length(&even, 1.0 / (n - 1) as f64).unwrap().value;
        let b = curve_gauss_length(&squared, 1.0 / (n - 1) as f64).unwrap().value;
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }

    #[test]
    fn powerlaw_examples() {
        let pairs: Vec<(f64, f64)> = (1..20).map(|i| (i as f64 * 0.7, 2.0 * (i as f64 * 0.7).powf(1.5))).collect();
        let f = powerlaw_fit(&pairs).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-10);
        assert!((f.r_squared - 1.0).abs() < 1e-10);
        assert!((f.intercept - 2f64.ln()).abs() < 1e-10);

        let flat = powerlaw_fit(&[(1.0, 3.0), (2.0, 3.0), (5.0, 3.0)]).unwrap();
        assert!(flat.flat && flat.slope == 0.0 && flat.r_squared == 0.0);

        let f = powerlaw_fit(&[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0), (-1.0, 2.0), (4.0, 0.0)]).unwrap();
        assert_eq!(f.excluded, 2);
        assert!(powerlaw_fit(&[(1.0, 1.0), (2.0, 2.0)]).is_err());
    }

    #[test]
    fn weight_distance_examples() {
        use crate::nn::Layout;
        use std::sync::Arc;
        let layout = Arc::new(Layout::from_shapes([("w", vec![3])]));
        let a = ParameterVector::new(vec![1.0, 2.0, 2.0], layout.clone()).unwrap();
        assert_eq!(weight_distance(&a, &a).unwrap(), (0.0, Some(0.0)));
        assert_eq!(weight_distance(&a, &a.scale(2.0)).unwrap(), (3.0, Some(1.0)));
        assert_eq!(weight_distance(&ParameterVector::zeros(layout), &a).unwrap().1, None);
    }
}
