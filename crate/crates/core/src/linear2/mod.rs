//! Two-layer linear networks `f(x) = V W x`: the exact quadratic logit path,
//! the endpoint tangent condition, and gradient descent in the tabula-rasa regime.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, Schur};
use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{whitened_inputs, Dataset};
use crate::error::{Error, Result};
use crate::interp::{loss_curve, AlphaGrid, InterpOptions};
use crate::io::{csv_bytes, fmt_f64, write_atomic};
use crate::nn::{Activation, BatchNormState, Layout, LossKind, NetworkSpec, ParameterVector};
use crate::rng::seeded;

/// Real parts must exceed this times `‖M‖_F` to count as positive.
pub const EIGEN_TOLERANCE: f64 = 1e-10;

/// `W` is `k × d`, `V` is `m × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFactorPair {
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl LinearFactorPair {
    pub fn new(w: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if v.ncols() != w.nrows() {
            return Err(Error::dim(format!("V is {}x{}, W is {}x{}", v.nrows(), v.ncols(), w.nrows(), w.ncols())));
        }
        if w.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite factor entries".into()));
        }
        Ok(LinearFactorPair { w, v })
    }

    pub fn product(&self) -> DMatrix<f64> {
        &self.v * &self.w
    }

    /// `max |V − Wᵀ|`.
    pub fn balance_error(&self) -> f64 {
        if self.v.shape() != (self.w.ncols(), self.w.nrows()) {
            return f64::INFINITY;
        }
        (&self.v - self.w.transpose()).amax()
    }

    fn check_same_shape(&self, other: &LinearFactorPair) -> Result<()> {
        if self.w.shape() != other.w.shape() || self.v.shape() != other.v.shape() {
            return Err(Error::dim("factor pairs have different shapes"));
        }
        Ok(())
    }
}

/// `z(α) = C₀ + αC₁ + α²C₂`, one column per example.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticPath {
    pub constant: DMatrix<f64>,
    pub linear: DMatrix<f64>,
    pub quadratic: DMatrix<f64>,
}

impl QuadraticPath {
    pub fn at(&self, alpha: f64) -> DMatrix<f64> {
        &self.constant + &self.linear * alpha + &self.quadratic * (alpha * alpha)
    }

    pub fn tangent(&self, alpha: f64) -> DMatrix<f64> {
        &self.linear + &self.quadratic * (2.0 * alpha)
    }
}

/// Exact coefficients of `(V₀ + αD₁)(W₀ + αD₂)X` with `D₁ = V_T − V₀`, `D₂ = W_T − W₀`;
/// `x` holds one example per column.
pub fn logit_path_linear2(init: &LinearFactorPair, fin: &LinearFactorPair, x: &DMatrix<f64>) -> Result<QuadraticPath> {
    init.check_same_shape(fin)?;
    if x.nrows() != init.w.ncols() {
        return Err(Error::dim(format!("X has {} rows, W expects {}", x.nrows(), init.w.ncols())));
    }
    let d1 = &fin.v - &init.v;
    let d2 = &fin.w - &init.w;
    Ok(QuadraticPath {
        constant: &init.v * &init.w * x,
        linear: (&d1 * &init.w + &init.v * &d2) * x,
        quadratic: &d1 * &d2 * x,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointConditionReport {
    /// `⟨z'(0), z'(1)⟩` summed over examples.
    pub inner_product: f64,
    /// Same quantity as `Σ_j x_jᵀ M x_j`.
    pub inner_product_kron: f64,
    pub eigenvalues: Vec<(f64, f64)>,
    pub min_real_eigenvalue: f64,
    pub max_abs_imaginary: f64,
    /// Every eigenvalue of `M` has real part above tolerance.
    pub condition_holds: bool,
    /// The symmetric part of `M` is positive definite.
    pub symmetric_part_pd: bool,
    /// Zero tangents or `M = 0`.
    pub degenerate: bool,
    pub min_delta: f64,
    pub mli_holds_empirically: bool,
}

impl EndpointConditionReport {
    pub fn kron_gap(&self) -> f64 {
        (self.inner_product - self.inner_product_kron).abs()
    }

    /// Gap relative to the larger of the two values (0 when both vanish).
    pub fn kron_relative_gap(&self) -> f64 {
        let scale = self.inner_product.abs().max(self.inner_product_kron.abs());
        if scale == 0.0 {
            0.0
        } else {
            self.kron_gap() / scale
        }
    }
}

/// `M = (D₁W₀ + V₀D₂)ᵀ(D₁W_T + V_TD₂)`, a `d × d` matrix.
pub fn tangent_matrix(init: &LinearFactorPair, fin: &LinearFactorPair) -> Result<DMatrix<f64>> {
    init.check_same_shape(fin)?;
    let d1 = &fin.v - &init.v;
    let d2 = &fin.w - &init.w;
    let a = &d1 * &init.w + &init.v * &d2;
    let b = &d1 * &fin.w + &fin.v * &d2;
    Ok(a.transpose() * b)
}

/// The identity-activation network computing `V W x` (zero biases).
pub fn equivalent_network(pair: &LinearFactorPair) -> Result<(NetworkSpec, ParameterVector)> {
    let (k, d, m) = (pair.w.nrows(), pair.w.ncols(), pair.v.nrows());
    let spec = NetworkSpec::new(vec![d, k, m], Activation::Identity, LossKind::Mse);
    let layout = Arc::new(Layout::for_spec(&spec));
    let mut theta = ParameterVector::zeros(layout);
    // nalgebra is column-major; layouts are row-major.
    theta.slice_mut("layer0.weight").unwrap().copy_from_slice(pair.w.transpose().as_slice());
    theta.slice_mut("layer1.weight").unwrap().copy_from_slice(pair.v.transpose().as_slice());
    Ok((spec, theta))
}

fn to_rows(x: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((x.ncols(), x.nrows()), |(i, j)| x[(j, i)])
}

/// Evaluates the endpoint condition and the actual interpolation loss.
///
/// `y` (one target per column) defaults to the final network's outputs.
pub fn endpoint_condition(
    init: &LinearFactorPair,
    fin: &LinearFactorPair,
    x: &DMatrix<f64>,
    y: Option<&DMatrix<f64>>,
) -> Result<EndpointConditionReport> {
    let path = logit_path_linear2(init, fin, x)?;
    let t0 = path.tangent(0.0);
    let t1 = path.tangent(1.0);
    let inner_product = t0.dot(&t1);
    let m = tangent_matrix(init, fin)?;
    let inner_product_kron: f64 = x.column_iter().map(|c| (c.transpose() * &m * c)[(0, 0)]).sum();

    let scale = m.norm();
    let degenerate = scale == 0.0 || t0.norm() == 0.0 || t1.norm() == 0.0;
    let tol = EIGEN_TOLERANCE * scale;
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Eigen("Schur iteration did not converge".into()))?;
    let eig: Vec<(f64, f64)> = schur.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect();
    let min_real_eigenvalue = eig.iter().fold(f64::INFINITY, |a, e| a.min(e.0));
    let max_abs_imaginary = eig.iter().fold(0.0f64, |a, e| a.max(e.1.abs()));
    let sym = (&m + m.transpose()) * 0.5;
    let sym_min = sym.symmetric_eigenvalues().min();

    let target = match y {
        Some(y) => y.clone(),
        None => fin.product() * x,
    };
    let data = Dataset::regression(to_rows(x), to_rows(&target), "linear2 endpoint check")?;
    let (spec, th0) = equivalent_network(init)?;
    let (_, tht) = equivalent_network(fin)?;
    let report = loss_curve(
        &spec,
        &th0,
        &tht,
        &BatchNormState::new(&spec),
        &data,
        None,
        &AlphaGrid::default(),
        &InterpOptions::default(),
    )?;
    let min_delta = report.min_delta.unwrap_or(f64::NAN);
    Ok(EndpointConditionReport {
        inner_product,
        inner_product_kron,
        eigenvalues: eig,
        min_real_eigenvalue,
        max_abs_imaginary,
        condition_holds: !degenerate && min_real_eigenvalue > tol,
        symmetric_part_pd: !degenerate && sym_min > tol,
        degenerate,
        min_delta,
        mli_holds_empirically: min_delta == 0.0,
    })
}

/// How the factors are initialized for tabula-rasa training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Linear2Init {
    /// Balanced and aligned with the teacher's eigenvectors:
    /// `W₀ = Q_{:, :d} √a₀ Uᵀ`, `V₀ = W₀ᵀ`.
    Aligned { scale: f64 },
    /// `W₀` Gaussian with standard deviation `scale`, `V₀ = W₀ᵀ`.
    RandomBalanced { scale: f64 },
    /// Independent Gaussian factors.
    Unbalanced { scale: f64 },
}

/// A whitened regression problem with a symmetric positive-definite teacher.
#[derive(Clone, Debug)]
pub struct TabulaRasaProblem {
    /// `d × n`, with `X Xᵀ = n I`.
    pub x: DMatrix<f64>,
    /// `d × n`, `Y = A X`.
    pub y: DMatrix<f64>,
    /// Teacher `A = U diag(s) Uᵀ`.
    pub teacher: DMatrix<f64>,
    pub teacher_basis: DMatrix<f64>,
    pub teacher_spectrum: Vec<f64>,
}

pub fn tabula_rasa_problem(n: usize, d: usize, seed: u64) -> Result<TabulaRasaProblem> {
    let mut rng = seeded(seed, 5);
    let xr = whitened_inputs(n, d, &mut rng)?;
    let x = DMatrix::from_fn(d, n, |i, j| xr[[j, i]]);
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    let u = g.qr().q();
    let spread = Uniform::new(0.5, 2.0).unwrap();
    let s: Vec<f64> = (0..d).map(|_| spread.sample(&mut rng)).collect();
    let teacher = &u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s.clone())) * u.transpose();
    let y = &teacher * &x;
    Ok(TabulaRasaProblem { x, y, teacher, teacher_basis: u, teacher_spectrum: s })
}

pub fn init_factors(problem: &TabulaRasaProblem, k: usize, init: Linear2Init, seed: u64) -> Result<LinearFactorPair> {
    let d = problem.x.nrows();
    if k < d {
        return Err(Error::config(format!("hidden width {k} below input width {d}")));
    }
    let mut rng = seeded(seed, 6);
    let mut gauss = |r: usize, c: usize, s: f64| DMatrix::<f64>::from_fn(r, c, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        s * z
    });
    let w = match init {
        Linear2Init::Aligned { scale } => {
            let q = gauss(k, k, 1.0).qr().q();
            q.columns(0, d) * scale.sqrt() * problem.teacher_basis.transpose()
        }
        Linear2Init::RandomBalanced { scale } | Linear2Init::Unbalanced { scale } => gauss(k, d, scale),
    };
    let v = match init {
        Linear2Init::Unbalanced { scale } => gauss(d, k, scale),
        _ => w.transpose(),
    };
    LinearFactorPair::new(w, v)
}

#[derive(Clone, Debug)]
pub struct TabulaRasaResult {
    pub init: LinearFactorPair,
    pub fin: LinearFactorPair,
    pub learning_rate: f64,
    pub steps: usize,
    pub final_loss: f64,
    /// Largest `max |V − Wᵀ|` seen during training.
    pub max_balance_error: f64,
    pub report: EndpointConditionReport,
}

/// `0.01 / σ_max((1/n) Y Xᵀ)`.
pub fn default_learning_rate(problem: &TabulaRasaProblem) -> f64 {
    let n = problem.x.ncols() as f64;
    let syx = &problem.y * problem.x.transpose() / n;
    0.01 / syx.singular_values().max()
}

fn mse(pair: &LinearFactorPair, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let e = pair.product() * x - y;
    e.norm_squared() / (2.0 * x.ncols() as f64)
}

/// Full-batch gradient descent on `(1/2n)‖VWX − Y‖²`, stopping early once the
/// loss falls below `tol`.
pub fn tabula_rasa_train(
    problem: &TabulaRasaProblem,
    init: LinearFactorPair,
    lr: f64,
    max_steps: usize,
    tol: f64,
) -> Result<TabulaRasaResult> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::config("learning rate must be finite and non-negative"));
    }
    let (x, y) = (&problem.x, &problem.y);
    let n = x.ncols() as f64;
    let mut cur = init.clone();
    let mut max_balance_error = cur.balance_error();
    let mut steps = 0;
    while steps < max_steps && lr > 0.0 {
        let wx = &cur.w * x;
        let e = &cur.v * &wx - y;
        let loss = e.norm_squared() / (2.0 * n);
        if !loss.is_finite() || loss > 1e6 {
            return Err(Error::Diverged { step: steps, loss });
        }
        if loss < tol {
            break;
        }
        let gv = &e * wx.transpose() / n;
        let gw = cur.v.transpose() * &e * x.transpose() / n;
        cur.v -= gv * lr;
        cur.w -= gw * lr;
        steps += 1;
        max_balance_error = max_balance_error.max(cur.balance_error());
    }
    let report = endpoint_condition(&init, &cur, x, Some(y))?;
    Ok(TabulaRasaResult {
        final_loss: mse(&cur, x, y),
        init,
        fin: cur,
        learning_rate: lr,
        steps,
        max_balance_error,
        report,
    })
}

/// `instances` independent problems with `d ∈ 2..=5`, `d ≤ k ≤ d + 2`,
/// each trained from `init` at the default learning rate.
pub fn tabula_rasa_suite(instances: usize, n: usize, init: Linear2Init, steps: usize, seed: u64) -> Result<Vec<TabulaRasaResult>> {
    (0..instances)
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            let d = 2 + i % 4;
            let problem = tabula_rasa_problem(n, d, s)?;
            let factors = init_factors(&problem, d + i % 3, init, s)?;
            tabula_rasa_train(&problem, factors, default_learning_rate(&problem), steps, 0.0)
        })
        .collect()
}

/// One row per instance: id, inner product, smallest real eigenvalue part,
/// condition flag, min-Δ and whether the initialization was balanced.
pub fn instances_csv(rows: &[(usize, &EndpointConditionReport, bool)]) -> Result<Vec<u8>> {
    csv_bytes(
        &["instance", "inner_product", "min_real_eigenvalue", "condition_holds", "min_delta", "balanced"],
        rows.iter().map(|(id, r, bal)| {
            vec![
                id.to_string(),
                fmt_f64(r.inner_product),
                fmt_f64(r.min_real_eigenvalue),
                (r.condition_holds as u8).to_string(),
                fmt_f64(r.min_delta),
                (*bal as u8).to_string(),
            ]
        }),
    )
}

pub fn write_instances_csv(path: impl AsRef<Path>, rows: &[(usize, &EndpointConditionReport, bool)]) -> Result<()> {
    write_atomic(path.as_ref(), &instances_csv(rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64, w: f64) -> LinearFactorPair {
        LinearFactorPair::new(DMatrix::from_element(1, 1, w), DMatrix::from_element(1, 1, v)).unwrap()
    }

    #[test]
    fn unchanged_factors_give_a_constant_path() {
        let p = scalar(0.7, -1.2);
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]);
        let path = logit_path_linear2(&p, &p, &x).unwrap();
        assert_eq!(path.linear.norm(), 0.0);
        assert_eq!(path.quadratic.norm(), 0.0);
        let r = endpoint_condition(&p, &p, &x, None).unwrap();
        assert!(r.degenerate && !r.condition_holds);
        assert_eq!(r.inner_product, 0.0);
    }

    #[test]
    fn sign_flip_instance_fails_the_condition_and_is_not_monotone() {
        let (a, b) = (scalar(1.0, 1.0), scalar(-1.0, -1.0));
        let m = tangent_matrix(&a, &b).unwrap();
        assert_eq!(m[(0, 0)], -16.0);
        let x = DMatrix::from_row_slice(1, 4, &[1.0, -0.5, 2.0, 0.3]);
        let r = endpoint_condition(&a, &b, &x, Some(&x)).unwrap();
        assert!(!r.condition_holds);
        assert!(r.min_delta > 0.0);
        // Path product is (1 − 2α)², so the loss is ½(1 − (1 − 2α)²)²·mean(x²).
        let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / 4.0;
        let peak = AlphaGrid::default()
            .values()
            .iter()
            .map(|a| 0.5 * (1.0 - (1.0 - 2.0 * a).powi(2)).powi(2) * mean_sq)
            .fold(0.0, f64::max);
        assert!((r.min_delta - peak).abs() < 1e-12, "{} vs {peak}", r.min_delta);
    }

    #[test]
    fn aligned_init_is_balanced() {
        let prob = tabula_rasa_problem(12, 3, 0).unwrap();
        let p = init_factors(&prob, 5, Linear2Init::Aligned { scale: 1e-2 }, 0).unwrap();
        assert_eq!(p.balance_error(), 0.0);
        let xxt = &prob.x * prob.x.transpose() / 12.0;
        assert!((xxt - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_returns_the_initialization() {
        let prob = tabula_rasa_problem(10, 2, 1).unwrap();
        let p = init_factors(&prob, 3, Linear2Init::Aligned { scale: 0.1 }, 1).unwrap();
        let r = tabula_rasa_train(&prob, p.clone(), 0.0, 100, 0.0).unwrap();
        assert_eq!(r.fin, p);
        assert!(r.report.degenerate);
    }
}
