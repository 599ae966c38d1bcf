//! Two-dimensional slices of weight space and low-dimensional views of logit paths.

mod pca;

pub use pca::{pca_2d, pca_logit_paths, Pca2};

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interp::{bn_state_for, InterpOptions};
use crate::io::{csv_bytes, fmt_f64, hash_f64s, write_atomic};
use crate::nn::{evaluate, BatchNormState, NetworkSpec, ParameterVector};
use crate::optim::Snapshot;

pub const DEFAULT_RESOLUTION: usize = 41;
pub const DEFAULT_MARGIN: f64 = 0.25;
/// Anchors whose offsets enclose a smaller angle are rejected.
pub const MIN_ANCHOR_ANGLE: f64 = 1e-6;

/// The affine plane `θ_a + u·e₁ + v·e₂` through three parameter vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub origin: ParameterVector,
    pub e1: ParameterVector,
    pub e2: ParameterVector,
    /// `(u, v)` of `θ_a`, `θ_b`, `θ_c`.
    pub anchor_coords: [(f64, f64); 3],
}

impl Plane {
    pub fn point(&self, u: f64, v: f64) -> Result<ParameterVector> {
        let mut p = self.origin.clone();
        p.axpy(u, &self.e1)?;
        p.axpy(v, &self.e2)?;
        Ok(p)
    }
}

fn angle_between(x: &ParameterVector, y: &ParameterVector) -> Result<f64> {
    let (nx, ny) = (x.norm(), y.norm());
    if nx == 0.0 || ny == 0.0 {
        return Ok(0.0);
    }
    let c = (x.dot(y)? / (nx * ny)).clamp(-1.0, 1.0);
    Ok(c.acos().min(std::f64::consts::PI - c.acos()))
}

/// `e₁` along `θ_b − θ_a`, `e₂` the normalized Gram-Schmidt residual of `θ_c − θ_a`.
pub fn plane_from_three(a: &ParameterVector, b: &ParameterVector, c: &ParameterVector) -> Result<Plane> {
    if !a.same_layout(b) || !a.same_layout(c) {
        return Err(Error::LayoutMismatch);
    }
    let db = b.sub(a)?;
    let dc = c.sub(a)?;
    let angle = angle_between(&db, &dc)?;
    if angle < MIN_ANCHOR_ANGLE {
        return Err(Error::Collinear { angle });
    }
    let ub = db.norm();
    let e1 = db.scale(1.0 / ub);
    let mut r = dc.clone();
    // Two passes keep e₂ orthogonal to working precision.
    for _ in 0..2 {
        let p = r.dot(&e1)?;
        r.axpy(-p, &e1)?;
    }
    let e2 = r.scale(1.0 / r.norm());
    let anchor_coords = [(0.0, 0.0), (ub, 0.0), (dc.dot(&e1)?, dc.dot(&e2)?)];
    Ok(Plane { origin: a.clone(), e1, e2, anchor_coords })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneOptions {
    pub resolution: usize,
    /// Fraction of the anchors' extent added on each side.
    pub margin: f64,
    pub interp: InterpOptions,
}

impl Default for PlaneOptions {
    fn default() -> Self {
        PlaneOptions { resolution: DEFAULT_RESOLUTION, margin: DEFAULT_MARGIN, interp: InterpOptions::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneGrid {
    pub us: Vec<f64>,
    pub vs: Vec<f64>,
    /// Row-major: `losses[iv * us.len() + iu]`.
    pub losses: Vec<f64>,
    pub nan_cells: Vec<usize>,
}

impl PlaneGrid {
    pub fn at(&self, iu: usize, iv: usize) -> f64 {
        self.losses[iv * self.us.len() + iu]
    }
}

fn axis(lo: f64, hi: f64, margin: f64, n: usize) -> Vec<f64> {
    let pad = margin * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Grid axes covering the anchors plus the margin.
pub fn plane_axes(plane: &Plane, options: &PlaneOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    if options.resolution == 0 {
        return Err(Error::config("plane resolution must be positive"));
    }
    if !(options.margin.is_finite() && options.margin >= 0.0) {
        return Err(Error::config("plane margin must be finite and non-negative"));
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let xs = plane.anchor_coords.iter().map(f);
        (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max))
    };
    let (u0, u1) = span(|p| p.0);
    let (v0, v1) = span(|p| p.1);
    Ok((
        axis(u0, u1, options.margin, options.resolution),
        axis(v0, v1, options.margin, options.resolution),
    ))
}

/// Evaluates `loss` on every cell; non-finite cells are kept and listed.
pub fn evaluate_plane_with<F>(plane: &Plane, options: &PlaneOptions, loss: F) -> Result<PlaneGrid>
where
    F: Fn(&ParameterVector) -> Result<f64> + Sync,
{
    let (us, vs) = plane_axes(plane, options)?;
    let coords: Vec<(f64, f64)> = vs.iter().flat_map(|&v| us.iter().map(move |&u| (u, v))).collect();
    let losses = evaluate_coords_with(plane, &coords, loss)?;
    let nan_cells = (0..losses.len()).filter(|&i| !losses[i].is_finite()).collect();
    Ok(PlaneGrid { us, vs, losses, nan_cells })
}

pub fn evaluate_coords_with<F>(plane: &Plane, coords: &[(f64, f64)], loss: F) -> Result<Vec<f64>>
where
    F: Fn(&ParameterVector) -> Result<f64> + Sync,
{
    coords
        .par_iter()
        .map(|&(u, v)| match loss(&plane.point(u, v)?) {
            Err(Error::Numeric(_)) => Ok(f64::NAN),
            other => other,
        })
        .collect()
}

fn network_loss<'a>(
    spec: &'a NetworkSpec,
    bn: &'a BatchNormState,
    data: &'a Dataset,
    interp: &'a InterpOptions,
) -> impl Fn(&ParameterVector) -> Result<f64> + Sync + 'a {
    move |theta| {
        let state = bn_state_for(spec, theta, bn, data, interp)?;
        Ok(evaluate(spec, theta, &state, data.inputs.view(), data.targets.view())?.loss)
    }
}

/// Whole-dataset loss over the plane grid, optionally re-warming batch-norm
/// statistics per cell.
pub fn evaluate_plane(
    spec: &NetworkSpec,
    plane: &Plane,
    bn: &BatchNormState,
    data: &Dataset,
    options: &PlaneOptions,
) -> Result<PlaneGrid> {
    evaluate_plane_with(plane, options, network_loss(spec, bn, data, &options.interp))
}

/// Network loss at arbitrary plane coordinates.
pub fn evaluate_coords(
    spec: &NetworkSpec,
    plane: &Plane,
    bn: &BatchNormState,
    data: &Dataset,
    coords: &[(f64, f64)],
    interp: &InterpOptions,
) -> Result<Vec<f64>> {
    evaluate_coords_with(plane, coords, network_loss(spec, bn, data, interp))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub step: usize,
    pub u: f64,
    pub v: f64,
    /// Norm of the component orthogonal to the plane.
    pub residual: f64,
}

pub fn project_point(plane: &Plane, theta: &ParameterVector) -> Result<(f64, f64, f64)> {
    let d = theta.sub(&plane.origin)?;
    let u = d.dot(&plane.e1)?;
    let v = d.dot(&plane.e2)?;
    let mut r = d;
    r.axpy(-u, &plane.e1)?;
    r.axpy(-v, &plane.e2)?;
    Ok((u, v, r.norm()))
}

pub fn project_trajectory(plane: &Plane, snapshots: &[Snapshot]) -> Result<Vec<ProjectedPoint>> {
    snapshots
        .iter()
        .map(|s| {
            let (u, v, residual) = project_point(plane, &s.params)?;
            Ok(ProjectedPoint { step: s.step, u, v, residual })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneMetadata {
    pub anchors: [String; 3],
    pub anchor_coords: [(f64, f64); 3],
    pub origin_hash: String,
    pub e1_hash: String,
    pub e2_hash: String,
    pub u_range: (f64, f64),
    pub v_range: (f64, f64),
    pub resolution: usize,
    pub margin: f64,
    pub bn_warmup: bool,
    pub nan_cells: Vec<usize>,
}

pub fn plane_metadata(plane: &Plane, grid: &PlaneGrid, options: &PlaneOptions, anchors: [String; 3]) -> PlaneMetadata {
    let range = |xs: &[f64]| (xs[0], xs[xs.len() - 1]);
    PlaneMetadata {
        anchors,
        anchor_coords: plane.anchor_coords,
        origin_hash: hash_f64s(plane.origin.values()),
        e1_hash: hash_f64s(plane.e1.values()),
        e2_hash: hash_f64s(plane.e2.values()),
        u_range: range(&grid.us),
        v_range: range(&grid.vs),
        resolution: options.resolution,
        margin: options.margin,
        bn_warmup: options.interp.bn_warmup,
        nan_cells: grid.nan_cells.clone(),
    }
}

/// Header `v, <u values…>`, then one row per `v`.
pub fn plane_csv(grid: &PlaneGrid) -> Result<Vec<u8>> {
    let header: Vec<String> = std::iter::once("v".to_string()).chain(grid.us.iter().map(|u| fmt_f64(*u))).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let n = grid.us.len();
    csv_bytes(
        &header,
        grid.vs.iter().enumerate().map(|(iv, v)| {
            std::iter::once(fmt_f64(*v)).chain(grid.losses[iv * n..(iv + 1) * n].iter().map(|l| fmt_f64(*l))).collect()
        }),
    )
}

pub fn trajectory_csv(points: &[ProjectedPoint]) -> Result<Vec<u8>> {
    csv_bytes(
        &["step", "u", "v", "residual"],
        points.iter().map(|p| vec![p.step.to_string(), fmt_f64(p.u), fmt_f64(p.v), fmt_f64(p.residual)]),
    )
}

pub fn write_plane(dir: impl AsRef<Path>, meta: &PlaneMetadata, grid: &PlaneGrid) -> Result<()> {
    let dir = dir.as_ref();
    write_atomic(&dir.join("plane.json"), serde_json::to_string_pretty(meta)?.as_bytes())?;
    write_atomic(&dir.join("plane_losses.csv"), &plane_csv(grid)?)
}
