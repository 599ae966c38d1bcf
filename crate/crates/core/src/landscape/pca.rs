use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LogitTrajectory;

/// Top two principal directions of a point cloud and the projected points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    /// Covariance eigenvalues of the two components.
    pub eigenvalues: [f64; 2],
    /// Share of the total variance captured by each component.
    pub explained: [f64; 2],
    pub projected: Vec<(f64, f64)>,
}

/// Each component's largest-magnitude entry is made positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Pca2> {
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if n < 3 || d < 2 {
        return Err(Error::Degenerate("PCA needs at least 3 points in at least 2 dimensions".into()));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::dim("points differ in dimension"));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, x) in mean.iter_mut().zip(p) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(total > 0.0) || l2 <= 1e-12 * total {
        return Err(Error::Degenerate("stacked points have rank below 2".into()));
    }
    let component = |k: usize| -> Vec<f64> {
        let c: Vec<f64> = eig.eigenvectors.column(k).iter().cloned().collect();
        let big = c.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let s = if big < 0.0 { -1.0 } else { 1.0 };
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        c.into_iter().map(|x| s * x / norm).collect()
    };
    let components = [component(order[0]), component(order[1])];
    let projected = (0..n)
        .map(|i| {
            let r = centered.row(i);
            let dot = |c: &[f64]| r.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            (dot(&components[0]), dot(&components[1]))
        })
        .collect();
    Ok(Pca2 { mean, components, eigenvalues: [l1, l2], explained: [l1 / total, l2 / total], projected })
}

/// Projects every trajectory onto the top two principal directions of all
/// their points together; returns one 2D path per trajectory.
pub fn pca_logit_paths(trajectories: &[LogitTrajectory]) -> Result<(Pca2, Vec<Vec<(f64, f64)>>)> {
    if trajectories.len() < 2 {
        return Err(Error::config("need at least two trajectories"));
    }
    let alphas = &trajectories[0].alphas;
    if trajectories.iter().any(|t| &t.alphas != alphas) {
        return Err(Error::dim("trajectories use different α grids"));
    }
    let points: Vec<Vec<f64>> = trajectories.iter().flat_map(|t| t.points.iter().cloned()).collect();
    let pca = pca_2d(&points)?;
    let len = alphas.len();
    let paths = pca.projected.chunks(len).map(<[(f64, f64)]>::to_vec).collect();
    Ok((pca, paths))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::AlphaGrid;

    #[test]
    fn planar_points_are_fully_explained() {
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let (s, t) = ((i as f64).sin(), (i as f64 * 0.37).cos());
                vec![s + t, 2.0 * s - t, 0.5 * t, 1.0 + s]
            })
            .collect();
        let p = pca_2d(&pts).unwrap();
        assert!((p.explained[0] + p.explained[1] - 1.0).abs() < 1e-10);
        let c = &p.components;
        assert!(c[0].iter().zip(&c[1]).map(|(a, b)| a * b).sum::<f64>().abs() < 1e-10);
        for comp in c {
            let big = comp.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn straight_trajectories_stay_straight() {
        let grid = AlphaGrid::new(11).unwrap();
        let line = |id, a: [f64; 3], b: [f64; 3]| {
            let pts = grid.values().iter().map(|&t| (0..3).map(|k| a[k] + t * (b[k] - a[k])).collect()).collect();
            LogitTrajectory::from_points(id, &grid, pts).unwrap()
        };
        let trajs = vec![line(0, [0.0, 1.0, 2.0], [1.0, -1.0, 0.5]), line(1, [3.0, 0.0, 0.0], [0.0, 0.0, 1.0])];
        let (_, paths) = pca_logit_paths(&trajs).unwrap();
        for path in paths {
            let (p0, p1) = (path[0], path[path.len() - 1]);
            for q in &path {
                let cross = (p1.0 - p0.0) * (q.1 - p0.1) - (p1.1 - p0.1) * (q.0 - p0.0);
                assert!(cross.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn rank_one_cloud_is_rejected() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        assert!(pca_2d(&pts).is_err());
    }
}
