//! Point-to-point ICP.

use nalgebra::{Matrix3, SVD};
use serde::{Deserialize, Serialize};

use crate::data::ObjectModel;
use crate::geometry::{PointCloud, Pose, Vec3};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IcpError {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once the mean residual changes by less than this, meters.
    pub convergence_tol: f64,
    /// Pairs farther apart than this are dropped, meters.
    pub max_correspondence_dist: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            convergence_tol: 1e-7,
            max_correspondence_dist: 0.05,
        }
    }
}

/// Least-squares rigid transform taking `source[i]` onto `target[i]`.
pub fn best_rigid_align(source: &[Vec3], target: &[Vec3]) -> Result<Pose, IcpError> {
    if source.len() != target.len() {
        return Err(IcpError::DegenerateConfiguration(format!(
            "{} source vs {} target points",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(IcpError::DegenerateConfiguration(format!("{} pairs, need 3", source.len())));
    }
    let n = source.len() as f64;
    let cs = source.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let ct = target.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s - cs) * (t - ct).transpose();
    }
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    // collinear sets leave two singular values at zero
    let sv = svd.singular_values;
    let scale = sv.max().max(f64::MIN_POSITIVE);
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[1] <= 1e-12 * scale || sorted[0] == 0.0 {
        return Err(IcpError::DegenerateConfiguration("points are collinear or coincident".into()));
    }
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    let t = ct - r * cs;
    Ok(Pose::from_rotation_matrix(&r, t))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub pose: Pose,
    pub iterations: usize,
    /// Mean distance of accepted pairs after the last update, meters.
    pub residual: f64,
    /// Mean residual measured at the start of every iteration.
    pub history: Vec<f64>,
}

fn nearest(points: &[Vec3], q: &Vec3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, best.1.sqrt())
}

/// Refines `init` by aligning `model_points` to the observed cloud.
/// Each observed point is paired with its nearest posed model point.
pub fn icp_refine_points(
    observed: &PointCloud,
    model_points: &[Vec3],
    init: &Pose,
    cfg: &IcpConfig,
) -> Result<IcpResult, IcpError> {
    if observed.is_empty() || model_points.is_empty() {
        return Err(IcpError::EmptyCloud);
    }
    let mut pose = *init;
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < cfg.max_iterations {
        let posed: Vec<Vec3> = model_points.iter().map(|p| pose.apply(p)).collect();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut sum = 0.0;
        for o in &observed.points {
            let (j, d) = nearest(&posed, o);
            if d <= cfg.max_correspondence_dist {
                src.push(posed[j]);
                dst.push(*o);
                sum += d;
            }
        }
        if src.len() < 3 {
            return Err(IcpError::DegenerateConfiguration(format!(
                "{} correspondences within {} m",
                src.len(),
                cfg.max_correspondence_dist
            )));
        }
        residual = sum / src.len() as f64;
        history.push(residual);
        if (prev - residual).abs() < cfg.convergence_tol {
            break;
        }
        prev = residual;
        let step = best_rigid_align(&src, &dst)?;
        pose = step.compose(&pose);
        iterations += 1;
    }
    Ok(IcpResult {
        pose,
        iterations,
        residual,
        history,
    })
}

pub fn icp_refine(observed: &PointCloud, model: &ObjectModel, init: &Pose, cfg: &IcpConfig) -> Result<IcpResult, IcpError> {
    icp_refine_points(observed, &model.surface_points, init, cfg)
}
