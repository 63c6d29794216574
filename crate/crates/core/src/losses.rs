//! Training losses.
//!
//! The 3D regression loss measures, for every keypoint, the perpendicular
//! distance between its ground-truth camera-frame position and the camera ray
//! through the predicted pixel. Unlike a pixel-space loss it does not shrink
//! as the object moves away from the camera.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject_ray, project, transform_to_camera, CameraIntrinsics, Keypoint3D, Mat3, Point2D, Pose, Vec3};
use crate::grid::{Cell, PyramidPrediction, SegmentationMask};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    /// Smooth-L1 transition of the 3D loss, in model units.
    pub beta_3d: f64,
    /// Smooth-L1 transition of the pixel loss.
    pub beta_2d: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Apply smooth-L1 per component instead of on the error norm.
    pub componentwise: bool,
    pub reduction: Reduction,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams::for_diameter(1.0)
    }
}

impl LossParams {
    pub fn for_diameter(diameter: f64) -> Self {
        LossParams {
            beta_3d: 0.1 * diameter,
            beta_2d: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            componentwise: false,
            reduction: Reduction::Sum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_3d > 0.0 && self.beta_2d > 0.0) {
            return Err(Error::InvalidParameter("smooth-L1 beta must be positive".into()));
        }
        if !(self.focal_gamma >= 0.0) || !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::InvalidParameter(
                "focal loss needs gamma >= 0 and alpha in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Smoothed L1: quadratic below `beta`, linear above. Returns `(value, slope)`.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    let a = x.abs();
    if a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}

/// `V = v vᵀ / (vᵀ v)`, the orthogonal projector onto the line spanned by `v`.
pub fn ray_projection_matrix(v: &Vec3) -> Result<Mat3> {
    let n2 = v.norm_squared();
    if !(v.norm() > 1e-12) {
        return Err(Error::ZeroRay);
    }
    Ok(v * v.transpose() / n2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loss3DResult {
    pub value: f64,
    /// `(I − V̂_i) p_iᶜ` per keypoint.
    pub errors: Vec<Vec3>,
    /// `∂value / ∂û_i` per keypoint, in model units per pixel.
    pub gradient: Vec<[f64; 2]>,
}

/// Value and gradient of the smooth-L1 penalty applied to an error vector.
fn penalty<const N: usize>(e: &[f64; N], params_beta: f64, componentwise: bool) -> (f64, [f64; N]) {
    let mut grad = [0.0; N];
    if componentwise {
        let mut value = 0.0;
        for (g, &x) in grad.iter_mut().zip(e) {
            let (v, d) = smooth_l1(x, params_beta);
            value += v;
            *g = d;
        }
        return (value, grad);
    }
    let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (value, _) = smooth_l1(norm, params_beta);
    // d sl1(|e|)/de = e / beta in the quadratic zone, e / |e| beyond it
    let scale = if norm < params_beta { 1.0 / params_beta } else { 1.0 / norm };
    for (g, &x) in grad.iter_mut().zip(e) {
        *g = x * scale;
    }
    (value, grad)
}

pub fn loss3d(
    k: &CameraIntrinsics,
    gt_pose: &Pose,
    keypoints: &[Keypoint3D],
    predicted: &[Point2D],
    params: &LossParams,
) -> Result<Loss3DResult> {
    params.validate()?;
    if keypoints.len() != predicted.len() {
        return Err(Error::InvalidParameter(format!(
            "{} keypoints but {} predictions",
            keypoints.len(),
            predicted.len()
        )));
    }
    let scale = match params.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / keypoints.len().max(1) as f64,
    };
    let mut value = 0.0;
    let mut errors = Vec::with_capacity(keypoints.len());
    let mut gradient = Vec::with_capacity(keypoints.len());
    for (p, u) in keypoints.iter().zip(predicted) {
        let pc = transform_to_camera(gt_pose, p);
        if !(pc.z > crate::geometry::DEPTH_EPSILON) {
            return Err(Error::NonPositiveDepth { depth: pc.z });
        }
        let v = backproject_ray(k, u);
        let proj = ray_projection_matrix(&v)?;
        let e = pc - proj * pc;
        let (val, g) = penalty(&[e.x, e.y, e.z], params.beta_3d, params.componentwise);
        let g = Vec3::from(g);

        // e(v) = p − v (vᵀp)/(vᵀv)
        let a = v.dot(&pc);
        let b = v.norm_squared();
        let de_dv = -Mat3::identity() * (a / b) - v * pc.transpose() / b + v * v.transpose() * (2.0 * a / (b * b));
        let dl_dv = de_dv.transpose() * g;
        value += val;
        errors.push(e);
        gradient.push([scale * dl_dv.x / k.fx, scale * dl_dv.y / k.fy]);
    }
    Ok(Loss3DResult {
        value: scale * value,
        errors,
        gradient,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Loss2DResult {
    pub value: f64,
    /// `∂value / ∂û_i` per keypoint.
    pub gradient: Vec<[f64; 2]>,
}

/// Pixel-space baseline `Σ sl₁(‖u_i − û_i‖)`.
pub fn loss2d(gt: &[Point2D], predicted: &[Point2D], params: &LossParams) -> Result<Loss2DResult> {
    params.validate()?;
    if gt.len() != predicted.len() {
        return Err(Error::InvalidParameter(format!(
            "{} targets but {} predictions",
            gt.len(),
            predicted.len()
        )));
    }
    let scale = match params.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / gt.len().max(1) as f64,
    };
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(gt.len());
    for (t, p) in gt.iter().zip(predicted) {
        let (v, g) = penalty(&[p.u - t.u, p.v - t.v], params.beta_2d, params.componentwise);
        value += v;
        gradient.push([scale * g[0], scale * g[1]]);
    }
    Ok(Loss2DResult {
        value: scale * value,
        gradient,
    })
}

/// Binary focal loss `−α_t (1 − p_t)^γ ln p_t` and its derivative with respect
/// to the predicted probability.
pub fn focal_loss(pred: f64, target: bool, params: &LossParams) -> (f64, f64) {
    let p = pred.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
    let (alpha, gamma) = (params.focal_alpha, params.focal_gamma);
    if target {
        let q = 1.0 - p;
        let value = -alpha * q.powf(gamma) * p.ln();
        let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
        let grad = alpha * (dq * p.ln() - q.powf(gamma) / p);
        (value, grad)
    } else {
        let q = 1.0 - p;
        let value = -(1.0 - alpha) * p.powf(gamma) * q.ln();
        let dp = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
        let grad = -(1.0 - alpha) * (dp * q.ln() - p.powf(gamma) / q);
        (value, grad)
    }
}

/// Objectness and regression terms of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelTerms {
    pub objectness: f64,
    pub regression: f64,
}

/// Sum of both terms over all levels, accumulated in level order.
pub fn total_loss(levels: &[LevelTerms]) -> f64 {
    levels.iter().fold(0.0, |acc, t| acc + t.objectness + t.regression)
}

/// Evaluates the per-level terms of the training objective on one prediction.
///
/// Objectness is scored at every cell against mask membership; the 3D
/// regression loss only at `selected` cells (one list per level).
pub fn pyramid_training_terms(
    pred: &PyramidPrediction,
    mask: &SegmentationMask,
    selected: &[Vec<(usize, usize)>],
    k: &CameraIntrinsics,
    gt_pose: &Pose,
    keypoints: &[Keypoint3D],
    params: &LossParams,
) -> Result<Vec<LevelTerms>> {
    if mask.levels.len() != pred.levels.len() {
        return Err(Error::InvalidParameter("mask and prediction level counts differ".into()));
    }
    let mut out = Vec::with_capacity(pred.levels.len());
    for (level, (grid, lm)) in pred.levels.iter().zip(&mask.levels).enumerate() {
        if grid.rows != lm.rows || grid.cols != lm.cols {
            return Err(Error::InvalidParameter(format!("mask shape differs at level {}", level + 1)));
        }
        let objectness = grid
            .cells
            .iter()
            .zip(&lm.cells)
            .fold(0.0, |acc, (c, &inside)| acc + focal_loss(c.objectness, inside, params).0);
        let mut regression = 0.0;
        for &(row, col) in selected.get(level).map(Vec::as_slice).unwrap_or(&[]) {
            let decoded = pred.decode(Cell::new(level, row, col))?;
            regression += loss3d(k, gt_pose, keypoints, &decoded, params)?.value;
        }
        out.push(LevelTerms {
            objectness,
            regression,
        });
    }
    Ok(out)
}

/// Ground-truth pixel locations of `keypoints`, a convenience for the 2D loss.
pub fn gt_projections(k: &CameraIntrinsics, pose: &Pose, keypoints: &[Keypoint3D]) -> Result<Vec<Point2D>> {
    keypoints.iter().map(|p| project(k, pose, p)).collect()
}
