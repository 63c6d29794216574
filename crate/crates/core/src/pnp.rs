//! Pose from 3D-to-2D correspondences.
//!
//! A normalized DLT gives the initial `[R|t]`, a damped Gauss-Newton loop
//! polishes it on the pixel reprojection error, and RANSAC wraps both for
//! correspondence sets that contain gross outliers.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, Matrix3x4, Matrix6, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Keypoint3D, Mat3, Point2D, Pose, Vec3, DEPTH_EPSILON};

/// Minimal sample used whenever six distinct correspondences are available.
pub const DLT_MIN_POINTS: usize = 6;
/// Ratio `σ_max / σ_second_smallest` of the DLT design matrix beyond which
/// the configuration is treated as degenerate.
pub const DLT_MAX_CONDITION: f64 = 1e12;

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Correspondence {
    pub model: Keypoint3D,
    pub image: Point2D,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

impl Correspondence {
    pub fn new(model: Keypoint3D, image: Point2D) -> Self {
        Correspondence {
            model,
            image,
            weight: 1.0,
        }
    }

    pub fn weighted(model: Keypoint3D, image: Point2D, weight: f64) -> Self {
        Correspondence {
            model,
            image,
            weight,
        }
    }

    fn is_valid(&self) -> bool {
        self.model.iter().all(|x| x.is_finite()) && self.image.is_finite() && self.weight >= 0.0 && self.weight.is_finite()
    }
}

/// Reads one correspondence per non-empty line.
pub fn read_correspondences<R: BufRead>(reader: R) -> Result<Vec<Correspondence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Correspondence =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        if !c.is_valid() {
            return Err(Error::Parse(format!("line {}: invalid correspondence", i + 1)));
        }
        out.push(c);
    }
    Ok(out)
}

pub fn write_correspondences<W: Write>(mut writer: W, corrs: &[Correspondence]) -> Result<()> {
    for c in corrs {
        serde_json::to_writer(&mut writer, c)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

fn check_valid(corrs: &[Correspondence]) -> Result<()> {
    if corrs.iter().any(|c| !c.is_valid()) {
        return Err(Error::InvalidParameter("correspondences must be finite with non-negative weights".into()));
    }
    Ok(())
}

/// Linear pose estimate from at least six correspondences.
pub fn pnp_dlt(corrs: &[Correspondence], k: &CameraIntrinsics) -> Result<Pose> {
    check_valid(corrs)?;
    let active: Vec<&Correspondence> = corrs.iter().filter(|c| c.weight > 0.0).collect();
    if active.len() < DLT_MIN_POINTS {
        return Err(Error::TooFewCorrespondences {
            needed: DLT_MIN_POINTS,
            got: active.len(),
        });
    }
    let n = active.len() as f64;

    // Hartley-style conditioning in both spaces
    let c3 = active.iter().fold(Vec3::zeros(), |a, c| a + c.model.coords) / n;
    let s3 = active.iter().map(|c| (c.model.coords - c3).norm()).sum::<f64>() / n;
    let kinv = k.inverse_matrix();
    let norm_img: Vec<(f64, f64)> = active
        .iter()
        .map(|c| {
            let x = kinv * Vec3::new(c.image.u, c.image.v, 1.0);
            (x.x, x.y)
        })
        .collect();
    let (mx, my) = norm_img.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let s2 = norm_img.iter().map(|(x, y)| (x - mx).hypot(y - my)).sum::<f64>() / n;
    if !(s3 > 1e-12) || !(s2 > 1e-15) {
        return Err(Error::DegenerateConfiguration("points collapse to a single location".into()));
    }
    let (a3, a2) = (3f64.sqrt() / s3, 2f64.sqrt() / s2);

    let mut a = DMatrix::<f64>::zeros(2 * active.len(), 12);
    for (i, (c, (x, y))) in active.iter().zip(&norm_img).enumerate() {
        let w = c.weight.sqrt();
        let p = (c.model.coords - c3) * a3;
        let hp = [p.x, p.y, p.z, 1.0];
        let (x, y) = ((x - mx) * a2, (y - my) * a2);
        for j in 0..4 {
            a[(2 * i, j)] = w * hp[j];
            a[(2 * i, 8 + j)] = -w * x * hp[j];
            a[(2 * i + 1, 4 + j)] = w * hp[j];
            a[(2 * i + 1, 8 + j)] = -w * y * hp[j];
        }
    }

    // null vector of A: right singular vector of the smallest singular value
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::DegenerateConfiguration("svd failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |r: usize| svd.singular_values[order[r]];
    let rank_probe = sv(order.len() - 2);
    if order.len() < 12 || !(rank_probe > 0.0) || sv(0) / rank_probe > DLT_MAX_CONDITION {
        return Err(Error::DegenerateConfiguration(format!(
            "design matrix condition number {:.3e}",
            sv(0) / rank_probe
        )));
    }
    let null = v_t.row(order[11]);
    let pn = Matrix3x4::from_fn(|r, c| null[4 * r + c]);

    // undo the conditioning: P = H⁻¹ Pn T
    let h_inv = Mat3::new(1.0 / a2, 0.0, mx, 0.0, 1.0 / a2, my, 0.0, 0.0, 1.0);
    let mut t = nalgebra::Matrix4::<f64>::identity() * a3;
    t[(3, 3)] = 1.0;
    for r in 0..3 {
        t[(r, 3)] = -a3 * c3[r];
    }
    let mut p = h_inv * pn * t;

    let depth_sum: f64 = active
        .iter()
        .map(|c| p.row(2).dot(&Vector4::new(c.model.x, c.model.y, c.model.z, 1.0).transpose()))
        .sum();
    if depth_sum < 0.0 {
        p = -p;
    }

    let m: Mat3 = p.fixed_view::<3, 3>(0, 0).into_owned();
    let msvd = m.svd(true, true);
    let (u, v_t) = (msvd.u.unwrap(), msvd.v_t.unwrap());
    let mut d = Mat3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let scale = msvd.singular_values.sum() / 3.0;
    if !(scale > 0.0) {
        return Err(Error::DegenerateConfiguration("vanishing projection scale".into()));
    }
    let t = p.column(3) / scale;
    Pose::from_rotation_matrix(&r, t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineOptions {
    pub max_iters: usize,
    /// Stop once the update norm falls below this.
    pub tol: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            max_iters: 50,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub pose: Pose,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// False when the iteration budget ran out first; `pose` is then the best
    /// iterate seen.
    pub converged: bool,
}

/// Weighted sum of squared pixel residuals, or `None` if a point falls
/// behind the camera.
pub fn reprojection_cost(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics) -> Option<f64> {
    let mut cost = 0.0;
    for c in corrs {
        let pc = pose.transform_point(&c.model);
        if !(pc.z > DEPTH_EPSILON) {
            return None;
        }
        let du = k.fx * pc.x / pc.z + k.cx - c.image.u;
        let dv = k.fy * pc.y / pc.z + k.cy - c.image.v;
        cost += c.weight * (du * du + dv * dv);
    }
    Some(cost)
}

/// Left-multiplicative update: `R ← exp(ω) R`, `t ← t + δt`.
fn apply_update(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let omega = Vec3::new(delta[0], delta[1], delta[2]);
    let dt = Vec3::new(delta[3], delta[4], delta[5]);
    let q = nalgebra::UnitQuaternion::from_scaled_axis(omega) * pose.rotation;
    Pose::new(nalgebra::UnitQuaternion::new_normalize(*q.quaternion()), pose.translation + dt)
}

/// Normal equations `JᵀWJ` and `JᵀWr` at `pose`.
fn normal_equations(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for c in corrs {
        let rp = pose.rotation * c.model.coords;
        let pc = rp + pose.translation;
        let iz = 1.0 / pc.z;
        let r = [
            k.fx * pc.x * iz + k.cx - c.image.u,
            k.fy * pc.y * iz + k.cy - c.image.v,
        ];
        // d(u, v)/d(pc)
        let dpi = nalgebra::Matrix2x3::new(
            k.fx * iz,
            0.0,
            -k.fx * pc.x * iz * iz,
            0.0,
            k.fy * iz,
            -k.fy * pc.y * iz * iz,
        );
        // d(pc)/d(ω, t) = [−[Rp]ₓ | I]
        let mut dpc = nalgebra::Matrix3x6::zeros();
        dpc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rp.cross_matrix()));
        dpc.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
        let j = dpi * dpc;
        h += j.transpose() * j * c.weight;
        g += j.transpose() * nalgebra::Vector2::new(r[0], r[1]) * c.weight;
    }
    (h, g)
}

/// Levenberg-damped Gauss-Newton on the weighted pixel reprojection error.
pub fn pnp_refine(
    initial: &Pose,
    corrs: &[Correspondence],
    k: &CameraIntrinsics,
    opts: &RefineOptions,
) -> Result<RefineResult> {
    check_valid(corrs)?;
    let initial_cost = reprojection_cost(initial, corrs, k).ok_or_else(|| {
        let depth = corrs
            .iter()
            .map(|c| initial.transform_point(&c.model).z)
            .fold(f64::INFINITY, f64::min);
        Error::NonPositiveDepth { depth }
    })?;
    let mut pose = *initial;
    let mut cost = initial_cost;
    let mut damping = 0.0f64;
    let mut iterations = 0;
    let mut converged = false;
    let mut fresh = true;
    let (mut h, mut g) = (Matrix6::zeros(), Vector6::zeros());

    while iterations < opts.max_iters {
        if fresh {
            (h, g) = normal_equations(&pose, corrs, k);
            fresh = false;
        }
        let mut a = h;
        for i in 0..6 {
            a[(i, i)] += damping * h[(i, i)].max(1e-12);
        }
        let Some(delta) = a.cholesky().map(|c| c.solve(&(-g))).or_else(|| a.lu().solve(&(-g))) else {
            if damping > 1e12 {
                break;
            }
            damping = if damping == 0.0 { 1e-6 } else { damping * 10.0 };
            continue;
        };
        if !(delta.norm() >= opts.tol) {
            converged = true;
            break;
        }
        iterations += 1;

        let mut step = delta;
        let mut candidate = None;
        for _ in 0..30 {
            let p = apply_update(&pose, &step);
            if let Some(c) = reprojection_cost(&p, corrs, k) {
                candidate = Some((p, c));
                break;
            }
            step *= 0.5;
        }
        match candidate {
            Some((p, c)) if c < cost => {
                debug_assert!(c < cost);
                pose = p;
                cost = c;
                fresh = true;
                damping = if damping < 1e-9 { 0.0 } else { damping * 0.1 };
            }
            _ => {
                damping = if damping == 0.0 { 1e-6 } else { damping * 10.0 };
                if damping > 1e12 {
                    // no descent direction left at machine precision
                    converged = true;
                    break;
                }
            }
        }
    }
    Ok(RefineResult {
        pose,
        iterations,
        initial_cost,
        final_cost: cost,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacParams {
    pub max_iterations: usize,
    pub inlier_threshold_px: f64,
    pub min_sample_size: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            max_iterations: 200,
            inlier_threshold_px: 5.0,
            min_sample_size: 4,
            confidence: 0.99,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("RANSAC needs at least one iteration".into()));
        }
        if !(self.inlier_threshold_px > 0.0) {
            return Err(Error::InvalidParameter("inlier threshold must be positive".into()));
        }
        if self.min_sample_size < 4 {
            return Err(Error::InvalidParameter("minimal sample size must be at least 4".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::InvalidParameter("confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnpResult {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub mean_reprojection_error_px: f64,
    /// Hypotheses drawn before the loop stopped.
    pub hypotheses: usize,
}

impl PnpResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn reprojection_error(pose: &Pose, c: &Correspondence, k: &CameraIntrinsics) -> Option<f64> {
    let pc = pose.transform_point(&c.model);
    if !(pc.z > DEPTH_EPSILON) {
        return None;
    }
    Some((k.fx * pc.x / pc.z + k.cx - c.image.u).hypot(k.fy * pc.y / pc.z + k.cy - c.image.v))
}

fn score(pose: &Pose, corrs: &[Correspondence], k: &CameraIntrinsics, threshold: f64) -> (Vec<bool>, usize, f64) {
    let mut flags = Vec::with_capacity(corrs.len());
    let (mut count, mut err) = (0, 0.0);
    for c in corrs {
        match reprojection_error(pose, c, k) {
            Some(e) if e < threshold => {
                flags.push(true);
                count += 1;
                err += e;
            }
            _ => flags.push(false),
        }
    }
    (flags, count, err)
}

/// Draws `size` indices, preferring correspondences with distinct model points.
fn draw_sample<R: Rng>(rng: &mut R, corrs: &[Correspondence], size: usize) -> Vec<usize> {
    let n = corrs.len();
    let mut chosen: Vec<usize> = Vec::with_capacity(size);
    let mut attempts = 0;
    while chosen.len() < size && attempts < 50 * size {
        attempts += 1;
        let i = rng.random_range(0..n);
        if chosen.contains(&i) || corrs[i].weight <= 0.0 {
            continue;
        }
        if chosen
            .iter()
            .any(|&j| (corrs[j].model - corrs[i].model).norm() < 1e-9)
        {
            continue;
        }
        chosen.push(i);
    }
    chosen
}

/// Rough pose with identity rotation, used to seed refinement when fewer
/// than six correspondences are available.
fn coarse_pose(corrs: &[Correspondence], k: &CameraIntrinsics) -> Result<Pose> {
    let n = corrs.len() as f64;
    let c3 = corrs.iter().fold(Vec3::zeros(), |a, c| a + c.model.coords) / n;
    let s3 = (corrs.iter().map(|c| (c.model.coords - c3).norm_squared()).sum::<f64>() / n).sqrt();
    let rays: Vec<Vec3> = corrs
        .iter()
        .map(|c| crate::geometry::backproject_ray(k, &c.image))
        .collect();
    let m = rays.iter().fold(Vec3::zeros(), |a, r| a + r) / n;
    let s2 = (rays.iter().map(|r| (r - m).norm_squared()).sum::<f64>() / n).sqrt();
    if !(s3 > 1e-12) || !(s2 > 1e-15) {
        return Err(Error::DegenerateConfiguration("cannot size a coarse pose".into()));
    }
    let depth = s3 / s2;
    Ok(Pose::from_translation(m * depth - c3))
}

fn hypothesis(sample: &[Correspondence], k: &CameraIntrinsics, seed_pose: Option<&Pose>) -> Result<Pose> {
    let quick = RefineOptions {
        max_iters: 10,
        tol: 1e-8,
    };
    let initial = if sample.len() >= DLT_MIN_POINTS {
        pnp_dlt(sample, k)?
    } else {
        match seed_pose {
            Some(p) if reprojection_cost(p, sample, k).is_some() => *p,
            _ => coarse_pose(sample, k)?,
        }
    };
    match pnp_refine(&initial, sample, k, &quick) {
        Ok(r) => Ok(r.pose),
        Err(_) => Ok(initial),
    }
}

/// Standard adaptive bound on the number of RANSAC draws.
fn required_iterations(inlier_ratio: f64, sample_size: usize, confidence: f64) -> usize {
    let good = inlier_ratio.powi(sample_size as i32);
    if good >= 1.0 - 1e-12 {
        return 1;
    }
    if good <= 1e-12 {
        return usize::MAX;
    }
    let n = (1.0 - confidence).ln() / (1.0 - good).ln();
    if n.is_finite() {
        n.ceil().max(1.0) as usize
    } else {
        usize::MAX
    }
}

/// Robust pose: minimal-sample hypotheses scored by inlier count, then a
/// refit on the consensus set. Deterministic for a given seed; on equal
/// inlier counts the earliest hypothesis is kept.
pub fn pnp_ransac(corrs: &[Correspondence], k: &CameraIntrinsics, params: &RansacParams) -> Result<PnpResult> {
    params.validate()?;
    check_valid(corrs)?;
    let n = corrs.len();
    if n < params.min_sample_size {
        return Err(Error::TooFewCorrespondences {
            needed: params.min_sample_size,
            got: n,
        });
    }
    let sample_size = if n >= params.min_sample_size.max(DLT_MIN_POINTS) {
        params.min_sample_size.max(DLT_MIN_POINTS)
    } else {
        params.min_sample_size
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, Pose)> = None;
    let mut budget = params.max_iterations;
    let mut drawn = 0;
    let mut sample = Vec::with_capacity(sample_size);
    while drawn < budget {
        drawn += 1;
        let idx = draw_sample(&mut rng, corrs, sample_size);
        if idx.len() < params.min_sample_size {
            continue;
        }
        sample.clear();
        sample.extend(idx.iter().map(|&i| corrs[i]));
        let Ok(pose) = hypothesis(&sample, k, best.as_ref().map(|b| &b.1)) else {
            continue;
        };
        let (_, count, _) = score(&pose, corrs, k, params.inlier_threshold_px);
        if best.as_ref().is_none_or(|b| count > b.0) {
            best = Some((count, pose));
            let needed = required_iterations(count as f64 / n as f64, sample_size, params.confidence);
            budget = budget.min(needed.max(drawn));
        }
    }
    let Some((count, mut pose)) = best else {
        return Err(Error::NoConsensus {
            inliers: 0,
            needed: params.min_sample_size,
        });
    };
    if count < params.min_sample_size {
        return Err(Error::NoConsensus {
            inliers: count,
            needed: params.min_sample_size,
        });
    }

    let (mut flags, mut count, mut err) = score(&pose, corrs, k, params.inlier_threshold_px);
    for _ in 0..5 {
        let inliers: Vec<Correspondence> = corrs
            .iter()
            .zip(&flags)
            .filter(|(_, &f)| f)
            .map(|(c, _)| *c)
            .collect();
        let Ok(refit) = pnp_refine(&pose, &inliers, k, &RefineOptions::default()) else {
            break;
        };
        let (f2, c2, e2) = score(&refit.pose, corrs, k, params.inlier_threshold_px);
        if c2 < count {
            break;
        }
        let same = f2 == flags;
        pose = refit.pose;
        (flags, count, err) = (f2, c2, e2);
        if same {
            break;
        }
    }
    Ok(PnpResult {
        pose,
        mean_reprojection_error_px: err / count as f64,
        inliers: flags,
        hypotheses: drawn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, uniform_rotation};
    use rand_distr::{Distribution, Normal};

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0).unwrap()
    }

    fn cube() -> Vec<Keypoint3D> {
        (0..8)
            .map(|i| {
                let s = |b: usize| if i >> b & 1 == 1 { 1.0 } else { -1.0 };
                Keypoint3D::new(s(0), s(1), s(2))
            })
            .collect()
    }

    fn corrs_for(pose: &Pose, pts: &[Keypoint3D]) -> Vec<Correspondence> {
        pts.iter()
            .map(|p| Correspondence::new(*p, project(&k(), pose, p).unwrap()))
            .collect()
    }

    fn pose_error(a: &Pose, b: &Pose) -> (f64, f64) {
        (
            a.rotation_angle_to(b),
            (a.translation - b.translation).norm() / b.translation.norm(),
        )
    }

    #[test]
    fn dlt_recovers_cube_pose() {
        let gt = Pose::from_translation(Vec3::new(0.0, 0.0, 5.0));
        let est = pnp_dlt(&corrs_for(&gt, &cube()), &k()).unwrap();
        let (r, t) = pose_error(&est, &gt);
        assert!(r < 1e-6 && t < 1e-6, "{r} {t}");
    }

    #[test]
    fn dlt_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let gt = Pose::new(
                uniform_rotation(&mut rng),
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..30.0)),
            );
            let est = pnp_dlt(&corrs_for(&gt, &cube()), &k()).unwrap();
            let (r, t) = pose_error(&est, &gt);
            assert!(r < 1e-6 && t < 1e-6, "{r} {t}");
        }
    }

    #[test]
    fn dlt_rejects_collinear_images() {
        // points on a plane through the camera centre all image onto one line
        let gt = Pose::from_translation(Vec3::new(0.0, 0.0, 5.0));
        let pts: Vec<Keypoint3D> = (0..8)
            .map(|i| {
                let a = i as f64;
                Keypoint3D::new(0.3 * a - 1.0, 0.0, (a * 1.7).sin())
            })
            .collect();
        let corrs = corrs_for(&gt, &pts);
        assert!(corrs.iter().all(|c| (c.image.v - 240.0).abs() < 1e-9));
        assert!(matches!(pnp_dlt(&corrs, &k()), Err(Error::DegenerateConfiguration(_))));
        assert!(matches!(pnp_dlt(&corrs[..5], &k()), Err(Error::TooFewCorrespondences { .. })));
    }

    #[test]
    fn refine_is_stationary_at_truth() {
        let gt = Pose::from_axis_angle(Vec3::new(0.2, -0.1, 0.4), Vec3::new(0.1, 0.2, 6.0));
        let r = pnp_refine(&gt, &corrs_for(&gt, &cube()), &k(), &RefineOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.converged);
        assert_eq!(r.pose, gt);
    }

    #[test]
    fn refine_converges_from_perturbation() {
        let gt = Pose::from_axis_angle(Vec3::new(0.2, -0.1, 0.4), Vec3::new(0.1, 0.2, 6.0));
        let corrs = corrs_for(&gt, &cube());
        let axis = Vec3::new(1.0, 2.0, -1.0).normalize();
        let perturbed = Pose::new(
            nalgebra::UnitQuaternion::from_scaled_axis(axis * 5f64.to_radians()) * gt.rotation,
            gt.translation + Vec3::new(0.3, -0.4, 0.5).normalize() * 0.1 * gt.translation.norm(),
        );
        let r = pnp_refine(&perturbed, &corrs, &k(), &RefineOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.final_cost <= r.initial_cost);
        let (er, et) = pose_error(&r.pose, &gt);
        assert!(er < 1e-8 && et < 1e-8, "{er} {et}");
    }

    #[test]
    fn refine_improves_on_dlt_under_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..20 {
            let gt = Pose::new(uniform_rotation(&mut rng), Vec3::new(0.2, -0.3, 8.0));
            let mut corrs = corrs_for(&gt, &cube());
            for c in &mut corrs {
                c.image.u += noise.sample(&mut rng);
                c.image.v += noise.sample(&mut rng);
            }
            let dlt = pnp_dlt(&corrs, &k()).unwrap();
            let r = pnp_refine(&dlt, &corrs, &k(), &RefineOptions::default()).unwrap();
            assert!(r.final_cost <= reprojection_cost(&dlt, &corrs, &k()).unwrap());
        }
    }

    #[test]
    fn refine_rejects_points_behind_camera() {
        let behind = Pose::from_translation(Vec3::new(0.0, 0.0, -5.0));
        let gt = Pose::from_translation(Vec3::new(0.0, 0.0, 5.0));
        let err = pnp_refine(&behind, &corrs_for(&gt, &cube()), &k(), &RefineOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonPositiveDepth { .. }));
    }

    #[test]
    fn ransac_all_inliers() {
        let gt = Pose::from_axis_angle(Vec3::new(-0.3, 0.5, 0.1), Vec3::new(-0.5, 0.2, 7.0));
        let corrs = corrs_for(&gt, &cube());
        let r = pnp_ransac(&corrs, &k(), &RansacParams::default()).unwrap();
        assert!(r.inliers.iter().all(|&b| b));
        let (er, et) = pose_error(&r.pose, &gt);
        assert!(er < 1e-6 && et < 1e-6);
    }

    #[test]
    fn ransac_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = Normal::new(0.0, 0.5).unwrap();
        for trial in 0..20 {
            let gt = Pose::new(uniform_rotation(&mut rng), Vec3::new(0.3, -0.2, 9.0));
            let mut corrs = Vec::new();
            for _ in 0..2 {
                for p in cube() {
                    let u = project(&k(), &gt, &p).unwrap();
                    corrs.push(Correspondence::new(
                        p,
                        Point2D::new(u.u + noise.sample(&mut rng), u.v + noise.sample(&mut rng)),
                    ));
                }
            }
            for i in 0..8 {
                corrs.push(Correspondence::new(
                    cube()[i],
                    Point2D::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                ));
            }
            let params = RansacParams {
                seed: trial,
                ..RansacParams::default()
            };
            let r = pnp_ransac(&corrs, &k(), &params).unwrap();
            assert!(r.pose.rotation_angle_to(&gt).to_degrees() < 1.0);
            assert!(r.inliers[..16].iter().all(|&b| b), "trial {trial}");
            let again = pnp_ransac(&corrs, &k(), &params).unwrap();
            assert_eq!(again.inliers, r.inliers);
            assert_eq!(again.pose, r.pose);
        }
    }

    #[test]
    fn ransac_no_consensus_on_inconsistent_set() {
        // one model point seen at four far-apart pixels
        let p = Keypoint3D::new(0.0, 0.0, 0.0);
        let corrs: Vec<Correspondence> = [(100.0, 100.0), (500.0, 100.0), (100.0, 400.0), (500.0, 400.0)]
            .iter()
            .map(|&(u, v)| Correspondence::new(p, Point2D::new(u, v)))
            .collect();
        let err = pnp_ransac(&corrs, &k(), &RansacParams::default()).unwrap_err();
        assert!(matches!(err, Error::NoConsensus { .. }), "{err:?}");
        assert!(matches!(
            pnp_ransac(&corrs[..3], &k(), &RansacParams::default()),
            Err(Error::TooFewCorrespondences { .. })
        ));
    }

    #[test]
    fn ransac_four_point_fallback() {
        let gt = Pose::from_axis_angle(Vec3::new(0.05, 0.1, 0.0), Vec3::new(0.0, 0.0, 6.0));
        let corrs = corrs_for(&gt, &cube()[..5]);
        let r = pnp_ransac(&corrs, &k(), &RansacParams::default()).unwrap();
        assert!(r.inlier_count() >= 4);
        assert!(r.mean_reprojection_error_px < 5.0);
    }

    #[test]
    fn params_validation() {
        let bad = RansacParams {
            min_sample_size: 3,
            ..RansacParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = RansacParams {
            inlier_threshold_px: 0.0,
            ..RansacParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let corrs = vec![
            Correspondence::new(Keypoint3D::new(1.0, 2.0, 3.0), Point2D::new(4.0, 5.0)),
            Correspondence::weighted(Keypoint3D::new(-1.0, 0.5, 0.0), Point2D::new(0.0, 9.5), 0.25),
        ];
        let mut buf = Vec::new();
        write_correspondences(&mut buf, &corrs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"model":[1.0,2.0,3.0],"image":[4.0,5.0],"weight":1.0}"#);
        assert_eq!(read_correspondences(&buf[..]).unwrap(), corrs);
        let no_weight = br#"{"model":[1,2,3],"image":[4,5]}"#;
        assert_eq!(read_correspondences(&no_weight[..]).unwrap()[0].weight, 1.0);
        assert!(read_correspondences(&b"{\"model\":[1,2],\"image\":[4,5]}"[..]).is_err());
    }

    #[test]
    fn required_iterations_bound() {
        assert_eq!(required_iterations(1.0, 6, 0.99), 1);
        let n = required_iterations(0.6, 6, 0.99);
        assert!((95..=100).contains(&n), "{n}");
        assert_eq!(required_iterations(0.0, 6, 0.99), usize::MAX);
    }
}
