//! Central finite-difference verification of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{project, transform_to_camera, uniform_rotation, CameraIntrinsics, Keypoint3D, Point2D, Pose, Vec3};
use crate::losses::{focal_loss, loss2d, loss3d, LossParams};
use crate::SCHEMA_VERSION;

pub const FD_STEP: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const FOCAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub configs: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub schema_version: u32,
    pub seed: u64,
    pub step: f64,
    pub suites: Vec<SuiteReport>,
    pub passed: bool,
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |it: &mut dyn Iterator<Item = f64>| it.fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = inf(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = inf(&mut analytic.iter().copied()).max(inf(&mut numeric.iter().copied())).max(1e-8);
    diff / scale
}

/// Central differences of `f` with respect to every pixel coordinate.
fn numeric_pixel_gradient(points: &[Point2D], h: f64, f: impl Fn(&[Point2D]) -> f64) -> Vec<f64> {
    let mut work = points.to_vec();
    let mut out = Vec::with_capacity(2 * points.len());
    for i in 0..points.len() {
        for axis in 0..2 {
            let orig = work[i];
            let bump = |p: &mut Point2D, d: f64| {
                if axis == 0 {
                    p.u += d
                } else {
                    p.v += d
                }
            };
            bump(&mut work[i], h);
            let fp = f(&work);
            work[i] = orig;
            bump(&mut work[i], -h);
            let fm = f(&work);
            work[i] = orig;
            out.push((fp - fm) / (2.0 * h));
        }
    }
    out
}

fn random_pose<R: Rng>(rng: &mut R, depth: f64) -> Pose {
    let q = uniform_rotation(rng);
    let t = Vec3::new(rng.random_range(-0.3..0.3) * depth, rng.random_range(-0.3..0.3) * depth, depth);
    Pose::new(q, t)
}

fn box_corners(half: f64) -> Vec<Keypoint3D> {
    (0..8)
        .map(|i| {
            let s = |b: usize| if i >> b & 1 == 1 { half } else { -half };
            Keypoint3D::new(s(0), s(1), s(2))
        })
        .collect()
}

struct Config3D {
    k: CameraIntrinsics,
    pose: Pose,
    keypoints: Vec<Keypoint3D>,
    predicted: Vec<Point2D>,
    params: LossParams,
}

fn random_config3d<R: Rng>(rng: &mut R, h: f64) -> Config3D {
    let noise = Normal::new(0.0, 6.0).unwrap();
    loop {
        let f = rng.random_range(150.0..600.0);
        let k = CameraIntrinsics::new(f, f * rng.random_range(0.9..1.1), rng.random_range(200.0..300.0), rng.random_range(200.0..300.0)).unwrap();
        let depth = rng.random_range(1.5..15.0);
        let pose = random_pose(rng, depth);
        let keypoints = box_corners(0.5);
        let params = LossParams::for_diameter(3f64.sqrt());
        let Ok(gt) = keypoints.iter().map(|p| project(&k, &pose, p)).collect::<Result<Vec<_>>>() else {
            continue;
        };
        let predicted: Vec<Point2D> = gt
            .iter()
            .map(|p| Point2D::new(p.u + noise.sample(rng), p.v + noise.sample(rng)))
            .collect();
        // keep away from the smooth-L1 transition, where second derivatives jump
        let Ok(r) = loss3d(&k, &pose, &keypoints, &predicted, &params) else {
            continue;
        };
        let near_kink = r.errors.iter().zip(&keypoints).any(|(e, p)| {
            let z = transform_to_camera(&pose, p).z;
            (e.norm() - params.beta_3d).abs() < 10.0 * h * 2.0 * z / k.fx.min(k.fy)
        });
        if !near_kink {
            return Config3D {
                k,
                pose,
                keypoints,
                predicted,
                params,
            };
        }
    }
}

pub fn check_loss3d(seed: u64, configs: usize, h: f64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let c = random_config3d(&mut rng, h);
        let analytic = loss3d(&c.k, &c.pose, &c.keypoints, &c.predicted, &c.params).unwrap();
        let a: Vec<f64> = analytic.gradient.iter().flatten().copied().collect();
        let n = numeric_pixel_gradient(&c.predicted, h, |pts| {
            loss3d(&c.k, &c.pose, &c.keypoints, pts, &c.params).map_or(f64::NAN, |r| r.value)
        });
        worst = worst.max(relative_error(&a, &n));
    }
    report("loss3d", configs, worst, LOSS_TOLERANCE)
}

pub fn check_loss2d(seed: u64, configs: usize, h: f64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2d);
    let noise = Normal::new(0.0, 3.0).unwrap();
    let params = LossParams::default();
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < configs {
        let gt: Vec<Point2D> = (0..8)
            .map(|_| Point2D::new(rng.random_range(0.0..512.0), rng.random_range(0.0..512.0)))
            .collect();
        let pred: Vec<Point2D> = gt
            .iter()
            .map(|p| Point2D::new(p.u + noise.sample(&mut rng), p.v + noise.sample(&mut rng)))
            .collect();
        if gt
            .iter()
            .zip(&pred)
            .any(|(a, b)| (a.distance(b) - params.beta_2d).abs() < 10.0 * h)
        {
            continue;
        }
        let r = loss2d(&gt, &pred, &params).unwrap();
        let a: Vec<f64> = r.gradient.iter().flatten().copied().collect();
        let n = numeric_pixel_gradient(&pred, h, |pts| loss2d(&gt, pts, &params).unwrap().value);
        worst = worst.max(relative_error(&a, &n));
        done += 1;
    }
    report("loss2d", configs, worst, LOSS_TOLERANCE)
}

pub fn check_focal(seed: u64, configs: usize, h: f64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0ca1);
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let params = LossParams {
            focal_gamma: rng.random_range(0.0..4.0),
            focal_alpha: rng.random_range(0.05..0.95),
            ..LossParams::default()
        };
        let p = rng.random_range(0.02..0.98);
        let target = rng.random_bool(0.5);
        let (_, a) = focal_loss(p, target, &params);
        let n = (focal_loss(p + h, target, &params).0 - focal_loss(p - h, target, &params).0) / (2.0 * h);
        worst = worst.max(relative_error(&[a], &[n]));
    }
    report("focal_loss", configs, worst, FOCAL_TOLERANCE)
}

fn report(name: &str, configs: usize, max_rel_err: f64, tolerance: f64) -> SuiteReport {
    SuiteReport {
        name: name.to_string(),
        configs,
        max_rel_err,
        tolerance,
        passed: max_rel_err < tolerance,
    }
}

pub fn run(seed: u64, configs: usize) -> GradcheckReport {
    let suites = vec![
        check_loss3d(seed, configs, FD_STEP),
        check_loss2d(seed, configs, FD_STEP),
        check_focal(seed, configs, FD_STEP),
    ];
    let passed = suites.iter().all(|s| s.passed);
    GradcheckReport {
        schema_version: SCHEMA_VERSION,
        seed,
        step: FD_STEP,
        suites,
        passed,
    }
}
