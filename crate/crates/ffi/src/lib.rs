//! C ABI over `wdpose`.
//!
//! Every fallible function returns a [`WdStatus`]; on failure a description
//! is available from [`wd_last_error`] on the same thread. Predictions and
//! model clouds live behind opaque handles that the caller frees.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use wdpose::fusion::{fuse, FusionParams};
use wdpose::geometry::{project, CameraIntrinsics, Keypoint3D, Point2D, Pose, Vec3};
use wdpose::grid::{PyramidPrediction, NUM_KEYPOINTS};
use wdpose::losses::{loss3d, LossParams};
use wdpose::metrics::{add_distance, adi_distance, speed_score, ModelCloud};
use wdpose::pnp::{pnp_ransac, Correspondence, RansacParams};
use wdpose::sampling::{sample_counts, SamplingParams};
use wdpose::Error;

/// Result codes. Values 1 to 16 mirror the library's error kinds.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WdStatus {
    Ok = 0,
    NonPositiveDepth = 1,
    OutOfBounds = 2,
    NoSuchLevel = 3,
    DegenerateHull = 4,
    NonPositiveSize = 5,
    ZeroRay = 6,
    DegenerateConfiguration = 7,
    TooFewCorrespondences = 8,
    NoConsensus = 9,
    NoDetection = 10,
    ZeroTranslation = 11,
    OutOfRange = 12,
    ObjectNotVisible = 13,
    InvalidParameter = 14,
    Parse = 15,
    Io = 16,
    NullPointer = 100,
    Panic = 101,
}

impl From<&Error> for WdStatus {
    fn from(e: &Error) -> Self {
        use WdStatus::*;
        match e.code() {
            1 => NonPositiveDepth,
            2 => OutOfBounds,
            3 => NoSuchLevel,
            4 => DegenerateHull,
            5 => NonPositiveSize,
            6 => ZeroRay,
            7 => DegenerateConfiguration,
            8 => TooFewCorrespondences,
            9 => NoConsensus,
            10 => NoDetection,
            11 => ZeroTranslation,
            12 => OutOfRange,
            13 => ObjectNotVisible,
            15 => Parse,
            16 => Io,
            _ => InvalidParameter,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WdIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Model-to-camera transform; quaternion stored as `w, x, y, z`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WdPose {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WdPoint2 {
    pub u: f64,
    pub v: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WdPoint3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WdCorrespondence {
    pub model: WdPoint3,
    pub image: WdPoint2,
    pub weight: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WdRansacParams {
    pub max_iterations: usize,
    pub inlier_threshold_px: f64,
    pub min_sample_size: usize,
    pub confidence: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WdFusionParams {
    pub objectness_threshold: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub ransac: WdRansacParams,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WdFusionOutput {
    pub pose: WdPose,
    pub estimated_size: f64,
    pub inliers: usize,
    pub correspondences: usize,
    pub mean_reprojection_error_px: f64,
}

/// Opaque pyramid prediction.
pub struct WdPrediction(PyramidPrediction);

/// Opaque model point cloud.
pub struct WdModelCloud(ModelCloud);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(e: &Error) -> WdStatus {
    set_error(&e.to_string());
    WdStatus::from(e)
}

fn guard(f: impl FnOnce() -> WdStatus) -> WdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            WdStatus::Panic
        }
    }
}

fn null() -> WdStatus {
    set_error("null pointer argument");
    WdStatus::NullPointer
}

impl From<WdIntrinsics> for CameraIntrinsics {
    fn from(k: WdIntrinsics) -> Self {
        CameraIntrinsics {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
        }
    }
}

impl From<&WdPose> for Pose {
    fn from(p: &WdPose) -> Self {
        Pose::from_quaternion_wxyz(p.quaternion, Vec3::from(p.translation))
    }
}

impl From<&Pose> for WdPose {
    fn from(p: &Pose) -> Self {
        WdPose {
            quaternion: p.quaternion_wxyz(),
            translation: p.translation.into(),
        }
    }
}

impl From<WdPoint3> for Keypoint3D {
    fn from(p: WdPoint3) -> Self {
        Keypoint3D::new(p.x, p.y, p.z)
    }
}

impl From<WdPoint2> for Point2D {
    fn from(p: WdPoint2) -> Self {
        Point2D::new(p.u, p.v)
    }
}

impl From<&WdRansacParams> for RansacParams {
    fn from(p: &WdRansacParams) -> Self {
        RansacParams {
            max_iterations: p.max_iterations,
            inlier_threshold_px: p.inlier_threshold_px,
            min_sample_size: p.min_sample_size,
            confidence: p.confidence,
            seed: p.seed,
        }
    }
}

fn intrinsics(k: &WdIntrinsics) -> Result<CameraIntrinsics, Error> {
    let k = CameraIntrinsics::from(*k);
    k.validate()?;
    Ok(k)
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub extern "C" fn wd_schema_version() -> u32 {
    wdpose::SCHEMA_VERSION
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn wd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn wd_default_ransac_params() -> WdRansacParams {
    let d = RansacParams::default();
    WdRansacParams {
        max_iterations: d.max_iterations,
        inlier_threshold_px: d.inlier_threshold_px,
        min_sample_size: d.min_sample_size,
        confidence: d.confidence,
        seed: d.seed,
    }
}

#[no_mangle]
pub extern "C" fn wd_default_fusion_params() -> WdFusionParams {
    let d = FusionParams::default();
    WdFusionParams {
        objectness_threshold: d.objectness_threshold,
        alpha: d.sampling.alpha,
        lambda: d.sampling.lambda,
        ransac: wd_default_ransac_params(),
    }
}

/// Projects a model point into the image.
///
/// # Safety
/// Every pointer must be valid for one element of its type.
#[no_mangle]
pub unsafe extern "C" fn wd_project(
    k: *const WdIntrinsics,
    pose: *const WdPose,
    point: *const WdPoint3,
    out: *mut WdPoint2,
) -> WdStatus {
    guard(|| {
        if k.is_null() || pose.is_null() || point.is_null() || out.is_null() {
            return null();
        }
        let res = intrinsics(&*k).and_then(|k| project(&k, &Pose::from(&*pose), &Keypoint3D::from(*point)));
        match res {
            Ok(p) => {
                *out = WdPoint2 { u: p.u, v: p.v };
                WdStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Real-valued per-level sample counts for an object of `size` pixels.
///
/// # Safety
/// `reference_sizes` and `out` must each hold `levels` doubles.
#[no_mangle]
pub unsafe extern "C" fn wd_sample_counts(
    size: f64,
    alpha: f64,
    lambda: f64,
    reference_sizes: *const f64,
    levels: usize,
    out: *mut f64,
) -> WdStatus {
    guard(|| {
        let (Some(refs), false) = (slice(reference_sizes, levels), out.is_null()) else {
            return null();
        };
        let params = SamplingParams {
            alpha,
            lambda,
            reference_sizes: refs.to_vec(),
        };
        match sample_counts(size, &params) {
            Ok(plan) => {
                std::slice::from_raw_parts_mut(out, levels).copy_from_slice(&plan.expected);
                WdStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// 3D regression loss with default parameters for an object of the given
/// diameter. `gradient` receives `2 · n` doubles, `u` then `v` per keypoint.
///
/// # Safety
/// `keypoints` and `predicted` must hold `n` elements, `gradient` `2 · n`
/// doubles or be null, and the remaining pointers one element each.
#[no_mangle]
pub unsafe extern "C" fn wd_loss3d(
    k: *const WdIntrinsics,
    gt_pose: *const WdPose,
    keypoints: *const WdPoint3,
    predicted: *const WdPoint2,
    n: usize,
    diameter: f64,
    value: *mut f64,
    gradient: *mut f64,
) -> WdStatus {
    guard(|| {
        let (Some(kps), Some(pred)) = (slice(keypoints, n), slice(predicted, n)) else {
            return null();
        };
        if k.is_null() || gt_pose.is_null() || value.is_null() {
            return null();
        }
        let kps: Vec<Keypoint3D> = kps.iter().map(|&p| p.into()).collect();
        let pred: Vec<Point2D> = pred.iter().map(|&p| p.into()).collect();
        let res = intrinsics(&*k)
            .and_then(|k| loss3d(&k, &Pose::from(&*gt_pose), &kps, &pred, &LossParams::for_diameter(diameter)));
        match res {
            Ok(r) => {
                *value = r.value;
                if !gradient.is_null() {
                    let g = std::slice::from_raw_parts_mut(gradient, 2 * n);
                    for (dst, src) in g.chunks_exact_mut(2).zip(&r.gradient) {
                        dst.copy_from_slice(src);
                    }
                }
                WdStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Robust pose from 2D-3D correspondences. `inlier_count` may be null.
///
/// # Safety
/// `corrs` must hold `n` elements; the other pointers one element each.
#[no_mangle]
pub unsafe extern "C" fn wd_pnp_ransac(
    corrs: *const WdCorrespondence,
    n: usize,
    k: *const WdIntrinsics,
    params: *const WdRansacParams,
    out: *mut WdPose,
    inlier_count: *mut usize,
) -> WdStatus {
    guard(|| {
        let Some(corrs) = slice(corrs, n) else {
            return null();
        };
        if k.is_null() || params.is_null() || out.is_null() {
            return null();
        }
        let corrs: Vec<Correspondence> = corrs
            .iter()
            .map(|c| Correspondence::weighted(c.model.into(), c.image.into(), c.weight))
            .collect();
        let res = intrinsics(&*k).and_then(|k| pnp_ransac(&corrs, &k, &RansacParams::from(&*params)));
        match res {
            Ok(r) => {
                *out = WdPose::from(&r.pose);
                if !inlier_count.is_null() {
                    *inlier_count = r.inlier_count();
                }
                WdStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Parses a prediction from JSON (the `prediction` object of a simulation
/// record). Free the handle with [`wd_prediction_free`].
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` valid for one pointer.
#[no_mangle]
pub unsafe extern "C" fn wd_prediction_from_json(json: *const c_char, out: *mut *mut WdPrediction) -> WdStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return null();
        }
        let parsed = CStr::from_ptr(json)
            .to_str()
            .map_err(|e| Error::Parse(e.to_string()))
            .and_then(|s| serde_json::from_str::<PyramidPrediction>(s).map_err(Error::from))
            .and_then(|p| p.validate().map(|_| p));
        match parsed {
            Ok(p) => {
                *out = Box::into_raw(Box::new(WdPrediction(p)));
                WdStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `pred` must come from [`wd_prediction_from_json`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn wd_prediction_free(pred: *mut WdPrediction) {
    if !pred.is_null() {
        drop(Box::from_raw(pred));
    }
}

/// # Safety
/// `pred` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wd_prediction_num_levels(pred: *const WdPrediction) -> usize {
    pred.as_ref().map_or(0, |p| p.0.levels.len())
}

/// Multi-scale fusion of a prediction into one pose.
///
/// # Safety
/// `keypoints` must hold 8 points; the other pointers one element each.
#[no_mangle]
pub unsafe extern "C" fn wd_fuse(
    pred: *const WdPrediction,
    keypoints: *const WdPoint3,
    k: *const WdIntrinsics,
    params: *const WdFusionParams,
    out: *mut WdFusionOutput,
) -> WdStatus {
    guard(|| {
        let Some(kps) = slice(keypoints, NUM_KEYPOINTS) else {
            return null();
        };
        if pred.is_null() || k.is_null() || params.is_null() || out.is_null() {
            return null();
        }
        let pred = &(*pred).0;
        let p = &*params;
        let fusion = FusionParams {
            objectness_threshold: p.objectness_threshold,
            sampling: SamplingParams {
                alpha: p.alpha,
                lambda: p.lambda,
                reference_sizes: pred.spec.reference_sizes(),
            },
            ransac: RansacParams::from(&p.ransac),
            per_level: false,
            ..FusionParams::default()
        };
        let kps: Vec<Keypoint3D> = kps.iter().map(|&p| p.into()).collect();
        match intrinsics(&*k).and_then(|k| fuse(pred, &kps, &k, &fusion)) {
            Ok(r) => {
                *out = WdFusionOutput {
                    pose: WdPose::from(&r.pose.pose),
                    estimated_size: r.estimated_size,
                    inliers: r.pose.inlier_count(),
                    correspondences: r.pose.inliers.len(),
                    mean_reprojection_error_px: r.pose.mean_reprojection_error_px,
                };
                WdStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Builds a model cloud from `n` points. Free with [`wd_model_cloud_free`].
///
/// # Safety
/// `points` must hold `n` elements and `out` be valid for one pointer.
#[no_mangle]
pub unsafe extern "C" fn wd_model_cloud_new(
    points: *const WdPoint3,
    n: usize,
    out: *mut *mut WdModelCloud,
) -> WdStatus {
    guard(|| {
        let Some(pts) = slice(points, n) else {
            return null();
        };
        if out.is_null() {
            return null();
        }
        match ModelCloud::new(pts.iter().map(|&p| p.into()).collect()) {
            Ok(c) => {
                *out = Box::into_raw(Box::new(WdModelCloud(c)));
                WdStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// # Safety
/// `cloud` must come from [`wd_model_cloud_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn wd_model_cloud_free(cloud: *mut WdModelCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Largest pairwise distance of the cloud, or NaN for a null handle.
///
/// # Safety
/// `cloud` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn wd_model_cloud_diameter(cloud: *const WdModelCloud) -> f64 {
    cloud.as_ref().map_or(f64::NAN, |c| c.0.diameter)
}

/// ADD and ADI distances between two poses. Either output may be null.
///
/// # Safety
/// `cloud`, `gt` and `est` must be valid; outputs valid or null.
#[no_mangle]
pub unsafe extern "C" fn wd_pose_distances(
    cloud: *const WdModelCloud,
    gt: *const WdPose,
    est: *const WdPose,
    add: *mut f64,
    adi: *mut f64,
) -> WdStatus {
    guard(|| {
        if cloud.is_null() || gt.is_null() || est.is_null() {
            return null();
        }
        let (c, g, e) = (&(*cloud).0, Pose::from(&*gt), Pose::from(&*est));
        if !add.is_null() {
            *add = add_distance(&g, &e, c);
        }
        if !adi.is_null() {
            *adi = adi_distance(&g, &e, c);
        }
        WdStatus::Ok
    })
}

/// Rotation error `e_q` (radians) and relative translation error `e_t`.
///
/// # Safety
/// Every pointer must be valid for one element.
#[no_mangle]
pub unsafe extern "C" fn wd_speed_score(
    gt: *const WdPose,
    est: *const WdPose,
    e_q: *mut f64,
    e_t: *mut f64,
) -> WdStatus {
    guard(|| {
        if gt.is_null() || est.is_null() || e_q.is_null() || e_t.is_null() {
            return null();
        }
        match speed_score(&Pose::from(&*gt), &Pose::from(&*est)) {
            Ok(s) => {
                *e_q = s.e_q;
                *e_t = s.e_t;
                WdStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
