//! Inference-time multi-scale fusion.
//!
//! The most confident cell gives a size estimate `S`; the sampling plan for
//! `S` decides how many top-objectness cells each level contributes; the
//! pooled keypoint predictions are solved with RANSAC+PnP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Keypoint3D, Point2D};
use crate::grid::{Cell, PyramidPrediction, NUM_KEYPOINTS};
use crate::pnp::{pnp_ransac, Correspondence, PnpResult, RansacParams};
use crate::sampling::{realize_counts_with, round_counts, sample_counts, SamplingParams};

pub const DEFAULT_OBJECTNESS_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountRounding {
    /// Round half up.
    #[default]
    Nearest,
    /// Unbiased stochastic rounding seeded from the RANSAC seed.
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeMode {
    /// Size from the single most confident cell.
    #[default]
    Argmax,
    /// Objectness-weighted mean size over every cell above the threshold.
    ConfidentMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionParams {
    pub objectness_threshold: f64,
    pub sampling: SamplingParams,
    pub ransac: RansacParams,
    pub rounding: CountRounding,
    pub size_mode: SizeMode,
    /// Weight correspondences by the objectness of their cell.
    pub objectness_weights: bool,
    /// Also solve every level on its own.
    pub per_level: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            objectness_threshold: DEFAULT_OBJECTNESS_THRESHOLD,
            sampling: SamplingParams::default(),
            ransac: RansacParams::default(),
            rounding: CountRounding::Nearest,
            size_mode: SizeMode::Argmax,
            objectness_weights: false,
            per_level: true,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        let tau = self.objectness_threshold;
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidParameter(format!("objectness threshold must lie in (0, 1), got {tau}")));
        }
        self.sampling.validate()?;
        self.ransac.validate()
    }
}

/// Standalone solve from one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelEstimate {
    pub level: usize,
    pub cells: Vec<Cell>,
    pub result: Option<PnpResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionResult {
    pub pose: PnpResult,
    pub estimated_size: f64,
    pub anchor: Cell,
    /// Realized per-level counts `n_k`.
    pub counts: Vec<usize>,
    /// Cells that contributed, per level, in decreasing objectness.
    pub cells: Vec<Vec<Cell>>,
    pub per_level: Vec<LevelEstimate>,
}

/// `max(width, height)` of the axis-aligned box around `points`.
pub fn bbox_size(points: &[Point2D]) -> f64 {
    let (mut lo_u, mut hi_u, mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo_u = lo_u.min(p.u);
        hi_u = hi_u.max(p.u);
        lo_v = lo_v.min(p.v);
        hi_v = hi_v.max(p.v);
    }
    (hi_u - lo_u).max(hi_v - lo_v)
}

fn argmax_cell(pred: &PyramidPrediction, tau: f64) -> Result<Cell> {
    let mut best: Option<(Cell, f64)> = None;
    for (cell, p) in pred.iter_cells() {
        // strict comparison keeps the first cell in level/row/col order on ties
        if p.objectness >= tau && best.is_none_or(|(_, o)| p.objectness > o) {
            best = Some((cell, p.objectness));
        }
    }
    best.map(|(c, _)| c).ok_or(Error::NoDetection { threshold: tau })
}

/// Object size in pixels and the anchor cell it came from.
pub fn estimate_size(pred: &PyramidPrediction, params: &FusionParams) -> Result<(f64, Cell)> {
    let tau = params.objectness_threshold;
    let anchor = argmax_cell(pred, tau)?;
    let size = match params.size_mode {
        SizeMode::Argmax => bbox_size(&pred.decode(anchor)?),
        SizeMode::ConfidentMean => {
            let (mut num, mut den) = (0.0, 0.0);
            for (cell, p) in pred.iter_cells() {
                if p.objectness >= tau {
                    num += p.objectness * bbox_size(&pred.decode(cell)?);
                    den += p.objectness;
                }
            }
            num / den
        }
    };
    if !(size > 0.0) || !size.is_finite() {
        return Err(Error::NonPositiveSize(size));
    }
    Ok((size, anchor))
}

/// The `n` most confident cells of `level` at or above the threshold.
/// Ties keep row-major order.
pub fn top_cells(pred: &PyramidPrediction, level: usize, n: usize, tau: f64) -> Vec<Cell> {
    let Some(grid) = pred.levels.get(level) else {
        return Vec::new();
    };
    let mut cells: Vec<(Cell, f64)> = (0..grid.rows)
        .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
        .map(|(r, c)| (Cell::new(level, r, c), grid.get(r, c).objectness))
        .filter(|(_, o)| *o >= tau)
        .collect();
    cells.sort_by(|a, b| b.1.total_cmp(&a.1));
    cells.truncate(n);
    cells.into_iter().map(|(c, _)| c).collect()
}

/// Per-level counts for size `S`.
pub fn plan_counts(size: f64, params: &FusionParams) -> Result<Vec<usize>> {
    let plan = sample_counts(size, &params.sampling)?;
    Ok(match params.rounding {
        CountRounding::Nearest => round_counts(&plan),
        CountRounding::Stochastic => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.ransac.seed);
            rng.set_stream(1);
            realize_counts_with(&plan, &mut rng)
        }
    })
}

/// Selected cells per level and the `8·Σn_k` correspondences they produce.
pub fn gather_correspondences(
    pred: &PyramidPrediction,
    counts: &[usize],
    keypoints: &[Keypoint3D],
    params: &FusionParams,
) -> Result<(Vec<Vec<Cell>>, Vec<Correspondence>)> {
    if keypoints.len() != NUM_KEYPOINTS {
        return Err(Error::InvalidParameter(format!(
            "expected {NUM_KEYPOINTS} keypoints, got {}",
            keypoints.len()
        )));
    }
    let tau = params.objectness_threshold;
    let mut cells = Vec::with_capacity(pred.levels.len());
    let mut corrs = Vec::new();
    for level in 0..pred.levels.len() {
        let n = counts.get(level).copied().unwrap_or(0);
        let chosen = top_cells(pred, level, n, tau);
        for &cell in &chosen {
            let w = if params.objectness_weights { pred.cell(cell).objectness } else { 1.0 };
            for (p, u) in keypoints.iter().zip(pred.decode(cell)?) {
                corrs.push(Correspondence::weighted(*p, u, w));
            }
        }
        cells.push(chosen);
    }
    Ok((cells, corrs))
}

fn solve_level(
    pred: &PyramidPrediction,
    level: usize,
    keypoints: &[Keypoint3D],
    k: &CameraIntrinsics,
    params: &FusionParams,
) -> Result<LevelEstimate> {
    // the plan over a single level puts the whole budget on it
    let solo = SamplingParams {
        reference_sizes: vec![params.sampling.reference_sizes[level]],
        ..params.sampling.clone()
    };
    let solo_params = FusionParams {
        sampling: solo,
        ..params.clone()
    };
    let n = plan_counts(params.sampling.reference_sizes[level], &solo_params)?[0];
    let mut counts = vec![0; pred.levels.len()];
    counts[level] = n;
    let (cells, corrs) = gather_correspondences(pred, &counts, keypoints, params)?;
    let cells = cells.into_iter().nth(level).unwrap_or_default();
    let (result, error) = match pnp_ransac(&corrs, k, &params.ransac) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(LevelEstimate {
        level,
        cells,
        result,
        error,
    })
}

pub fn fuse(
    pred: &PyramidPrediction,
    keypoints: &[Keypoint3D],
    k: &CameraIntrinsics,
    params: &FusionParams,
) -> Result<FusionResult> {
    params.validate()?;
    pred.validate()?;
    if params.sampling.reference_sizes.len() != pred.levels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} reference sizes for {} pyramid levels",
            params.sampling.reference_sizes.len(),
            pred.levels.len()
        )));
    }
    let (size, anchor) = estimate_size(pred, params)?;
    let counts = plan_counts(size, params)?;
    let (cells, corrs) = gather_correspondences(pred, &counts, keypoints, params)?;
    let pose = pnp_ransac(&corrs, k, &params.ransac)?;
    let per_level = if params.per_level {
        (0..pred.levels.len())
            .map(|l| solve_level(pred, l, keypoints, k, params))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(FusionResult {
        pose,
        estimated_size: size,
        anchor,
        counts,
        cells,
        per_level,
    })
}
