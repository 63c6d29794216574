//! Multi-level prediction grids.
//!
//! Each pyramid level is a dense row-major grid of cells. A cell carries an
//! objectness score and eight 2D offsets, one per bounding-box corner,
//! measured from the cell centre in units of the level stride.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point2D;

pub const NUM_KEYPOINTS: usize = 8;

pub const DEFAULT_STRIDES: [u32; 5] = [8, 16, 32, 64, 128];
pub const DEFAULT_REFERENCE_SIZES: [f64; 5] = [16.0, 32.0, 64.0, 128.0, 256.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    /// Pixels per cell.
    pub stride: u32,
    /// Object size (pixels) this level is tuned for.
    pub reference_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidSpec {
    pub image_width: u32,
    pub image_height: u32,
    pub levels: Vec<LevelSpec>,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec::new(512, 512, &DEFAULT_STRIDES, &DEFAULT_REFERENCE_SIZES).unwrap()
    }
}

impl PyramidSpec {
    pub fn new(width: u32, height: u32, strides: &[u32], reference_sizes: &[f64]) -> Result<Self> {
        if strides.len() != reference_sizes.len() {
            return Err(Error::InvalidParameter(format!(
                "{} strides but {} reference sizes",
                strides.len(),
                reference_sizes.len()
            )));
        }
        let spec = PyramidSpec {
            image_width: width,
            image_height: height,
            levels: strides
                .iter()
                .zip(reference_sizes)
                .map(|(&stride, &reference_size)| LevelSpec {
                    stride,
                    reference_size,
                })
                .collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::InvalidParameter("image size must be non-zero".into()));
        }
        if self.levels.is_empty() {
            return Err(Error::InvalidParameter("pyramid needs at least one level".into()));
        }
        for l in &self.levels {
            if l.stride == 0 || !(l.reference_size > 0.0) || !l.reference_size.is_finite() {
                return Err(Error::InvalidParameter(format!("invalid level {l:?}")));
            }
        }
        for w in self.levels.windows(2) {
            if w[1].stride <= w[0].stride || w[1].reference_size <= w[0].reference_size {
                return Err(Error::InvalidParameter(
                    "strides and reference sizes must strictly increase with level".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, level: usize) -> Result<&LevelSpec> {
        self.levels.get(level).ok_or(Error::NoSuchLevel(level))
    }

    /// `(rows, cols)` of a level.
    pub fn grid_dims(&self, level: usize) -> Result<(usize, usize)> {
        let s = self.level(level)?.stride;
        Ok((
            self.image_height.div_ceil(s) as usize,
            self.image_width.div_ceil(s) as usize,
        ))
    }

    pub fn reference_sizes(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.reference_size).collect()
    }

    fn check_cell(&self, level: usize, row: usize, col: usize) -> Result<f64> {
        let (rows, cols) = self.grid_dims(level)?;
        if row >= rows || col >= cols {
            return Err(Error::OutOfBounds {
                level,
                row,
                col,
                rows,
                cols,
            });
        }
        Ok(self.levels[level].stride as f64)
    }
}

/// Address of one cell; `level` is zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub const fn new(level: usize, row: usize, col: usize) -> Self {
        Cell { level, row, col }
    }
}

pub fn cell_center(spec: &PyramidSpec, level: usize, row: usize, col: usize) -> Result<Point2D> {
    let stride = spec.check_cell(level, row, col)?;
    Ok(Point2D::new(
        (col as f64 + 0.5) * stride,
        (row as f64 + 0.5) * stride,
    ))
}

pub fn decode_keypoints(
    spec: &PyramidSpec,
    level: usize,
    row: usize,
    col: usize,
    pred: &CellPrediction,
) -> Result<[Point2D; NUM_KEYPOINTS]> {
    let stride = spec.check_cell(level, row, col)?;
    let c = cell_center(spec, level, row, col)?;
    Ok(pred
        .offsets
        .map(|[du, dv]| Point2D::new(c.u + du * stride, c.v + dv * stride)))
}

pub fn encode_keypoints(
    spec: &PyramidSpec,
    level: usize,
    row: usize,
    col: usize,
    targets: &[Point2D; NUM_KEYPOINTS],
) -> Result<[[f64; 2]; NUM_KEYPOINTS]> {
    let stride = spec.check_cell(level, row, col)?;
    let c = cell_center(spec, level, row, col)?;
    Ok(targets.map(|t| [(t.u - c.u) / stride, (t.v - c.v) / stride]))
}

/// Objectness plus eight stride-normalized corner offsets.
///
/// Serialized as a flat array `[objectness, du1, dv1, ..., du8, dv8]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 17]", into = "[f64; 17]")]
pub struct CellPrediction {
    pub objectness: f64,
    pub offsets: [[f64; 2]; NUM_KEYPOINTS],
}

impl From<[f64; 17]> for CellPrediction {
    fn from(a: [f64; 17]) -> Self {
        let mut offsets = [[0.0; 2]; NUM_KEYPOINTS];
        for (i, o) in offsets.iter_mut().enumerate() {
            *o = [a[1 + 2 * i], a[2 + 2 * i]];
        }
        CellPrediction {
            objectness: a[0],
            offsets,
        }
    }
}

impl From<CellPrediction> for [f64; 17] {
    fn from(c: CellPrediction) -> Self {
        let mut a = [0.0; 17];
        a[0] = c.objectness;
        for (i, o) in c.offsets.iter().enumerate() {
            a[1 + 2 * i] = o[0];
            a[2 + 2 * i] = o[1];
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelGrid {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<CellPrediction>,
}

impl LevelGrid {
    pub fn get(&self, row: usize, col: usize) -> &CellPrediction {
        &self.cells[row * self.cols + col]
    }

    pub fn get_mut(&mut self, row: usize, col: usize) -> &mut CellPrediction {
        &mut self.cells[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidPrediction {
    pub spec: PyramidSpec,
    pub levels: Vec<LevelGrid>,
}

impl PyramidPrediction {
    /// All-zero prediction shaped after `spec`.
    pub fn zeros(spec: &PyramidSpec) -> Result<Self> {
        spec.validate()?;
        let levels = (0..spec.num_levels())
            .map(|k| {
                let (rows, cols) = spec.grid_dims(k)?;
                Ok(LevelGrid {
                    rows,
                    cols,
                    cells: vec![CellPrediction::default(); rows * cols],
                })
            })
            .collect::<Result<_>>()?;
        Ok(PyramidPrediction {
            spec: spec.clone(),
            levels,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.levels.len() != self.spec.num_levels() {
            return Err(Error::Parse(format!(
                "prediction has {} levels, spec has {}",
                self.levels.len(),
                self.spec.num_levels()
            )));
        }
        for (k, grid) in self.levels.iter().enumerate() {
            let (rows, cols) = self.spec.grid_dims(k)?;
            if grid.rows != rows || grid.cols != cols || grid.cells.len() != rows * cols {
                return Err(Error::Parse(format!(
                    "level {} grid is {}x{} with {} cells, expected {rows}x{cols}",
                    k + 1,
                    grid.rows,
                    grid.cols,
                    grid.cells.len()
                )));
            }
            for c in &grid.cells {
                let finite = c.objectness.is_finite() && c.offsets.iter().flatten().all(|x| x.is_finite());
                if !finite || !(0.0..=1.0).contains(&c.objectness) {
                    return Err(Error::Parse(format!(
                        "level {} holds an invalid cell {c:?}",
                        k + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cell(&self, cell: Cell) -> &CellPrediction {
        self.levels[cell.level].get(cell.row, cell.col)
    }

    pub fn decode(&self, cell: Cell) -> Result<[Point2D; NUM_KEYPOINTS]> {
        let pred = self
            .levels
            .get(cell.level)
            .ok_or(Error::NoSuchLevel(cell.level))?;
        if cell.row >= pred.rows || cell.col >= pred.cols {
            return Err(Error::OutOfBounds {
                level: cell.level,
                row: cell.row,
                col: cell.col,
                rows: pred.rows,
                cols: pred.cols,
            });
        }
        decode_keypoints(&self.spec, cell.level, cell.row, cell.col, pred.get(cell.row, cell.col))
    }

    /// Iterates over every cell in level, row, column order.
    pub fn iter_cells(&self) -> impl Iterator<Item = (Cell, &CellPrediction)> + '_ {
        self.levels.iter().enumerate().flat_map(|(k, g)| {
            g.cells
                .iter()
                .enumerate()
                .map(move |(i, c)| (Cell::new(k, i / g.cols, i % g.cols), c))
        })
    }

    /// One line per cell: `level,row,col,objectness,du1,dv1,...,du8,dv8`,
    /// with one-based level numbers.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,row,col,objectness");
        for i in 1..=NUM_KEYPOINTS {
            let _ = write!(out, ",du{i},dv{i}");
        }
        out.push('\n');
        for (cell, c) in self.iter_cells() {
            let _ = write!(out, "{},{},{},{}", cell.level + 1, cell.row, cell.col, c.objectness);
            for [du, dv] in c.offsets {
                let _ = write!(out, ",{du},{dv}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(spec: &PyramidSpec, text: &str) -> Result<Self> {
        let mut pred = PyramidPrediction::zeros(spec)?;
        let mut seen = 0usize;
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 + 2 * NUM_KEYPOINTS {
                return Err(Error::Parse(format!("line {}: expected 20 fields", lineno + 1)));
            }
            let int = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            };
            let float = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
            };
            let level = int(fields[0])?;
            if level == 0 || level > pred.levels.len() {
                return Err(Error::NoSuchLevel(level));
            }
            let (row, col) = (int(fields[1])?, int(fields[2])?);
            spec.check_cell(level - 1, row, col)?;
            let mut raw = [0.0; 17];
            for (dst, src) in raw.iter_mut().zip(&fields[3..]) {
                *dst = float(src)?;
            }
            *pred.levels[level - 1].get_mut(row, col) = CellPrediction::from(raw);
            seen += 1;
        }
        let total: usize = pred.levels.iter().map(|g| g.cells.len()).sum();
        if seen != total {
            return Err(Error::Parse(format!("csv holds {seen} cells, expected {total}")));
        }
        pred.validate()?;
        Ok(pred)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelMask {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<bool>,
}

impl LevelMask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    /// Masked cells as `(row, col)` in row-major order.
    pub fn masked_cells(&self) -> Vec<(usize, usize)> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.cols, i % self.cols))
            .collect()
    }
}

/// Per-level cell membership in the object region.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub levels: Vec<LevelMask>,
}

impl SegmentationMask {
    pub fn empty(spec: &PyramidSpec) -> Result<Self> {
        let levels = (0..spec.num_levels())
            .map(|k| {
                let (rows, cols) = spec.grid_dims(k)?;
                Ok(LevelMask {
                    rows,
                    cols,
                    cells: vec![false; rows * cols],
                })
            })
            .collect::<Result<_>>()?;
        Ok(SegmentationMask { levels })
    }

    pub fn is_empty(&self) -> bool {
        self.levels.iter().all(|l| l.count() == 0)
    }
}

fn cross(o: &Point2D, a: &Point2D, b: &Point2D) -> f64 {
    (a.u - o.u) * (b.v - o.v) - (a.v - o.v) * (b.u - o.u)
}

/// Counter-clockwise convex hull (in a y-up sense) via the monotone chain.
pub fn convex_hull(points: &[Point2D]) -> Vec<Point2D> {
    let mut pts: Vec<Point2D> = points.iter().copied().filter(Point2D::is_finite).collect();
    pts.sort_by(|a, b| a.u.total_cmp(&b.u).then(a.v.total_cmp(&b.v)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2D> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point2D>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for p in iter {
            while hull.len() >= start + 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(*p);
        }
        hull.pop();
    }
    hull
}

pub fn polygon_area(poly: &[Point2D]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let twice: f64 = (0..poly.len())
        .map(|i| {
            let (a, b) = (&poly[i], &poly[(i + 1) % poly.len()]);
            a.u * b.v - b.u * a.v
        })
        .sum();
    0.5 * twice.abs()
}

fn inside_convex(hull: &[Point2D], p: &Point2D) -> bool {
    (0..hull.len()).all(|i| cross(&hull[i], &hull[(i + 1) % hull.len()], p) >= 0.0)
}

/// Marks, at every level, the cells whose centres fall inside the convex hull
/// of `points` (boundary included).
pub fn rasterize_mask(spec: &PyramidSpec, points: &[Point2D]) -> Result<SegmentationMask> {
    let hull = convex_hull(points);
    let area = polygon_area(&hull);
    if hull.len() < 3 || area < 1e-9 {
        return Err(Error::DegenerateHull { area });
    }
    let (umin, umax) = hull
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.u), hi.max(p.u)));
    let (vmin, vmax) = hull
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.v), hi.max(p.v)));
    let mut mask = SegmentationMask::empty(spec)?;
    for (k, lm) in mask.levels.iter_mut().enumerate() {
        let s = spec.levels[k].stride as f64;
        // centres (i + 0.5) s inside [lo, hi]
        let range = |lo: f64, hi: f64, n: usize| {
            let first = ((lo / s) - 0.5).ceil().max(0.0);
            let last = ((hi / s) - 0.5).floor().min(n as f64 - 1.0);
            if last < first {
                0..0
            } else {
                first as usize..last as usize + 1
            }
        };
        for row in range(vmin, vmax, lm.rows) {
            for col in range(umin, umax, lm.cols) {
                let c = Point2D::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
                if inside_convex(&hull, &c) {
                    lm.cells[row * lm.cols + col] = true;
                }
            }
        }
    }
    Ok(mask)
}
