//! Pose error metrics.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Keypoint3D, Pose, Vec3};

/// Model points used by ADD/ADI, with their diameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCloud {
    pub points: Vec<Keypoint3D>,
    pub diameter: f64,
}

impl ModelCloud {
    /// Computes the diameter as the largest pairwise distance.
    pub fn new(points: Vec<Keypoint3D>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidParameter("a model cloud needs at least two points".into()));
        }
        if points.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
            return Err(Error::InvalidParameter("model cloud has non-finite points".into()));
        }
        let mut diameter = 0.0f64;
        for (i, a) in points.iter().enumerate() {
            for b in &points[i + 1..] {
                diameter = diameter.max((a - b).norm());
            }
        }
        if !(diameter > 0.0) {
            return Err(Error::InvalidParameter("model cloud has zero extent".into()));
        }
        Ok(ModelCloud { points, diameter })
    }

    /// Points on the surface of an axis-aligned box centred at the origin,
    /// `per_edge` samples along each edge.
    pub fn box_surface(extent: Vec3, per_edge: usize) -> Result<Self> {
        let n = per_edge.max(2);
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    let on_face = [i, j, l].iter().any(|&x| x == 0 || x == n - 1);
                    if !on_face {
                        continue;
                    }
                    let f = |x: usize, e: f64| (x as f64 / (n - 1) as f64 - 0.5) * e;
                    pts.push(Keypoint3D::new(f(i, extent.x), f(j, extent.y), f(l, extent.z)));
                }
            }
        }
        ModelCloud::new(pts)
    }

    /// Cube whose space diagonal equals `diameter`.
    pub fn cube(diameter: f64, per_edge: usize) -> Result<Self> {
        let side = diameter / 3f64.sqrt();
        ModelCloud::box_surface(Vec3::repeat(side), per_edge)
    }

    /// Corners of the axis-aligned bounding box, ordered by the bit pattern
    /// `(x, y, z)` of the corner index.
    pub fn bbox_corners(&self) -> [Keypoint3D; 8] {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(&p.coords);
            hi = hi.sup(&p.coords);
        }
        std::array::from_fn(|i| {
            let pick = |b: usize, axis: usize| if i >> b & 1 == 1 { hi[axis] } else { lo[axis] };
            Keypoint3D::new(pick(0, 0), pick(1, 1), pick(2, 2))
        })
    }

    /// Vertices of a Wavefront OBJ file; everything but `v` lines is ignored.
    pub fn from_obj<R: BufRead>(reader: R) -> Result<Self> {
        let mut pts = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let mut it = line.split_whitespace();
            if it.next() != Some("v") {
                continue;
            }
            let xyz: Vec<f64> = it
                .take(3)
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("obj line {}: {e}", i + 1)))?;
            if xyz.len() != 3 {
                return Err(Error::Parse(format!("obj line {}: vertex needs 3 coordinates", i + 1)));
            }
            pts.push(Keypoint3D::new(xyz[0], xyz[1], xyz[2]));
        }
        ModelCloud::new(pts)
    }

    /// Vertices of an ASCII PLY file. Only the `x`, `y`, `z` properties of the
    /// `vertex` element are read.
    pub fn from_ply<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let mut next = || -> Result<Option<String>> { lines.next().transpose().map_err(Error::from) };
        if next()?.as_deref().map(str::trim) != Some("ply") {
            return Err(Error::Parse("missing ply magic".into()));
        }
        let mut vertex_count = None;
        let mut in_vertex = false;
        let mut props: Vec<String> = Vec::new();
        // elements declared before `vertex` that we need to skip
        let mut before: Vec<usize> = Vec::new();
        loop {
            let line = next()?.ok_or_else(|| Error::Parse("ply header not terminated".into()))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["format", fmt, ..] if *fmt != "ascii" => {
                    return Err(Error::Parse(format!("unsupported ply format {fmt}")));
                }
                ["element", name, count] => {
                    let count: usize = count.parse().map_err(|e| Error::Parse(format!("ply element count: {e}")))?;
                    in_vertex = *name == "vertex";
                    if in_vertex {
                        vertex_count = Some(count);
                    } else if vertex_count.is_none() {
                        before.push(count);
                    }
                }
                ["property", .., name] if in_vertex => props.push(name.to_string()),
                ["end_header"] => break,
                _ => {}
            }
        }
        let count = vertex_count.ok_or_else(|| Error::Parse("ply has no vertex element".into()))?;
        let col = |n: &str| {
            props
                .iter()
                .position(|p| p == n)
                .ok_or_else(|| Error::Parse(format!("ply vertex lacks property {n}")))
        };
        let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
        for _ in 0..before.iter().sum::<usize>() {
            next()?;
        }
        let mut pts = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next()?.ok_or_else(|| Error::Parse("ply ended early".into()))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse(format!("ply vertex: {e}")))?;
            let get = |i: usize| vals.get(i).copied().ok_or_else(|| Error::Parse("short ply vertex row".into()));
            pts.push(Keypoint3D::new(get(ix)?, get(iy)?, get(iz)?));
        }
        ModelCloud::new(pts)
    }
}

/// Mean distance between corresponding transformed model points.
pub fn add_distance(gt: &Pose, est: &Pose, cloud: &ModelCloud) -> f64 {
    let sum: f64 = cloud
        .points
        .iter()
        .map(|p| (gt.transform_point(p) - est.transform_point(p)).norm())
        .sum();
    sum / cloud.points.len() as f64
}

/// Mean distance from each ground-truth-transformed point to the nearest
/// estimate-transformed point. Brute force, `O(n²)`.
pub fn adi_distance(gt: &Pose, est: &Pose, cloud: &ModelCloud) -> f64 {
    let moved: Vec<Vec3> = cloud.points.iter().map(|p| est.transform_point(p)).collect();
    let sum: f64 = cloud
        .points
        .iter()
        .map(|p| {
            let g = gt.transform_point(p);
            moved
                .iter()
                .map(|m| (g - m).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    sum / cloud.points.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub samples: usize,
    /// Set when there were no samples; `accuracy` is then 0.
    pub empty: bool,
}

/// Fraction of errors strictly below `threshold_frac · diameter`.
pub fn adi_accuracy(errors: &[f64], diameter: f64, threshold_frac: f64) -> Result<Accuracy> {
    if !(diameter > 0.0) {
        return Err(Error::InvalidParameter(format!("diameter must be positive, got {diameter}")));
    }
    if errors.is_empty() {
        return Ok(Accuracy {
            accuracy: 0.0,
            samples: 0,
            empty: true,
        });
    }
    let limit = threshold_frac * diameter;
    let hits = errors.iter().filter(|&&e| e < limit).count();
    Ok(Accuracy {
        accuracy: hits as f64 / errors.len() as f64,
        samples: errors.len(),
        empty: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedScore {
    /// Rotation error in radians.
    pub e_q: f64,
    /// Translation error relative to the ground-truth distance.
    pub e_t: f64,
    pub total: f64,
}

pub fn speed_score(gt: &Pose, est: &Pose) -> Result<SpeedScore> {
    let dist = gt.translation.norm();
    if !(dist > 0.0) {
        return Err(Error::ZeroTranslation);
    }
    let a = gt.rotation.quaternion().coords;
    let mut b = est.rotation.quaternion().coords;
    if a.dot(&b) < 0.0 {
        b = -b;
    }
    let e_q = 4.0 * (a - b).norm().atan2((a + b).norm());
    let e_t = (gt.translation - est.translation).norm() / dist;
    Ok(SpeedScore {
        e_q,
        e_t,
        total: e_q + e_t,
    })
}

/// Half-open distance bands, in multiples of the object diameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthBands {
    pub names: Vec<String>,
    pub bounds: Vec<(f64, f64)>,
}

impl Default for DepthBands {
    fn default() -> Self {
        DepthBands {
            names: vec!["near".into(), "medium".into(), "far".into()],
            bounds: vec![(1.0, 4.0), (4.0, 7.0), (7.0, 10.0)],
        }
    }
}

impl DepthBands {
    pub fn new(names: Vec<String>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        let bands = DepthBands { names, bounds };
        bands.validate()?;
        Ok(bands)
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.bounds.len() || self.bounds.is_empty() {
            return Err(Error::InvalidParameter("each band needs exactly one name".into()));
        }
        if self.bounds.iter().any(|(lo, hi)| !(lo < hi)) || self.bounds.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::InvalidParameter("bands must be increasing and non-overlapping".into()));
        }
        Ok(())
    }

    /// Index of the band holding `depth_over_d`, if any.
    pub fn band_of(&self, depth_over_d: f64) -> Option<usize> {
        self.bounds
            .iter()
            .position(|&(lo, hi)| depth_over_d >= lo && depth_over_d < hi)
    }
}

/// Splits sample indices by `‖t_gt‖ / d`.
pub fn bucket_by_depth(depth_over_d: &[f64], bands: &DepthBands) -> Result<Vec<Vec<usize>>> {
    bands.validate()?;
    let mut out = vec![Vec::new(); bands.bounds.len()];
    for (index, &d) in depth_over_d.iter().enumerate() {
        let b = bands.band_of(d).ok_or(Error::OutOfRange {
            index,
            depth_over_d: d,
        })?;
        out[b].push(index);
    }
    Ok(out)
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scene_id: u64,
    pub depth_over_d: f64,
    pub adi: f64,
    pub add: f64,
    pub e_q: f64,
    pub e_t: f64,
}

pub const METRICS_CSV_HEADER: &str = "scene_id,depth_over_d,adi,add,e_q,e_t";

impl MetricsRow {
    pub fn evaluate(scene_id: u64, gt: &Pose, est: &Pose, cloud: &ModelCloud) -> Result<Self> {
        let speed = speed_score(gt, est)?;
        Ok(MetricsRow {
            scene_id,
            depth_over_d: gt.translation.norm() / cloud.diameter,
            adi: adi_distance(gt, est, cloud),
            add: add_distance(gt, est, cloud),
            e_q: speed.e_q,
            e_t: speed.e_t,
        })
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.scene_id, self.depth_over_d, self.adi, self.add, self.e_q, self.e_t
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::uniform_rotation;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn tri() -> ModelCloud {
        ModelCloud::new(vec![
            Keypoint3D::new(0.0, 0.0, 0.0),
            Keypoint3D::new(1.0, 0.0, 0.0),
            Keypoint3D::new(0.0, 2.0, 0.5),
        ])
        .unwrap()
    }

    fn square() -> ModelCloud {
        ModelCloud::new(vec![
            Keypoint3D::new(1.0, 0.0, 0.0),
            Keypoint3D::new(0.0, 1.0, 0.0),
            Keypoint3D::new(-1.0, 0.0, 0.0),
            Keypoint3D::new(0.0, -1.0, 0.0),
        ])
        .unwrap()
    }

    #[test]
    fn cloud_diameter() {
        assert_relative_eq!(tri().diameter, (1.0f64 + 4.0 + 0.25).sqrt(), epsilon = 1e-12);
        assert!(ModelCloud::new(vec![Keypoint3D::origin()]).is_err());
        assert!(ModelCloud::new(vec![Keypoint3D::origin(); 3]).is_err());
        let c = ModelCloud::cube(2.0, 4).unwrap();
        assert_relative_eq!(c.diameter, 2.0, epsilon = 1e-12);
        assert_eq!(c.points.len(), 4 * 4 * 4 - 2 * 2 * 2);
        let corners = c.bbox_corners();
        let h = 1.0 / 3f64.sqrt();
        assert_relative_eq!(corners[0].coords, Vec3::repeat(-h), epsilon = 1e-12);
        assert_relative_eq!(corners[7].coords, Vec3::repeat(h), epsilon = 1e-12);
        assert_relative_eq!(corners[1].coords, Vec3::new(h, -h, -h), epsilon = 1e-12);
    }

    #[test]
    fn add_examples() {
        let gt = Pose::from_axis_angle(Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.0, 0.0, 5.0));
        assert_eq!(add_distance(&gt, &gt, &tri()), 0.0);
        let dt = Vec3::new(0.3, -0.1, 0.2);
        let shifted = Pose::new(gt.rotation, gt.translation + dt);
        assert!((add_distance(&gt, &shifted, &tri()) - dt.norm()).abs() < 1e-12);
    }

    #[test]
    fn add_matches_hand_summation() {
        let gt = Pose::from_axis_angle(Vec3::new(0.0, 0.0, FRAC_PI_2), Vec3::new(0.0, 0.0, 5.0));
        let est = Pose::from_translation(Vec3::new(0.0, 0.0, 5.0));
        // rotating by 90° about z moves (1,0,0) to (0,1,0): distance √2;
        // (0,2,0.5) to (-2,0,0.5): distance 2√2; the origin stays put
        let want = (2f64.sqrt() + 2.0 * 2f64.sqrt()) / 3.0;
        assert_relative_eq!(add_distance(&gt, &est, &tri()), want, epsilon = 1e-12);
    }

    #[test]
    fn adi_handles_symmetry() {
        let gt = Pose::from_translation(Vec3::new(0.0, 0.0, 4.0));
        let rot = Pose::from_axis_angle(Vec3::new(0.0, 0.0, FRAC_PI_2), Vec3::new(0.0, 0.0, 4.0));
        assert!(adi_distance(&gt, &rot, &square()) < 1e-12);
        assert_relative_eq!(add_distance(&gt, &rot, &square()), 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(adi_distance(&gt, &gt, &square()), 0.0);
    }

    #[test]
    fn adi_bounded_by_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cloud = ModelCloud::cube(1.0, 3).unwrap();
        for _ in 0..500 {
            let a = Pose::new(uniform_rotation(&mut rng), Vec3::new(rng.random(), rng.random(), 5.0));
            let b = Pose::new(uniform_rotation(&mut rng), Vec3::new(rng.random(), rng.random(), 5.0));
            assert!(adi_distance(&a, &b, &cloud) <= add_distance(&a, &b, &cloud) + 1e-12);
        }
    }

    #[test]
    fn distances_invariant_under_common_camera_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = ModelCloud::cube(1.0, 3).unwrap();
        for _ in 0..50 {
            let a = Pose::new(uniform_rotation(&mut rng), Vec3::new(0.1, 0.2, 5.0));
            let b = Pose::new(uniform_rotation(&mut rng), Vec3::new(-0.1, 0.3, 6.0));
            let m = Pose::new(uniform_rotation(&mut rng), Vec3::new(1.0, -2.0, 0.5));
            let (ma, mb) = (m.compose(&a), m.compose(&b));
            assert_relative_eq!(add_distance(&a, &b, &cloud), add_distance(&ma, &mb, &cloud), epsilon = 1e-12);
            assert_relative_eq!(adi_distance(&a, &b, &cloud), adi_distance(&ma, &mb, &cloud), epsilon = 1e-12);
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(adi_accuracy(&[0.0; 4], 1.0, 0.1).unwrap().accuracy, 1.0);
        assert_eq!(adi_accuracy(&[0.05, 0.15], 1.0, 0.1).unwrap().accuracy, 0.5);
        let empty = adi_accuracy(&[], 1.0, 0.1).unwrap();
        assert!(empty.empty && empty.accuracy == 0.0);
        assert!(adi_accuracy(&[0.1], 0.0, 0.1).is_err());
        // strictly below
        assert_eq!(adi_accuracy(&[0.1], 1.0, 0.1).unwrap().accuracy, 0.0);
    }

    #[test]
    fn speed_examples() {
        let gt = Pose::from_axis_angle(Vec3::new(0.3, 0.1, -0.2), Vec3::new(0.0, 0.0, 5.0));
        assert_eq!(speed_score(&gt, &gt).unwrap(), SpeedScore { e_q: 0.0, e_t: 0.0, total: 0.0 });
        let flipped = Pose::new(nalgebra::UnitQuaternion::from_scaled_axis(Vec3::new(0.0, PI, 0.0)) * gt.rotation, gt.translation);
        assert_relative_eq!(speed_score(&gt, &flipped).unwrap().e_q, PI, epsilon = 1e-6);
        let moved = Pose::new(gt.rotation, Vec3::new(0.0, 0.0, 5.5));
        assert_relative_eq!(speed_score(&gt, &moved).unwrap().e_t, 0.1, epsilon = 1e-12);
        assert_eq!(speed_score(&Pose::identity(), &gt), Err(Error::ZeroTranslation));
    }

    #[test]
    fn speed_ignores_quaternion_sign() {
        let a = Pose::from_axis_angle(Vec3::new(0.3, 0.1, -0.2), Vec3::new(0.0, 1.0, 5.0));
        let b = Pose::from_axis_angle(Vec3::new(0.2, 0.0, 0.1), Vec3::new(0.0, 1.0, 5.0));
        let [w, x, y, z] = b.quaternion_wxyz();
        let neg = Pose::new(
            nalgebra::UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(-w, -x, -y, -z)),
            b.translation,
        );
        let s1 = speed_score(&a, &b).unwrap();
        let s2 = speed_score(&a, &neg).unwrap();
        assert_relative_eq!(s1.e_q, s2.e_q, epsilon = 1e-12);
        assert_relative_eq!(s1.e_q, a.rotation_angle_to(&b), epsilon = 1e-9);
    }

    #[test]
    fn speed_resolves_tiny_rotations() {
        let gt = Pose::from_axis_angle(Vec3::new(-1.1, 0.4, 2.0), Vec3::new(0.2, 0.0, 3.0));
        for angle in [1e-9, 1e-6, 1e-3] {
            let nudge = nalgebra::UnitQuaternion::from_scaled_axis(Vec3::new(0.0, angle, 0.0));
            let est = Pose::new(gt.rotation * nudge, gt.translation);
            assert_relative_eq!(speed_score(&gt, &est).unwrap().e_q, angle, max_relative = 1e-6);
        }
    }

    #[test]
    fn bucketing() {
        let bands = DepthBands::default();
        let b = bucket_by_depth(&[2.5, 4.0, 9.99, 1.0, 6.999], &bands).unwrap();
        assert_eq!(b, vec![vec![0, 3], vec![1, 4], vec![2]]);
        assert!(matches!(
            bucket_by_depth(&[2.0, 10.0], &bands),
            Err(Error::OutOfRange { index: 1, .. })
        ));
        assert!(DepthBands::new(vec!["a".into(), "b".into()], vec![(1.0, 5.0), (4.0, 7.0)]).is_err());
    }

    #[test]
    fn bucketing_uniform_populations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let depths: Vec<f64> = (0..10_000).map(|_| rng.random_range(1.0..10.0)).collect();
        let b = bucket_by_depth(&depths, &DepthBands::default()).unwrap();
        for band in b {
            let frac = band.len() as f64 / 10_000.0;
            assert!((frac - 1.0 / 3.0).abs() < 0.02, "{frac}");
        }
    }

    #[test]
    fn obj_and_ply_loaders() {
        let obj = "# cube\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 0 2 0.5\nf 1 2 3\n";
        let c = ModelCloud::from_obj(obj.as_bytes()).unwrap();
        assert_eq!(c, tri());
        let ply = "ply\nformat ascii 1.0\ncomment x\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 255\n1 0 0 255\n0 2 0.5 255\n3 0 1 2\n";
        assert_eq!(ModelCloud::from_ply(ply.as_bytes()).unwrap(), tri());
        let bin = "ply\nformat binary_little_endian 1.0\nend_header\n";
        assert!(ModelCloud::from_ply(bin.as_bytes()).is_err());
        assert!(ModelCloud::from_obj("v 1 2\n".as_bytes()).is_err());
    }

    #[test]
    fn metrics_row() {
        let gt = Pose::from_translation(Vec3::new(0.0, 0.0, 5.0));
        let cloud = ModelCloud::cube(1.0, 2).unwrap();
        let r = MetricsRow::evaluate(3, &gt, &gt, &cloud).unwrap();
        assert_eq!(r.csv_line(), "3,5,0,0,0,0");
    }
}
