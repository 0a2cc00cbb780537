//! Value types and the exact geometric rules of view-constrained completion.
//!
//! A partial scan seen from a camera defines one ray per observed point. New
//! points may only travel *away* from the camera along those rays, which keeps
//! them inside the region shadowed by the observation. Local refinement moves
//! are bounded per dimension by a box whose size grows with the distance a
//! point has already travelled along its ray.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Directions shorter than this are treated as a point sitting on the camera.
pub const DEGENERATE_RAY_LENGTH: f64 = 1e-12;

/// Default half-angle of the per-ray cone used by [`ShadowVolume`].
pub const DEFAULT_ANGULAR_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// Directions share the point representation.
pub type Vector3 = Point3;

impl Point3 {
    pub const ZERO: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Squared Euclidean distance, summed in x, y, z order.
    ///
    /// Every nearest-neighbour routine in the crate goes through this so
    /// that accelerated and brute-force paths agree bit for bit.
    #[inline]
    pub fn dist2(self, o: Self) -> f64 {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        let dz = self.z - o.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn normalized(self) -> Self {
        self * (1.0 / self.norm())
    }

    #[inline]
    pub fn get(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    /// Angle between two non-zero vectors, robust near 0 and pi.
    pub fn angle_to(self, o: Self) -> f64 {
        self.cross(o).norm().atan2(self.dot(o))
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Point3 {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

/// Ordered list of finite points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    /// Builds a cloud, rejecting NaN or infinite coordinates.
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(index) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point3> {
        self.points.iter()
    }

    /// Axis-aligned bounds as `(min, max)`, `None` for an empty cloud.
    pub fn bounding_box(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (
                Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z)),
                Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z)),
            )
        }))
    }

    /// Each point repeated `k` times consecutively.
    pub fn repeat_each(&self, k: usize) -> PointCloud {
        let points = self
            .points
            .iter()
            .flat_map(|&p| std::iter::repeat_n(p, k))
            .collect();
        PointCloud { points }
    }

    /// Points at the given ids, in id order given.
    pub fn select(&self, ids: &[usize]) -> PointCloud {
        PointCloud {
            points: ids.iter().map(|&i| self.points[i]).collect(),
        }
    }

    /// Concatenation of two clouds.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        PointCloud { points }
    }
}

impl std::ops::Index<usize> for PointCloud {
    type Output = Point3;
    fn index(&self, i: usize) -> &Point3 {
        &self.points[i]
    }
}

impl<'a> IntoIterator for &'a PointCloud {
    type Item = &'a Point3;
    type IntoIter = std::slice::Iter<'a, Point3>;
    fn into_iter(self) -> Self::IntoIter {
        self.points.iter()
    }
}

/// Camera position plus one un-normalized ray `p - cam` per observed point.
#[derive(Debug, Clone, PartialEq)]
pub struct RayBundle {
    cam: Point3,
    origins: PointCloud,
    directions: Vec<Vector3>,
}

impl RayBundle {
    pub fn cam(&self) -> Point3 {
        self.cam
    }

    pub fn origins(&self) -> &PointCloud {
        &self.origins
    }

    pub fn directions(&self) -> &[Vector3] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Builds one ray from the camera through every scan point.
pub fn build_rays(cam: Point3, scan: &PointCloud) -> Result<RayBundle> {
    if !cam.is_finite() {
        return Err(Error::NonFinite { index: 0 });
    }
    let directions = scan
        .iter()
        .enumerate()
        .map(|(index, &p)| {
            let d = p - cam;
            let length = d.norm();
            if length < DEGENERATE_RAY_LENGTH {
                Err(Error::DegenerateRay { index, length })
            } else {
                Ok(d)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RayBundle {
        cam,
        origins: scan.clone(),
        directions,
    })
}

/// Row-major `rows x cols` matrix of ray offsets, one row per ray.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl OffsetMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                what: "offset matrix values",
                expected: rows * cols,
                found: values.len(),
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.cols + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// First negative entry as `(row, col, value)`.
    pub fn first_negative(&self) -> Option<(usize, usize, f64)> {
        self.values
            .iter()
            .position(|&v| v < 0.0)
            .map(|i| (i / self.cols, i % self.cols, self.values[i]))
    }
}

/// Moves `L` copies of every scan point along its ray.
///
/// Output point `i * L + l` is `p_i + d_il * r_i`; the offset scales the
/// un-normalized ray, so the ray parameter of the result is `1 + d_il`.
pub fn displace_along_rays(rays: &RayBundle, offsets: &OffsetMatrix) -> Result<PointCloud> {
    if offsets.rows() != rays.len() {
        return Err(Error::ShapeMismatch {
            what: "offset rows vs rays",
            expected: rays.len(),
            found: offsets.rows(),
        });
    }
    if let Some((row, col, value)) = offsets.first_negative() {
        return Err(Error::NegativeOffset { row, col, value });
    }
    let l = offsets.cols();
    let mut points = Vec::with_capacity(rays.len() * l);
    for (i, (&p, &r)) in rays.origins.iter().zip(&rays.directions).enumerate() {
        for &d in offsets.row(i) {
            points.push(p + r * d);
        }
        debug_assert_eq!(points.len(), (i + 1) * l);
    }
    PointCloud::new(points)
}

/// Per-dimension refinement bound `(O/2 + base) / alpha^(layer-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetConstraint {
    pub alpha: f64,
    pub base: f64,
    pub layer_count: usize,
}

impl Default for OffsetConstraint {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            base: 0.03,
            layer_count: 2,
        }
    }
}

impl OffsetConstraint {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) || !(self.base > 0.0) || self.layer_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "offset constraint needs alpha > 1, base > 0, layer_count >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }

    /// Divisor applied at refinement layer `layer` (1-based).
    pub fn layer_decay(&self, layer: usize) -> f64 {
        self.alpha.powi(layer as i32 - 1)
    }
}

/// Bound on each coordinate of a refinement move for a point whose total
/// ray offset is `offset_total`, at refinement layer `layer` (1-based).
pub fn constraint_value(constraint: &OffsetConstraint, offset_total: f64, layer: usize) -> f64 {
    debug_assert!(offset_total >= 0.0);
    debug_assert!(layer >= 1 && layer <= constraint.layer_count);
    (offset_total / 2.0 + constraint.base) / constraint.layer_decay(layer)
}

/// Spawns `k` children per parent: `child = parent + bound * raw`, with
/// `raw` already squashed to `[-1, 1]` per component.
///
/// `raw_moves` holds `k` consecutive moves for each parent.
pub fn apply_local_displacements(
    parents: &PointCloud,
    raw_moves: &[Vector3],
    k: usize,
    bounds: &[f64],
) -> Result<PointCloud> {
    if raw_moves.len() != parents.len() * k {
        return Err(Error::ShapeMismatch {
            what: "raw moves vs parents * k",
            expected: parents.len() * k,
            found: raw_moves.len(),
        });
    }
    if bounds.len() != parents.len() {
        return Err(Error::ShapeMismatch {
            what: "bounds vs parents",
            expected: parents.len(),
            found: bounds.len(),
        });
    }
    let points = parents
        .iter()
        .zip(bounds)
        .zip(raw_moves.chunks(k.max(1)))
        .flat_map(|((&parent, &bound), moves)| {
            moves.iter().map(move |&m| parent + m * bound)
        })
        .collect();
    PointCloud::new(points)
}

/// Approximate shadowed region behind a partial scan.
#[derive(Debug, Clone)]
pub struct ShadowVolume {
    rays: RayBundle,
    angular_tolerance: f64,
}

impl ShadowVolume {
    pub fn new(rays: RayBundle, angular_tolerance: f64) -> Result<Self> {
        if !(angular_tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "angular tolerance must be positive, got {angular_tolerance}"
            )));
        }
        Ok(Self {
            rays,
            angular_tolerance,
        })
    }

    pub fn rays(&self) -> &RayBundle {
        &self.rays
    }

    pub fn angular_tolerance(&self) -> f64 {
        self.angular_tolerance
    }
}

/// True when `q` lies within the cone of some ray and no closer to the
/// camera than that ray's observed point.
pub fn in_candidate_volume(vol: &ShadowVolume, q: Point3) -> bool {
    let cam = vol.rays.cam;
    let v = q - cam;
    let dist = v.norm();
    vol.rays.directions.iter().any(|&r| {
        // relative slack of a few ulps: q = p + d*r is itself rounded
        dist >= r.norm() * (1.0 - 1e-12) && v.angle_to(r) <= vol.angular_tolerance
    })
}

/// Distance from `q` to the infinite line through `a` with direction `dir`.
pub fn point_line_distance(q: Point3, a: Point3, dir: Vector3) -> f64 {
    (q - a).cross(dir).norm() / dir.norm()
}

/// Parameter `t` of the projection of `q` onto `cam + t * dir`.
pub fn ray_parameter(q: Point3, cam: Point3, dir: Vector3) -> f64 {
    (q - cam).dot(dir) / dir.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn ray_is_direct_subtraction() {
        let scan = PointCloud::new(vec![Point3::new(0.0, 0.0, 1.0)]).unwrap();
        let rays = build_rays(Point3::new(0.0, 0.0, 2.0), &scan).unwrap();
        assert_eq!(rays.directions(), &[Point3::new(0.0, 0.0, -1.0)]);
    }

    #[test]
    fn coincident_camera_is_degenerate() {
        let scan = PointCloud::new(vec![Point3::new(1.0, 1.0, 1.0)]).unwrap();
        let err = build_rays(Point3::new(1.0, 1.0, 1.0), &scan).unwrap_err();
        assert!(matches!(err, Error::DegenerateRay { index: 0, .. }));
    }

    #[test]
    fn rays_reconstruct_origins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scan = random_cloud(&mut rng, 256);
        let cam = Point3::new(0.0, 0.0, 1.5);
        let rays = build_rays(cam, &scan).unwrap();
        for (p, r) in scan.iter().zip(rays.directions()) {
            // oracle: element-wise subtraction
            assert_eq!(r.x, p.x - cam.x);
            assert_eq!(r.y, p.y - cam.y);
            assert_eq!(r.z, p.z - cam.z);
            let back = cam + *r;
            assert!((back - *p).norm() <= 1e-12);
        }
    }

    #[test]
    fn one_step_along_ray() {
        let scan = PointCloud::new(vec![Point3::new(0.0, 0.0, 1.0)]).unwrap();
        let rays = build_rays(Point3::new(0.0, 0.0, 2.0), &scan).unwrap();
        let off = OffsetMatrix::from_vec(1, 1, vec![0.5]).unwrap();
        let out = displace_along_rays(&rays, &off).unwrap();
        assert_eq!(out[0], Point3::new(0.0, 0.0, 0.5));
    }

    #[test]
    fn zero_offsets_repeat_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scan = random_cloud(&mut rng, 10);
        let rays = build_rays(Point3::new(0.0, 0.0, 1.5), &scan).unwrap();
        let out = displace_along_rays(&rays, &OffsetMatrix::zeros(10, 3)).unwrap();
        assert_eq!(out, scan.repeat_each(3));
    }

    #[test]
    fn displaced_points_stay_on_their_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scan = random_cloud(&mut rng, 2);
        let cam = Point3::new(0.3, -0.2, 1.5);
        let rays = build_rays(cam, &scan).unwrap();
        let vals = (0..8).map(|_| rng.random_range(0.0..2.0)).collect();
        let off = OffsetMatrix::from_vec(2, 4, vals).unwrap();
        let out = displace_along_rays(&rays, &off).unwrap();
        for i in 0..2 {
            for l in 0..4 {
                let q = out[i * 4 + l];
                let r = rays.directions()[i];
                assert!(point_line_distance(q, cam, r) < 1e-9);
                let t = ray_parameter(q, cam, r);
                assert!((t - (1.0 + off.get(i, l))).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn displacement_rejects_bad_offsets() {
        let scan = PointCloud::new(vec![Point3::new(0.0, 0.0, 1.0)]).unwrap();
        let rays = build_rays(Point3::new(0.0, 0.0, 2.0), &scan).unwrap();
        let neg = OffsetMatrix::from_vec(1, 2, vec![0.1, -0.1]).unwrap();
        assert!(matches!(
            displace_along_rays(&rays, &neg),
            Err(Error::NegativeOffset { row: 0, col: 1, .. })
        ));
        assert!(matches!(
            displace_along_rays(&rays, &OffsetMatrix::zeros(2, 2)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn constraint_closed_forms() {
        let c = OffsetConstraint::default();
        assert!((constraint_value(&c, 0.0, 1) - 0.03).abs() < 1e-12);
        assert!((constraint_value(&c, 0.1, 1) - 0.08).abs() < 1e-12);
        assert!((constraint_value(&c, 0.1, 2) - 0.08 / 1.5).abs() < 1e-12);
        assert!((constraint_value(&c, 0.0, 2) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn local_displacement_extremes() {
        let parents = PointCloud::new(vec![Point3::ZERO]).unwrap();
        let out = apply_local_displacements(
            &parents,
            &[Point3::new(1.0, -1.0, 1.0), Point3::ZERO],
            2,
            &[0.03],
        )
        .unwrap();
        assert_eq!(out[0], Point3::new(0.03, -0.03, 0.03));
        assert_eq!(out[1], Point3::ZERO);
        assert!(apply_local_displacements(&parents, &[Point3::ZERO], 2, &[0.03]).is_err());
    }

    #[test]
    fn observed_point_is_in_candidate_volume() {
        let scan = PointCloud::new(vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.2, 0.0, 0.0),
        ])
        .unwrap();
        let rays = build_rays(Point3::new(0.0, 0.0, 1.5), &scan).unwrap();
        let vol = ShadowVolume::new(rays, DEFAULT_ANGULAR_TOLERANCE).unwrap();
        assert!(in_candidate_volume(&vol, scan[0]));
        assert!(in_candidate_volume(&vol, scan[1]));
        // camera side of both observed points
        assert!(!in_candidate_volume(&vol, Point3::new(0.0, 0.0, 0.5)));
        assert!(!in_candidate_volume(&vol, Point3::new(0.1, 0.0, 0.75)));
        // behind, but far outside every cone
        assert!(!in_candidate_volume(&vol, Point3::new(3.0, 3.0, -1.0)));
    }

    #[test]
    fn shadow_volume_rejects_nonpositive_tolerance() {
        let scan = PointCloud::new(vec![Point3::ZERO]).unwrap();
        let rays = build_rays(Point3::new(0.0, 0.0, 1.5), &scan).unwrap();
        assert!(ShadowVolume::new(rays, 0.0).is_err());
    }

    #[test]
    fn nonfinite_points_rejected() {
        assert!(PointCloud::new(vec![Point3::new(f64::NAN, 0.0, 0.0)]).is_err());
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn point() -> impl Strategy<Value = Point3> {
        (-0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn constraint_is_monotone(a in 0.0..2.0f64, b in 0.0..2.0f64) {
            let c = OffsetConstraint::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(constraint_value(&c, lo, 1) <= constraint_value(&c, hi, 1));
            let ratio = constraint_value(&c, a, 1) / constraint_value(&c, a, 2);
            prop_assert!((ratio - c.alpha).abs() < 1e-12);
            prop_assert!(constraint_value(&c, a, 2) < constraint_value(&c, a, 1));
        }

        #[test]
        fn children_stay_in_their_box(
            parents in prop::collection::vec(point(), 1..20),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = 3;
            let cloud = PointCloud::new(parents).unwrap();
            let raw: Vec<_> = (0..cloud.len() * k)
                .map(|_| Point3::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)))
                .collect();
            let bounds: Vec<f64> = (0..cloud.len()).map(|_| rng.random_range(0.001..0.2)).collect();
            let out = apply_local_displacements(&cloud, &raw, k, &bounds).unwrap();
            for (j, parent) in cloud.iter().enumerate() {
                for c in 0..k {
                    let d = out[j * k + c] - *parent;
                    for axis in 0..3 {
                        prop_assert!(d.get(axis).abs() <= bounds[j] * (1.0 + 1e-12));
                    }
                }
            }
        }

        #[test]
        fn displaced_points_lie_in_shadow(
            scan in prop::collection::vec(point(), 1..16),
            offsets in prop::collection::vec(0.0..1.5f64, 64),
        ) {
            let cloud = PointCloud::new(scan).unwrap();
            let rays = build_rays(Point3::new(0.1, 0.2, 1.5), &cloud).unwrap();
            let l = 4;
            let vals = offsets[..cloud.len() * l].to_vec();
            let off = OffsetMatrix::from_vec(cloud.len(), l, vals).unwrap();
            let out = displace_along_rays(&rays, &off).unwrap();
            let vol = ShadowVolume::new(rays, 1e-9).unwrap();
            for q in &out {
                prop_assert!(in_candidate_volume(&vol, *q));
            }
        }
    }
}
