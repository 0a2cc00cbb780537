//! Parametric shape families sampled uniformly by surface area.

use std::f64::consts::PI;

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, Vector3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Sphere,
    Box,
    Cylinder,
    LampLike,
    ChairLike,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Sphere,
        Family::Box,
        Family::Cylinder,
        Family::LampLike,
        Family::ChairLike,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Sphere => "sphere",
            Family::Box => "box",
            Family::Cylinder => "cylinder",
            Family::LampLike => "lamp-like",
            Family::ChairLike => "chair-like",
        }
    }

    /// Number of dimension parameters the family expects.
    pub fn param_count(self) -> usize {
        match self {
            Family::Sphere => 1,
            Family::Box => 3,
            Family::Cylinder => 2,
            Family::LampLike => 7,
            Family::ChairLike => 7,
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown shape family '{s}'")))
    }
}

/// Rotation followed by uniform scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Row-major rotation matrix.
    pub rotation: [[f64; 3]; 3],
    pub scale: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        scale: 1.0,
    };

    /// Uniformly random rotation (normalized Gaussian quaternion) and a
    /// scale in `[0.8, 1.2)`.
    pub fn random(rng: &mut impl Rng) -> Self {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        let rotation = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ];
        Self {
            rotation,
            scale: rng.random_range(0.8..1.2),
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        let a = p.to_array();
        let row = |i: usize| r[i][0] * a[0] + r[i][1] * a[1] + r[i][2] * a[2];
        Point3::new(row(0), row(1), row(2)) * self.scale
    }
}

/// One shape instance: family, dimensions and placement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub family: Family,
    pub params: Vec<f64>,
    pub pose: Pose,
    pub rng_seed: u64,
}

impl ShapeSpec {
    pub fn new(family: Family, params: Vec<f64>, pose: Pose, rng_seed: u64) -> Result<Self> {
        if params.len() != family.param_count() {
            return Err(Error::ShapeMismatch {
                what: "shape parameters",
                expected: family.param_count(),
                found: params.len(),
            });
        }
        if params.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("shape dimensions must be positive: {params:?}")));
        }
        Ok(Self {
            family,
            params,
            pose,
            rng_seed,
        })
    }

    /// Random dimensions and pose for `family`, all drawn from `seed`.
    pub fn random(family: Family, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let params = match family {
            Family::Sphere => vec![u(0.3, 0.6)],
            Family::Box => vec![u(0.15, 0.5), u(0.15, 0.5), u(0.15, 0.5)],
            Family::Cylinder => vec![u(0.15, 0.4), u(0.4, 1.0)],
            Family::LampLike => vec![
                u(0.15, 0.3),
                u(0.03, 0.08),
                u(0.015, 0.04),
                u(0.4, 0.8),
                u(0.08, 0.2),
                u(0.2, 0.4),
                u(0.15, 0.35),
            ],
            Family::ChairLike => vec![
                u(0.4, 0.6),
                u(0.4, 0.6),
                u(0.04, 0.08),
                u(0.3, 0.5),
                u(0.3, 0.6),
                u(0.03, 0.06),
                u(0.03, 0.06),
            ],
        };
        let pose = Pose::random(&mut rng);
        Self {
            family,
            params,
            pose,
            rng_seed: seed,
        }
    }
}

/// Surface pieces that shapes are assembled from, in the local frame.
#[derive(Debug, Clone, Copy)]
enum Patch {
    Sphere { center: Point3, radius: f64 },
    /// `origin + a * u + b * v` for `a, b` in `[0, 1]`.
    Rect { origin: Point3, u: Vector3, v: Vector3 },
    /// Lateral surface of a cone frustum along `+z` from `base`.
    Frustum { base: Point3, r0: f64, r1: f64, height: f64 },
    /// Disk in the plane `z = center.z`.
    Disk { center: Point3, radius: f64 },
}

impl Patch {
    fn area(&self) -> f64 {
        match *self {
            Patch::Sphere { radius, .. } => 4.0 * PI * radius * radius,
            Patch::Rect { u, v, .. } => u.cross(v).norm(),
            Patch::Frustum { r0, r1, height, .. } => {
                PI * (r0 + r1) * (height * height + (r1 - r0) * (r1 - r0)).sqrt()
            }
            Patch::Disk { radius, .. } => PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point3 {
        match *self {
            Patch::Sphere { center, radius } => {
                let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
                center + Point3::new(x, y, z) * radius
            }
            Patch::Rect { origin, u, v } => {
                let a = rng.random::<f64>();
                let b = rng.random::<f64>();
                origin + u * a + v * b
            }
            Patch::Frustum { base, r0, r1, height } => {
                // radius grows linearly with t, so the area density does too
                let s = rng.random::<f64>();
                let t = if (r1 - r0).abs() < 1e-12 {
                    s
                } else {
                    ((r0 * r0 + s * (r1 * r1 - r0 * r0)).sqrt() - r0) / (r1 - r0)
                };
                let r = r0 + t * (r1 - r0);
                let phi = rng.random_range(0.0..2.0 * PI);
                base + Point3::new(r * phi.cos(), r * phi.sin(), t * height)
            }
            Patch::Disk { center, radius } => {
                let r = radius * rng.random::<f64>().sqrt();
                let phi = rng.random_range(0.0..2.0 * PI);
                center + Point3::new(r * phi.cos(), r * phi.sin(), 0.0)
            }
        }
    }
}

/// Six faces of an axis-aligned box with the given center and half extents.
fn box_faces(c: Point3, h: [f64; 3]) -> Vec<Patch> {
    let mut faces = Vec::with_capacity(6);
    for axis in 0..3 {
        let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
        let mut u = [0.0; 3];
        let mut v = [0.0; 3];
        u[a1] = 2.0 * h[a1];
        v[a2] = 2.0 * h[a2];
        for sign in [-1.0, 1.0] {
            let mut o = [c.x, c.y, c.z];
            o[axis] += sign * h[axis];
            o[a1] -= h[a1];
            o[a2] -= h[a2];
            faces.push(Patch::Rect {
                origin: Point3::from_array(o),
                u: Point3::from_array(u),
                v: Point3::from_array(v),
            });
        }
    }
    faces
}

/// Closed cylinder along `z` starting at `base`.
fn cylinder(base: Point3, radius: f64, height: f64) -> Vec<Patch> {
    vec![
        Patch::Frustum {
            base,
            r0: radius,
            r1: radius,
            height,
        },
        Patch::Disk { center: base, radius },
        Patch::Disk {
            center: base + Point3::new(0.0, 0.0, height),
            radius,
        },
    ]
}

fn patches(spec: &ShapeSpec) -> Vec<Patch> {
    let p = &spec.params;
    match spec.family {
        Family::Sphere => vec![Patch::Sphere {
            center: Point3::ZERO,
            radius: p[0],
        }],
        Family::Box => box_faces(Point3::ZERO, [p[0], p[1], p[2]]),
        Family::Cylinder => cylinder(Point3::new(0.0, 0.0, -p[1] / 2.0), p[0], p[1]),
        Family::LampLike => {
            // base disk-cylinder, thin pole, open shade
            let (base_r, base_h, pole_r, pole_h) = (p[0], p[1], p[2], p[3]);
            let (shade_top, shade_bottom, shade_h) = (p[4], p[5], p[6]);
            let mut out = cylinder(Point3::ZERO, base_r, base_h);
            out.push(Patch::Frustum {
                base: Point3::new(0.0, 0.0, base_h),
                r0: pole_r,
                r1: pole_r,
                height: pole_h,
            });
            out.push(Patch::Frustum {
                base: Point3::new(0.0, 0.0, base_h + pole_h - 0.5 * shade_h),
                r0: shade_bottom,
                r1: shade_top,
                height: shade_h,
            });
            out
        }
        Family::ChairLike => {
            let (w, d, seat_t, leg_h, back_h, back_t, panel_t) =
                (p[0], p[1], p[2], p[3], p[4], p[5], p[6]);
            let seat_z = leg_h + seat_t / 2.0;
            let mut out = box_faces(Point3::new(0.0, 0.0, seat_z), [w / 2.0, d / 2.0, seat_t / 2.0]);
            out.extend(box_faces(
                Point3::new(0.0, d / 2.0 - back_t / 2.0, leg_h + seat_t + back_h / 2.0),
                [w / 2.0, back_t / 2.0, back_h / 2.0],
            ));
            for side in [-1.0, 1.0] {
                out.extend(box_faces(
                    Point3::new(side * (w / 2.0 - panel_t / 2.0), 0.0, leg_h / 2.0),
                    [panel_t / 2.0, d / 2.0, leg_h / 2.0],
                ));
            }
            out
        }
    }
}

/// `n` points distributed uniformly by area over the posed surface.
pub fn sample_surface(spec: &ShapeSpec, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let parts = patches(spec);
    let mut cumulative = Vec::with_capacity(parts.len());
    let mut total = 0.0;
    for part in &parts {
        total += part.area();
        cumulative.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let a = rng.random::<f64>() * total;
            let k = cumulative.partition_point(|&c| c <= a).min(parts.len() - 1);
            spec.pose.apply(parts[k].sample(&mut rng))
        })
        .collect();
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_sphere_mean_radius() {
        let spec = ShapeSpec::new(Family::Sphere, vec![1.0], Pose::IDENTITY, 0).unwrap();
        let c = sample_surface(&spec, 20_000, 1).unwrap();
        let mean = c.iter().map(|p| p.norm()).sum::<f64>() / c.len() as f64;
        assert!((mean - 1.0).abs() < 1e-3);
        // uniform: mean height is zero within Monte-Carlo error
        let mz = c.iter().map(|p| p.z).sum::<f64>() / c.len() as f64;
        assert!(mz.abs() < 0.03);
    }

    #[test]
    fn box_points_lie_on_faces() {
        let h = [0.2, 0.3, 0.4];
        let spec = ShapeSpec::new(Family::Box, h.to_vec(), Pose::IDENTITY, 0).unwrap();
        let c = sample_surface(&spec, 5000, 2).unwrap();
        let mut per_face = [0usize; 3];
        for p in &c {
            let a = p.to_array();
            let on: Vec<usize> = (0..3).filter(|&i| a[i].abs() == h[i]).collect();
            assert!(!on.is_empty(), "{p:?} on no face");
            per_face[on[0]] += 1;
        }
        // face pair areas are 4*h1*h2; counts follow them
        let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
        let at: f64 = areas.iter().sum();
        for i in 0..3 {
            let f = per_face[i] as f64 / 5000.0;
            assert!((f - areas[i] / at).abs() < 0.03, "{f} vs {}", areas[i] / at);
        }
    }

    #[test]
    fn frustum_area_density_is_uniform() {
        // a cone with r0 = 0: half of the area lies above t = 1/sqrt(2)
        let spec = ShapeSpec::new(Family::Cylinder, vec![1.0, 1.0], Pose::IDENTITY, 0).unwrap();
        let part = Patch::Frustum {
            base: Point3::ZERO,
            r0: 0.0,
            r1: 1.0,
            height: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let above = (0..20_000)
            .filter(|_| part.sample(&mut rng).z > 1.0 / 2f64.sqrt())
            .count();
        assert!((above as f64 / 20_000.0 - 0.5).abs() < 0.015);
        assert_eq!(spec.params.len(), 2);
    }

    #[test]
    fn deterministic_given_seed() {
        for f in Family::ALL {
            let spec = ShapeSpec::random(f, 9);
            assert_eq!(spec, ShapeSpec::random(f, 9));
            let a = sample_surface(&spec, 300, 4).unwrap();
            assert_eq!(a, sample_surface(&spec, 300, 4).unwrap());
            assert_ne!(a, sample_surface(&spec, 300, 5).unwrap());
        }
    }

    #[test]
    fn pose_is_a_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pose = Pose::random(&mut rng);
        let p = Point3::new(0.3, -0.2, 0.9);
        let q = pose.apply(p);
        assert!((q.norm() - p.norm() * pose.scale).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(ShapeSpec::new(Family::Box, vec![1.0], Pose::IDENTITY, 0).is_err());
        assert!(ShapeSpec::new(Family::Sphere, vec![-1.0], Pose::IDENTITY, 0).is_err());
        let spec = ShapeSpec::random(Family::Sphere, 0);
        assert!(sample_surface(&spec, 0, 0).is_err());
        assert_eq!("chair-like".parse::<Family>().unwrap(), Family::ChairLike);
    }
}
