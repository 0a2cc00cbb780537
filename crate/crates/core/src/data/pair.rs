use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::UnitSphere;
use serde::{Deserialize, Serialize};

use crate::data::mix_seed;
use crate::data::scan::simulate_scan;
use crate::data::shapes::{sample_surface, ShapeSpec};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};
use crate::spatial::farthest_point_sample;

/// Point counts of the scan and the three ground-truth tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierSizes {
    pub partial: usize,
    pub gt1: usize,
    pub gt2: usize,
    pub gt3: usize,
}

impl Default for TierSizes {
    fn default() -> Self {
        Self {
            partial: 256,
            gt1: 1024,
            gt2: 256,
            gt3: 2048,
        }
    }
}

/// Everything [`make_pair`] needs besides the shape and camera seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub tiers: TierSizes,
    /// Size of the dense cloud the scan is carved from.
    pub dense_points: usize,
    pub az_bins: usize,
    pub el_bins: usize,
    pub cam_distance: f64,
    /// Camera draws tried before giving up on a degenerate view.
    pub max_attempts: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            tiers: TierSizes::default(),
            dense_points: 1 << 21,
            az_bins: 128,
            el_bins: 128,
            cam_distance: 1.5,
            max_attempts: 16,
        }
    }
}

/// A scan with its camera and three ground-truth tiers.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub partial: PointCloud,
    pub cam: Point3,
    pub gt1: PointCloud,
    pub gt2: PointCloud,
    pub gt3: PointCloud,
}

/// Maps every cloud by the same shift and scale so that their union fits
/// in the centered unit cube.
fn normalize(clouds: &mut [PointCloud]) -> Result<()> {
    let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = -lo;
    for c in clouds.iter() {
        let (a, b) = c.bounding_box().ok_or(Error::EmptyCloud)?;
        lo = Point3::new(lo.x.min(a.x), lo.y.min(a.y), lo.z.min(a.z));
        hi = Point3::new(hi.x.max(b.x), hi.y.max(b.y), hi.z.max(b.z));
    }
    let center = (lo + hi) * 0.5;
    let ext = hi - lo;
    let s = 1.0 / ext.x.max(ext.y).max(ext.z);
    for c in clouds.iter_mut() {
        let pts = std::mem::take(c)
            .into_points()
            .into_iter()
            .map(|p| {
                let q = (p - center) * s;
                Point3::new(q.x.clamp(-0.5, 0.5), q.y.clamp(-0.5, 0.5), q.z.clamp(-0.5, 0.5))
            })
            .collect();
        *c = PointCloud::new(pts)?;
    }
    Ok(())
}

/// Camera on the sphere of radius `distance` around the origin.
pub fn sample_camera(seed: u64, distance: f64) -> Point3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [x, y, z]: [f64; 3] = UnitSphere.sample(&mut rng);
    Point3::new(x, y, z) * distance
}

/// Thins `visible` to `n` points by farthest point sampling, or repeats it
/// cyclically when fewer survived.
pub fn fit_to_count(visible: &PointCloud, n: usize) -> Result<PointCloud> {
    if visible.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if visible.len() >= n {
        return Ok(visible.select(&farthest_point_sample(visible, n, 0)));
    }
    let ids: Vec<usize> = (0..n).map(|i| i % visible.len()).collect();
    Ok(visible.select(&ids))
}

/// Builds one training or test sample. The camera is redrawn (from
/// `cam_seed` and the attempt number) while the view keeps fewer than a
/// quarter of the requested scan points.
pub fn make_pair(spec: &ShapeSpec, cam_seed: u64, config: &PairConfig) -> Result<SamplePair> {
    let t = config.tiers;
    if t.partial == 0 || t.gt1 == 0 || t.gt2 == 0 || t.gt3 == 0 || config.dense_points == 0 {
        return Err(Error::InvalidArgument("tier sizes must be positive".into()));
    }
    let seed = spec.rng_seed;
    let mut clouds = vec![
        sample_surface(spec, config.dense_points, mix_seed(seed, 1))?,
        sample_surface(spec, t.gt1, mix_seed(seed, 2))?,
        sample_surface(spec, t.gt2, mix_seed(seed, 3))?,
        sample_surface(spec, t.gt3, mix_seed(seed, 4))?,
    ];
    normalize(&mut clouds)?;
    let gt3 = clouds.pop().expect("four clouds");
    let gt2 = clouds.pop().expect("four clouds");
    let gt1 = clouds.pop().expect("four clouds");
    let dense = clouds.pop().expect("four clouds");

    let needed = t.partial.div_ceil(4);
    let mut last = Error::DegenerateScan { retained: 0, needed };
    for attempt in 0..config.max_attempts {
        let cam = sample_camera(mix_seed(cam_seed, attempt), config.cam_distance);
        let visible = simulate_scan(&dense, cam, config.az_bins, config.el_bins)?;
        if visible.len() < needed {
            last = Error::DegenerateScan {
                retained: visible.len(),
                needed,
            };
            continue;
        }
        return Ok(SamplePair {
            partial: fit_to_count(&visible, t.partial)?,
            cam,
            gt1,
            gt2,
            gt3,
        });
    }
    Err(last)
}
