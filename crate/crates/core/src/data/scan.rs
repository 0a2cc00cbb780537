//! Single-view visibility by an angular z-buffer around the camera.

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, Vector3};

/// Center and radius of the sphere around the cloud's bounding box.
pub fn bounding_sphere(cloud: &PointCloud) -> Option<(Point3, f64)> {
    let (lo, hi) = cloud.bounding_box()?;
    let c = (lo + hi) * 0.5;
    let r = cloud.iter().map(|p| p.dist2(c)).fold(0.0, f64::max).sqrt();
    Some((c, r))
}

/// Orthonormal `(right, up, forward)` frame looking from `cam` at `target`.
fn camera_frame(cam: Point3, target: Point3) -> (Vector3, Vector3, Vector3) {
    let f = (target - cam).normalized();
    let helper = if f.z.abs() < 0.9 {
        Point3::new(0.0, 0.0, 1.0)
    } else {
        Point3::new(1.0, 0.0, 0.0)
    };
    let right = helper.cross(f).normalized();
    let up = f.cross(right);
    (right, up, f)
}

/// Keeps, per `(azimuth, elevation)` bin seen from `cam`, the point nearest
/// to the camera. Bins tile the cone that just contains the cloud's
/// bounding sphere. Ties go to the lower index; survivors keep their order.
pub fn simulate_scan(full: &PointCloud, cam: Point3, az_bins: usize, el_bins: usize) -> Result<PointCloud> {
    Ok(full.select(&visible_ids(full, cam, az_bins, el_bins)?))
}

/// Indices of the points kept by [`simulate_scan`], ascending.
pub fn visible_ids(full: &PointCloud, cam: Point3, az_bins: usize, el_bins: usize) -> Result<Vec<usize>> {
    if az_bins == 0 || el_bins == 0 {
        return Err(Error::InvalidArgument("bin counts must be positive".into()));
    }
    let Some((center, radius)) = bounding_sphere(full) else {
        return Ok(Vec::new());
    };
    let dist = cam.dist2(center).sqrt();
    if dist <= radius {
        return Err(Error::CameraInside);
    }
    let (right, up, fwd) = camera_frame(cam, center);
    let half = (radius / dist).asin().max(1e-9);
    let mut best: Vec<(usize, f64)> = vec![(usize::MAX, f64::INFINITY); az_bins * el_bins];
    for (i, &p) in full.iter().enumerate() {
        if let Some(bin) = bin_of(p, cam, (right, up, fwd), half, az_bins, el_bins) {
            let d = p.dist2(cam);
            let slot = &mut best[bin];
            if d < slot.1 {
                *slot = (i, d);
            }
        }
    }
    let mut ids: Vec<usize> = best.into_iter().filter(|b| b.0 != usize::MAX).map(|b| b.0).collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Bin index of `p`, or `None` if `p` sits on the camera.
fn bin_of(
    p: Point3,
    cam: Point3,
    (right, up, fwd): (Vector3, Vector3, Vector3),
    half: f64,
    az_bins: usize,
    el_bins: usize,
) -> Option<usize> {
    let v = p - cam;
    let (x, y, z) = (v.dot(right), v.dot(up), v.dot(fwd));
    if x == 0.0 && y == 0.0 && z == 0.0 {
        return None;
    }
    let az = x.atan2(z);
    let el = y.atan2((x * x + z * z).sqrt());
    let cell = |a: f64, n: usize| (((a + half) / (2.0 * half) * n as f64).floor().max(0.0) as usize).min(n - 1);
    Some(cell(el, el_bins) * az_bins + cell(az, az_bins))
}

/// Bin of every point, exposed for checking occlusion soundness.
pub fn bin_assignment(full: &PointCloud, cam: Point3, az_bins: usize, el_bins: usize) -> Result<Vec<Option<usize>>> {
    let (center, radius) = bounding_sphere(full).ok_or(Error::EmptyCloud)?;
    let dist = cam.dist2(center).sqrt();
    if dist <= radius {
        return Err(Error::CameraInside);
    }
    let frame = camera_frame(cam, center);
    let half = (radius / dist).asin().max(1e-9);
    Ok(full.iter().map(|&p| bin_of(p, cam, frame, half, az_bins, el_bins)).collect())
}
