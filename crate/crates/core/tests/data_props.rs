//! File round trips and dataset-generation invariants.

use proptest::prelude::*;
use shadowpc::data::io::{write_ply, PlyEncoding};
use shadowpc::data::{make_pair, read_cloud, simulate_scan, write_cloud, Family, PairConfig, ShapeSpec};
use shadowpc::data::pair::sample_camera;
use shadowpc::data::sample_surface;
use shadowpc::geometry::{Point3, PointCloud};

fn arb_cloud() -> impl Strategy<Value = PointCloud> {
    prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0), 1..200)
        .prop_map(|v| PointCloud::new(v.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect()).unwrap())
}

/// Every coordinate comes back as its nearest single-precision value.
fn assert_f32_exact(a: &PointCloud, b: &PointCloud) {
    assert_eq!(a.len(), b.len());
    for (p, q) in a.iter().zip(b.iter()) {
        for k in 0..3 {
            let (x, y) = (p.get(k), q.get(k));
            assert_eq!(y, x as f32 as f64, "coordinate {x} read back as {y}");
        }
    }
}

/// Every coordinate comes back within one single-precision ulp.
fn assert_f32_close(a: &PointCloud, b: &PointCloud) {
    assert_eq!(a.len(), b.len());
    for (p, q) in a.iter().zip(b.iter()) {
        for k in 0..3 {
            let (x, y) = (p.get(k), q.get(k));
            assert!((x - y).abs() <= f32::EPSILON as f64 * x.abs().max(f32::MIN_POSITIVE as f64));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_format_round_trips_at_single_precision(c in arb_cloud()) {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("a.ply");
        write_ply(&c, &bin, PlyEncoding::BinaryLittleEndian).unwrap();
        assert_f32_exact(&c, &read_cloud(&bin).unwrap());
        let ascii = dir.path().join("b.ply");
        write_ply(&c, &ascii, PlyEncoding::Ascii).unwrap();
        assert_f32_exact(&c, &read_cloud(&ascii).unwrap());
        let xyz = dir.path().join("c.xyz");
        write_cloud(&c, &xyz).unwrap();
        assert_f32_close(&c, &read_cloud(&xyz).unwrap());
        // a second trip is lossless
        let again = dir.path().join("d.ply");
        let once = read_cloud(&bin).unwrap();
        write_cloud(&once, &again).unwrap();
        prop_assert_eq!(read_cloud(&again).unwrap(), once);
    }

    #[test]
    fn scans_are_subsets_of_the_full_cloud(seed in any::<u64>(), fam in 0usize..5) {
        let spec = ShapeSpec::random(Family::ALL[fam], seed);
        let full = sample_surface(&spec, 4000, seed).unwrap();
        let bb = full.bounding_box().unwrap();
        let center = (bb.0 + bb.1) * 0.5;
        let cam = center + sample_camera(seed, 4.0);
        let scan = simulate_scan(&full, cam, 32, 32).unwrap();
        prop_assert!(!scan.is_empty());
        for p in scan.iter() {
            prop_assert!(full.iter().any(|q| q == p));
        }
    }
}

#[test]
fn generated_pairs_are_normalized_and_sized() {
    let cfg = PairConfig::default();
    for (i, fam) in Family::ALL.into_iter().cycle().take(10).enumerate() {
        let spec = ShapeSpec::random(fam, 100 + i as u64);
        let pair = make_pair(&spec, 900 + i as u64, &cfg).unwrap();
        assert_eq!(pair.partial.len(), cfg.tiers.partial);
        assert_eq!(pair.gt1.len(), cfg.tiers.gt1);
        assert_eq!(pair.gt2.len(), cfg.tiers.gt2);
        assert_eq!(pair.gt3.len(), cfg.tiers.gt3);
        for c in [&pair.partial, &pair.gt1, &pair.gt2, &pair.gt3] {
            assert!(c.iter().all(|p| p.to_array().iter().all(|v| v.abs() <= 0.5)));
        }
        assert!((pair.cam.norm() - cfg.cam_distance).abs() < 1e-12);
        assert_eq!(make_pair(&spec, 900 + i as u64, &cfg).unwrap().partial, pair.partial);
    }
}

#[test]
fn sphere_scans_face_their_cameras() {
    let cfg = PairConfig::default();
    for i in 0..6 {
        let spec = ShapeSpec::random(Family::Sphere, 300 + i);
        let pair = make_pair(&spec, 700 + i, &cfg).unwrap();
        let bb = pair.gt3.bounding_box().unwrap();
        let center = (bb.0 + bb.1) * 0.5;
        let view = pair.cam - center;
        let behind = pair.partial.iter().filter(|&&p| (p - center).dot(view) < -0.02).count();
        assert_eq!(behind, 0, "sample {i}: {behind} points behind the silhouette");
    }
}
