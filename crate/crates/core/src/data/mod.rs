//! Synthetic dataset production: shapes, scans, tiered ground truth, files.

pub mod io;
pub mod manifest;
pub mod pair;
pub mod scan;
pub mod shapes;

pub use io::{read_cloud, with_suffix, write_cloud};
pub use manifest::{generate_dataset, GenConfig, Manifest, SampleEntry, Split};
pub use pair::{make_pair, PairConfig, SamplePair, TierSizes};
pub use scan::simulate_scan;
pub use shapes::{sample_surface, Family, Pose, ShapeSpec};

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
