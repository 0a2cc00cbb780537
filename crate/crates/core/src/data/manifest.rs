//! Dataset generation and the JSON manifest describing it.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json
//! train/{sample_id}_{partial|gt1|gt2|gt3}.ply
//! test/{sample_id}_{partial|gt1|gt2|gt3}.ply
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::io::{read_cloud, write_cloud};
use crate::data::mix_seed;
use crate::data::pair::{make_pair, PairConfig, SamplePair};
use crate::data::shapes::{Family, ShapeSpec};
use crate::error::{Error, Result};
use crate::geometry::Point3;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Even shape seeds train, odd ones test.
    pub fn of_seed(seed: u64) -> Self {
        if seed.is_multiple_of(2) {
            Split::Train
        } else {
            Split::Test
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub partial: PathBuf,
    pub gt1: PathBuf,
    pub gt2: PathBuf,
    pub gt3: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSeeds {
    pub shape: u64,
    pub cam: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub category: Family,
    pub split: Split,
    pub cam: Point3,
    /// Paths relative to the dataset root.
    pub files: SampleFiles,
    pub seeds: SampleSeeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub count: usize,
    pub seed: u64,
    pub families: Vec<Family>,
    pub pair: PairConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 200,
            seed: 0,
            families: Family::ALL.to_vec(),
            pair: PairConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenConfig,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(root.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(root.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

impl SampleEntry {
    /// Reads the four clouds of this sample.
    pub fn load(&self, root: &Path) -> Result<SamplePair> {
        Ok(SamplePair {
            partial: read_cloud(&root.join(&self.files.partial))?,
            cam: self.cam,
            gt1: read_cloud(&root.join(&self.files.gt1))?,
            gt2: read_cloud(&root.join(&self.files.gt2))?,
            gt3: read_cloud(&root.join(&self.files.gt3))?,
        })
    }
}

/// Deterministic description of sample `i`.
fn plan_sample(config: &GenConfig, i: usize) -> (String, Family, ShapeSpec, u64) {
    let family = config.families[i % config.families.len()];
    let shape_seed = mix_seed(config.seed, 2 * i as u64);
    let cam_seed = mix_seed(config.seed, 2 * i as u64 + 1);
    let id = format!("{i:05}_{}", family.name());
    (id, family, ShapeSpec::random(family, shape_seed), cam_seed)
}

/// Generates `config.count` samples under `root` and writes the manifest.
/// Samples are produced in parallel; files and manifest order depend only
/// on the configuration.
pub fn generate_dataset(config: &GenConfig, root: &Path) -> Result<Manifest> {
    if config.count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    if config.families.is_empty() {
        return Err(Error::InvalidArgument("no shape families selected".into()));
    }
    for s in [Split::Train, Split::Test] {
        std::fs::create_dir_all(root.join(s.dir()))?;
    }
    let samples = (0..config.count)
        .into_par_iter()
        .map(|i| {
            let (id, family, spec, cam_seed) = plan_sample(config, i);
            let pair = make_pair(&spec, cam_seed, &config.pair)?;
            let split = Split::of_seed(spec.rng_seed);
            let rel = |tier: &str| PathBuf::from(split.dir()).join(format!("{id}_{tier}.ply"));
            let files = SampleFiles {
                partial: rel("partial"),
                gt1: rel("gt1"),
                gt2: rel("gt2"),
                gt3: rel("gt3"),
            };
            write_cloud(&pair.partial, &root.join(&files.partial))?;
            write_cloud(&pair.gt1, &root.join(&files.gt1))?;
            write_cloud(&pair.gt2, &root.join(&files.gt2))?;
            write_cloud(&pair.gt3, &root.join(&files.gt3))?;
            Ok(SampleEntry {
                sample_id: id,
                category: family,
                split,
                cam: pair.cam,
                files,
                seeds: SampleSeeds {
                    shape: spec.rng_seed,
                    cam: cam_seed,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        config: config.clone(),
        samples,
    };
    manifest.save(root)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_reproducible() {
        let cfg = GenConfig {
            count: 6,
            seed: 3,
            pair: PairConfig {
                dense_points: 1 << 15,
                az_bins: 48,
                el_bins: 48,
                ..PairConfig::default()
            },
            ..GenConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate_dataset(&cfg, a.path()).unwrap();
        generate_dataset(&cfg, b.path()).unwrap();
        assert_eq!(m.samples.len(), 6);
        let bytes = |root: &Path, rel: &Path| std::fs::read(root.join(rel)).unwrap();
        assert_eq!(bytes(a.path(), Path::new(MANIFEST_FILE)), bytes(b.path(), Path::new(MANIFEST_FILE)));
        for s in &m.samples {
            assert_eq!(bytes(a.path(), &s.files.gt3), bytes(b.path(), &s.files.gt3));
            let pair = s.load(a.path()).unwrap();
            assert_eq!(pair.partial.len(), 256);
            assert_eq!(s.split, Split::of_seed(s.seeds.shape));
        }
        assert_eq!(Manifest::load(a.path()).unwrap(), m);
        let zero = GenConfig { count: 0, ..cfg };
        assert!(generate_dataset(&zero, a.path()).is_err());
    }
}
