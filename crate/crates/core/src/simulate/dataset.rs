use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Orientation, SimulationConfig};
use crate::map::{ImageMeta, ImageStack, Normalization};
use crate::mrc;
use crate::{Error, Result};

pub const NOISY_FILE: &str = "noisy.mrc";
pub const CLEAN_FILE: &str = "clean.mrc";
pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, val or test)"
            )),
        }
    }
}

/// Noisy condition images and their clean targets, index-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDataset {
    pub noisy: ImageStack,
    pub clean: ImageStack,
    pub splits: Vec<Split>,
    pub config: SimulationConfig,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub index: usize,
    pub split: Split,
    pub orientation: Orientation,
    pub seed: u64,
    pub normalization: Normalization,
}

/// JSON sidecar written next to the two stacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub source_map: String,
    pub pixel_size: f64,
    pub noisy: String,
    pub clean: String,
    pub config: SimulationConfig,
    pub images: Vec<ManifestImage>,
}

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Precondition(format!(
                "unsupported dataset manifest version {}",
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.images
            .iter()
            .filter(|im| im.split == split)
            .map(|im| im.index)
            .collect()
    }
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        let images = self
            .noisy
            .metadata
            .iter()
            .zip(&self.splits)
            .enumerate()
            .map(|(index, (meta, &split))| {
                let missing = |what: &str| {
                    Error::Precondition(format!("image {index} has no {what} metadata"))
                };
                Ok(ManifestImage {
                    index,
                    split,
                    orientation: meta.orientation.ok_or_else(|| missing("orientation"))?,
                    seed: meta.seed.ok_or_else(|| missing("seed"))?,
                    normalization: meta.normalization.ok_or_else(|| missing("normalization"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(DatasetManifest {
            format_version: MANIFEST_VERSION,
            source_map: self.source.clone(),
            pixel_size: self.noisy.pixel_size,
            noisy: NOISY_FILE.into(),
            clean: CLEAN_FILE.into(),
            config: self.config.clone(),
            images,
        })
    }

    /// Writes `noisy.mrc`, `clean.mrc` and `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest()?;
        mrc::write_stack(&self.noisy, dir.join(NOISY_FILE))?;
        mrc::write_stack(&self.clean, dir.join(CLEAN_FILE))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = DatasetManifest::load(dir)?;
        let mut noisy = mrc::read_stack(dir.join(&manifest.noisy))?;
        let mut clean = mrc::read_stack(dir.join(&manifest.clean))?;
        let n = manifest.images.len();
        if noisy.len() != n || clean.len() != n {
            return Err(Error::Shape(format!(
                "manifest lists {n} images, stacks hold {} noisy and {} clean",
                noisy.len(),
                clean.len()
            )));
        }
        if noisy.image_dim() != clean.image_dim() {
            return Err(Error::Shape(
                "noisy and clean stacks differ in image shape".into(),
            ));
        }
        let metadata: Vec<ImageMeta> = manifest
            .images
            .iter()
            .map(|im| ImageMeta {
                orientation: Some(im.orientation),
                seed: Some(im.seed),
                source: Some(manifest.source_map.clone()),
                normalization: Some(im.normalization),
            })
            .collect();
        noisy.metadata = metadata.clone();
        clean.metadata = metadata;
        Ok(PairedDataset {
            noisy,
            clean,
            splits: manifest.images.iter().map(|im| im.split).collect(),
            config: manifest.config,
            source: manifest.source_map,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_dataset, Snr};
    use super::*;
    use crate::phantom;

    #[test]
    fn save_load_roundtrip() {
        let map = phantom::gaussian_blobs(12, 2.0, 3, 4);
        let config = SimulationConfig {
            n_images: 10,
            snr: Snr(1.0),
            image_size: 12,
            rng_seed: 99,
            split: [0.6, 0.2, 0.2],
        };
        let dataset = build_dataset(&map, &config, "blobs.mrc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        dataset.save(dir.path()).unwrap();
        let back = PairedDataset::load(dir.path()).unwrap();
        assert_eq!(back.noisy.images, dataset.noisy.images);
        assert_eq!(back.clean.images, dataset.clean.images);
        assert_eq!(back.noisy.pixel_size, dataset.noisy.pixel_size);
        assert_eq!(back.splits, dataset.splits);
        assert_eq!(back.config, dataset.config);
        assert_eq!(back.noisy.metadata, dataset.noisy.metadata);
        assert_eq!(back, dataset);
        assert_eq!(back.indices(Split::Test), vec![8, 9]);
    }
}
