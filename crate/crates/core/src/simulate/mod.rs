//! Paired (noisy, clean) particle datasets from a density map.
//!
//! Each image index draws a Haar-uniform orientation, projects the map along
//! the rotated viewing axis and adds white Gaussian noise with variance
//! `var(clean) / snr`. Both images of a pair are then normalized with the affine
//! parameters (mean, std) of the noisy image.

mod dataset;
mod orientation;
mod project;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use dataset::{
    DatasetManifest, ManifestImage, PairedDataset, Split, CLEAN_FILE, MANIFEST_FILE, NOISY_FILE,
};
pub use orientation::Orientation;
pub use project::project;

use crate::map::{DensityMap, Image2D, ImageMeta, ImageStack, Normalization};
use crate::{Error, Result};

/// Signal-to-noise ratio `var(signal) / var(noise)`; may be infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Snr(pub f64);

impl Snr {
    pub const INFINITE: Snr = Snr(f64::INFINITY);

    pub fn is_infinite(&self) -> bool {
        self.0.is_infinite()
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(Snr(v)),
            Raw::Text(t) if matches!(t.to_ascii_lowercase().as_str(), "inf" | "infinity") => {
                Ok(Snr::INFINITE)
            }
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid snr {t:?}"))),
        }
    }
}

fn default_image_size() -> usize {
    64
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_images: usize,
    pub snr: Snr,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub rng_seed: u64,
    /// Fractions (train, val, test).
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 {
            return Err(Error::Precondition("n_images must be positive".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Precondition("image_size must be positive".into()));
        }
        if !(self.snr.0 > 0.0) {
            return Err(Error::Precondition(format!(
                "snr must be > 0, got {}",
                self.snr
            )));
        }
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Precondition(format!(
                "split fractions {:?} must lie in [0, 1]",
                self.split
            )));
        }
        let total: f64 = self.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "split fractions {:?} sum to {total}, expected 1",
                self.split
            )));
        }
        Ok(())
    }

    /// Split label per index: the first `round(f_train·n)` indices train, the
    /// next `round(f_val·n)` validate, the rest test.
    pub fn assign_splits(&self) -> Vec<Split> {
        let n = self.n_images;
        let n_train = ((self.split[0] * n as f64).round() as usize).min(n);
        let n_val = ((self.split[1] * n as f64).round() as usize).min(n - n_train);
        (0..n)
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                }
            })
            .collect()
    }
}

/// Seed of the independent random stream for image `index`.
///
/// SplitMix64 finalizer over `seed + (index + 1)·φ`, so streams do not depend
/// on evaluation order.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add((index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Haar-uniform orientation draw.
pub fn sample_orientation<R: Rng + ?Sized>(rng: &mut R) -> Orientation {
    Orientation::sample(rng)
}

fn mean_var(image: &Image2D) -> (f64, f64) {
    let n = image.len() as f64;
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = image
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var)
}

/// `image + ε`, `ε ~ N(0, var(image)/snr)` i.i.d. per pixel.
pub fn add_noise<R: Rng + ?Sized>(image: &Image2D, snr: Snr, rng: &mut R) -> Result<Image2D> {
    if !(snr.0 > 0.0) {
        return Err(Error::Precondition(format!("snr must be > 0, got {snr}")));
    }
    if snr.is_infinite() {
        return Ok(image.clone());
    }
    let (_, var) = mean_var(image);
    if var == 0.0 {
        return Err(Error::Degenerate(
            "cannot set a finite SNR on a zero-variance image".into(),
        ));
    }
    let sigma = (var / snr.0).sqrt();
    Ok(image.mapv(|v| {
        let e: f64 = rng.sample(StandardNormal);
        (v as f64 + sigma * e) as f32
    }))
}

/// Projects, noises and normalizes `config.n_images` pairs.
///
/// Image `i` uses its own stream seeded by [`child_seed`]`(rng_seed, i)`: the
/// orientation is drawn first, then the noise. Output is identical with or
/// without parallelism.
pub fn build_dataset(
    map: &DensityMap,
    config: &SimulationConfig,
    source: &str,
) -> Result<PairedDataset> {
    config.validate()?;
    map.cubic_side()?;
    let pairs: Vec<(Image2D, Image2D, ImageMeta)> = (0..config.n_images)
        .into_par_iter()
        .map(|i| {
            let seed = child_seed(config.rng_seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let orientation = sample_orientation(&mut rng);
            let clean = project(map, &orientation, config.image_size)?;
            let noisy = add_noise(&clean, config.snr, &mut rng)?;
            let (mean, var) = mean_var(&noisy);
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            let norm = Normalization {
                offset: mean,
                scale,
            };
            let meta = ImageMeta {
                orientation: Some(orientation),
                seed: Some(seed),
                source: Some(source.to_string()),
                normalization: Some(norm),
            };
            Ok((norm.apply(&noisy), norm.apply(&clean), meta))
        })
        .collect::<Result<_>>()?;

    let mut noisy = Vec::with_capacity(pairs.len());
    let mut clean = Vec::with_capacity(pairs.len());
    let mut metadata = Vec::with_capacity(pairs.len());
    for (n, c, m) in pairs {
        noisy.push(n);
        clean.push(c);
        metadata.push(m);
    }
    Ok(PairedDataset {
        noisy: ImageStack {
            images: noisy,
            pixel_size: map.voxel_size,
            metadata: metadata.clone(),
        },
        clean: ImageStack {
            images: clean,
            pixel_size: map.voxel_size,
            metadata,
        },
        splits: config.assign_splits(),
        config: config.clone(),
        source: source.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom;
    use ndarray::Array2;

    fn config(n: usize, snr: f64) -> SimulationConfig {
        SimulationConfig {
            n_images: n,
            snr: Snr(snr),
            image_size: 16,
            rng_seed: 7,
            split: [0.8, 0.1, 0.1],
        }
    }

    #[test]
    fn infinite_snr_is_identity() {
        let image = Array2::from_shape_fn((8, 8), |(y, x)| (x * y) as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(add_noise(&image, Snr::INFINITE, &mut rng).unwrap(), image);
    }

    #[test]
    fn flat_image_with_finite_snr_is_degenerate() {
        let image = Array2::from_elem((8, 8), 3.0f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            add_noise(&image, Snr(1.0), &mut rng),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn split_counts() {
        let splits = config(100, 1.0).assign_splits();
        let count = |s| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (80, 10, 10)
        );
    }

    #[test]
    fn config_validation() {
        let mut c = config(10, 1.0);
        c.split = [0.5, 0.2, 0.2];
        assert!(c.validate().is_err());
        c.split = [0.8, 0.1, 0.1];
        c.snr = Snr(0.0);
        assert!(c.validate().is_err());
        let parsed: SimulationConfig =
            serde_json::from_str(r#"{"n_images": 4, "snr": "inf", "rng_seed": 1}"#).unwrap();
        assert!(parsed.snr.is_infinite());
        assert_eq!(parsed.image_size, 64);
    }

    #[test]
    fn dataset_is_deterministic_and_paired() {
        let map = phantom::gaussian_blobs(16, 1.5, 5, 1);
        let a = build_dataset(&map, &config(12, 0.5), "blobs").unwrap();
        let b = build_dataset(&map, &config(12, 0.5), "blobs").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.noisy.len(), 12);
        assert_eq!(a.clean.len(), 12);
        assert_eq!(a.noisy.pixel_size, 1.5);
        for (noisy, meta) in a.noisy.images.iter().zip(&a.noisy.metadata) {
            let (mean, var) = mean_var(noisy);
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);
            assert!(meta.orientation.is_some() && meta.normalization.is_some());
        }
    }

    #[test]
    fn child_seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| child_seed(5, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
