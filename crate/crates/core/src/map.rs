//! In-memory volumes and particle stacks.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::simulate::Orientation;
use crate::{Error, Result};

/// A single 2D particle image, indexed `[y, x]`.
pub type Image2D = Array2<f32>;

/// 3D density on a regular grid, indexed `[z, y, x]` (x fastest in memory).
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub voxels: Array3<f32>,
    /// Å per voxel, isotropic.
    pub voxel_size: f64,
    /// Origin in Å, `(x, y, z)`.
    pub origin: [f64; 3],
}

impl DensityMap {
    pub fn new(voxels: Array3<f32>, voxel_size: f64) -> Result<Self> {
        let map = DensityMap {
            voxels,
            voxel_size,
            origin: [0.0; 3],
        };
        map.validate()?;
        Ok(map)
    }

    /// `(nx, ny, nz)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        let (nz, ny, nx) = self.voxels.dim();
        (nx, ny, nz)
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, ny, nz) = self.shape();
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::Precondition("density map has an empty axis".into()));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::Precondition(format!(
                "voxel size must be positive, got {}",
                self.voxel_size
            )));
        }
        if self.voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition(
                "density map has non-finite voxels".into(),
            ));
        }
        Ok(())
    }

    /// Side length of a cubic map; errors for anything else.
    pub fn cubic_side(&self) -> Result<usize> {
        match self.shape() {
            (nx, ny, nz) if nx == ny && ny == nz => Ok(nx),
            (nx, ny, nz) => Err(Error::Precondition(format!(
                "operation requires a cubic map, got {nx}x{ny}x{nz}"
            ))),
        }
    }
}

/// Per-image provenance. Every field is optional so real data can be carried.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<Orientation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Affine normalization applied after noising: `stored = (raw - offset) / scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    pub fn apply(&self, image: &Image2D) -> Image2D {
        image.mapv(|v| ((v as f64 - self.offset) / self.scale) as f32)
    }

    pub fn invert(&self, image: &Image2D) -> Image2D {
        image.mapv(|v| (v as f64 * self.scale + self.offset) as f32)
    }
}

/// A stack of equally sized square images.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    pub images: Vec<Image2D>,
    /// Å per pixel.
    pub pixel_size: f64,
    pub metadata: Vec<ImageMeta>,
}

impl ImageStack {
    pub fn new(images: Vec<Image2D>, pixel_size: f64) -> Result<Self> {
        let metadata = vec![ImageMeta::default(); images.len()];
        let stack = ImageStack {
            images,
            pixel_size,
            metadata,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(ny, nx)` of every image, `None` for an empty stack.
    pub fn image_dim(&self) -> Option<(usize, usize)> {
        self.images.first().map(|im| im.dim())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::Precondition(format!(
                "pixel size must be positive, got {}",
                self.pixel_size
            )));
        }
        if self.metadata.len() != self.images.len() {
            return Err(Error::Precondition(format!(
                "{} metadata records for {} images",
                self.metadata.len(),
                self.images.len()
            )));
        }
        if let Some(dim) = self.image_dim() {
            if dim.0 == 0 || dim.1 == 0 {
                return Err(Error::Precondition("images have an empty axis".into()));
            }
            for (i, im) in self.images.iter().enumerate() {
                if im.dim() != dim {
                    return Err(Error::Shape(format!(
                        "image {i} is {:?}, expected {:?}",
                        im.dim(),
                        dim
                    )));
                }
                if im.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Precondition(format!(
                        "image {i} has non-finite pixels"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sub-stack with the given indices, metadata carried along.
    pub fn select(&self, indices: &[usize]) -> ImageStack {
        ImageStack {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            pixel_size: self.pixel_size,
            metadata: indices.iter().map(|&i| self.metadata[i].clone()).collect(),
        }
    }
}
