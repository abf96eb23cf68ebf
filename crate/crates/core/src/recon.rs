//! Known-pose reconstruction by direct Fourier inversion.
//!
//! Each image's centered 2D spectrum is placed on the central plane
//! perpendicular to its viewing direction and spread onto the 3D grid with
//! trilinear weights. The accumulated spectrum is divided by the accumulated
//! weights (with a floor) and inverted.

use ndarray::Array3;
use rayon::prelude::*;

use crate::fft::{self, Complex, Direction};
use crate::map::{DensityMap, Image2D};
use crate::simulate::Orientation;
use crate::{Error, Result};

/// Default weight floor, relative to the mean positive weight.
pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-3;

/// Images per independent partial accumulator in [`reconstruct`].
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct FourierAccumulator {
    n: usize,
    voxel_size: f64,
    numerator: Array3<Complex>,
    weights: Array3<f64>,
    insertions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinalizeStats {
    /// Largest imaginary magnitude over largest real magnitude of the
    /// inverse transform, before the imaginary part is dropped.
    pub imag_ratio: f64,
    /// Absolute weight floor used.
    pub floor: f64,
}

impl FourierAccumulator {
    pub fn new(n: usize, voxel_size: f64) -> Result<Self> {
        if n == 0 || !(voxel_size > 0.0) {
            return Err(Error::Precondition(format!(
                "invalid accumulator side {n} / voxel size {voxel_size}"
            )));
        }
        Ok(FourierAccumulator {
            n,
            voxel_size,
            numerator: Array3::zeros((n, n, n)),
            weights: Array3::zeros((n, n, n)),
            insertions: 0,
        })
    }

    pub fn side(&self) -> usize {
        self.n
    }

    pub fn insertions(&self) -> usize {
        self.insertions
    }

    pub fn numerator(&self) -> &Array3<Complex> {
        &self.numerator
    }

    pub fn weights(&self) -> &Array3<f64> {
        &self.weights
    }

    /// Spreads the spectrum of `image`, viewed at `orientation`, onto the grid.
    ///
    /// Image frequency `k = (kx, ky, 0)` maps to volume frequency `R^T k`, the
    /// Fourier counterpart of the projector's `V(R^T p)` sampling. Only
    /// frequencies with `|k| <= n/2` are inserted.
    pub fn insert_slice(&mut self, image: &Image2D, orientation: &Orientation) -> Result<()> {
        let n = self.n;
        if image.dim() != (n, n) {
            return Err(Error::Shape(format!(
                "image is {:?}, accumulator side is {n}",
                image.dim()
            )));
        }
        let spectrum = fft::forward_real(&fft::ifftshift(image));
        let limit = (n / 2) as f64;
        for ((y, x), &value) in spectrum.indexed_iter() {
            let kx = fft::signed_freq(x, n) as f64;
            let ky = fft::signed_freq(y, n) as f64;
            if kx * kx + ky * ky > limit * limit {
                continue;
            }
            let k = orientation.rotate_inverse([kx, ky, 0.0]);
            self.spread(k, value);
        }
        self.insertions += 1;
        Ok(())
    }

    fn spread(&mut self, k: [f64; 3], value: Complex) {
        let n = self.n;
        let base = k.map(f64::floor);
        let frac = [k[0] - base[0], k[1] - base[1], k[2] - base[2]];
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            let z = fft::wrap_freq(base[2] as i64 + dz, n);
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                let y = fft::wrap_freq(base[1] as i64 + dy, n);
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    let w = wz * wy * wx;
                    if w == 0.0 {
                        continue;
                    }
                    let x = fft::wrap_freq(base[0] as i64 + dx, n);
                    self.numerator[[z, y, x]] += value * w;
                    self.weights[[z, y, x]] += w;
                }
            }
        }
    }

    /// Adds another accumulator of the same geometry.
    pub fn merge(&mut self, other: &FourierAccumulator) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Shape(format!(
                "cannot merge side {} into side {}",
                other.n, self.n
            )));
        }
        self.numerator += &other.numerator;
        self.weights += &other.weights;
        self.insertions += other.insertions;
        Ok(())
    }

    pub fn finalize(&self, weight_floor: f64) -> Result<DensityMap> {
        self.finalize_with_stats(weight_floor).map(|(map, _)| map)
    }

    /// Symmetrizes, divides by `max(weight, weight_floor · mean positive
    /// weight)` and inverts.
    pub fn finalize_with_stats(&self, weight_floor: f64) -> Result<(DensityMap, FinalizeStats)> {
        if self.insertions == 0 {
            return Err(Error::Precondition("no slices were inserted".into()));
        }
        if !(weight_floor >= 0.0) {
            return Err(Error::Precondition(format!(
                "weight floor must be >= 0, got {weight_floor}"
            )));
        }
        let n = self.n;
        let mirror = |i: usize| (n - i) % n;
        let (positive_sum, positive_count) = self
            .weights
            .iter()
            .filter(|&&w| w > 0.0)
            .fold((0.0, 0usize), |(s, c), &w| (s + w, c + 1));
        let floor = weight_floor * positive_sum / positive_count.max(1) as f64;

        let mut grid = Array3::<Complex>::zeros((n, n, n));
        for ((z, y, x), out) in grid.indexed_iter_mut() {
            let m = [mirror(z), mirror(y), mirror(x)];
            let num = (self.numerator[[z, y, x]] + self.numerator[m].conj()) * 0.5;
            let w = 0.5 * (self.weights[[z, y, x]] + self.weights[m]);
            if w > 0.0 {
                *out = num / w.max(floor);
            }
        }
        fft::fft_nd(&mut grid, Direction::Inverse);
        let (max_re, max_im) = grid.iter().fold((0.0f64, 0.0f64), |(r, i), c| {
            (r.max(c.re.abs()), i.max(c.im.abs()))
        });
        let real = grid.mapv(|c| c.re as f32);
        let voxels = fft::fftshift(&real);
        let map = DensityMap {
            voxels,
            voxel_size: self.voxel_size,
            origin: [0.0; 3],
        };
        let imag_ratio = if max_re > 0.0 { max_im / max_re } else { 0.0 };
        Ok((map, FinalizeStats { imag_ratio, floor }))
    }
}

/// Reconstructs a cubic map from square images at known orientations.
///
/// Images are accumulated in fixed chunks that are merged in order, so the
/// result does not depend on the thread count.
pub fn reconstruct(
    images: &[Image2D],
    orientations: &[Orientation],
    voxel_size: f64,
    weight_floor: f64,
) -> Result<DensityMap> {
    if images.len() != orientations.len() {
        return Err(Error::Shape(format!(
            "{} images but {} orientations",
            images.len(),
            orientations.len()
        )));
    }
    let Some(first) = images.first() else {
        return Err(Error::Precondition("no images to reconstruct from".into()));
    };
    let (h, w) = first.dim();
    if h != w {
        return Err(Error::Shape(format!("images must be square, got {h}x{w}")));
    }
    let partials = images
        .par_chunks(CHUNK)
        .zip(orientations.par_chunks(CHUNK))
        .map(|(ims, oris)| {
            let mut acc = FourierAccumulator::new(h, voxel_size)?;
            for (im, o) in ims.iter().zip(oris) {
                acc.insert_slice(im, o)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = FourierAccumulator::new(h, voxel_size)?;
    for p in &partials {
        total.merge(p)?;
    }
    total.finalize(weight_floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, seed: u64) -> Image2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, n), |_| rng.random::<f32>() - 0.5)
    }

    #[test]
    fn zero_image_only_adds_weight() {
        let mut acc = FourierAccumulator::new(8, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        acc.insert_slice(&Array2::zeros((8, 8)), &Orientation::sample(&mut rng))
            .unwrap();
        assert!(acc.numerator().iter().all(|c| c.norm() == 0.0));
        assert!(acc.weights().sum() > 0.0);
    }

    #[test]
    fn insertion_is_additive() {
        let a = random_image(8, 2);
        let b = random_image(8, 3);
        let o = Orientation::from_axis_angle([0.3, 1.0, -0.2], 0.7).unwrap();
        let mut twice = FourierAccumulator::new(8, 1.0).unwrap();
        twice.insert_slice(&a, &o).unwrap();
        twice.insert_slice(&b, &o).unwrap();
        let mut once = FourierAccumulator::new(8, 1.0).unwrap();
        once.insert_slice(&(&a + &b), &o).unwrap();
        for (x, y) in twice.numerator().iter().zip(once.numerator()) {
            assert!((x - y).norm() < 1e-9);
        }
        for (x, y) in twice.weights().iter().zip(once.weights()) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_insertion_fills_central_plane() {
        let n = 8;
        let image = random_image(n, 4);
        let mut acc = FourierAccumulator::new(n, 1.0).unwrap();
        acc.insert_slice(&image, &Orientation::IDENTITY).unwrap();
        let spectrum = fft::forward_real(&fft::ifftshift(&image));
        for ((z, y, x), &w) in acc.weights().indexed_iter() {
            if z != 0 {
                assert_eq!(w, 0.0);
                continue;
            }
            let (kx, ky) = (fft::signed_freq(x, n), fft::signed_freq(y, n));
            if kx * kx + ky * ky <= 16 {
                assert!((acc.numerator()[[0, y, x]] - spectrum[[y, x]]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn single_image_finalizes_finite() {
        let mut acc = FourierAccumulator::new(8, 1.0).unwrap();
        acc.insert_slice(&random_image(8, 5), &Orientation::IDENTITY)
            .unwrap();
        let map = acc.finalize(DEFAULT_WEIGHT_FLOOR).unwrap();
        assert!(map.voxels.iter().all(|v| v.is_finite()));
        assert!(FourierAccumulator::new(8, 1.0)
            .unwrap()
            .finalize(DEFAULT_WEIGHT_FLOOR)
            .is_err());
    }

    #[test]
    fn rejects_wrong_image_size() {
        let mut acc = FourierAccumulator::new(8, 1.0).unwrap();
        assert!(matches!(
            acc.insert_slice(&Array2::zeros((6, 6)), &Orientation::IDENTITY),
            Err(Error::Shape(_))
        ));
    }
}
