use ndarray::{Array2, Array3};

use super::Orientation;
use crate::map::{DensityMap, Image2D};
use crate::{Error, Result};

/// Trilinear sample of `voxels` (indexed `[z, y, x]`) at continuous `(x, y, z)`,
/// with zeros outside the grid.
fn trilinear(voxels: &Array3<f32>, x: f64, y: f64, z: f64) -> f64 {
    let (nz, ny, nx) = voxels.dim();
    let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
    if x0 < -1.0 || y0 < -1.0 || z0 < -1.0 || x0 >= nx as f64 || y0 >= ny as f64 || z0 >= nz as f64
    {
        return 0.0;
    }
    let (fx, fy, fz) = (x - x0, y - y0, z - z0);
    let (x0, y0, z0) = (x0 as i64, y0 as i64, z0 as i64);
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
        let zi = z0 + dz;
        if wz == 0.0 || zi < 0 || zi >= nz as i64 {
            continue;
        }
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let yi = y0 + dy;
            if wy == 0.0 || yi < 0 || yi >= ny as i64 {
                continue;
            }
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let xi = x0 + dx;
                if wx == 0.0 || xi < 0 || xi >= nx as i64 {
                    continue;
                }
                acc += wz * wy * wx * voxels[[zi as usize, yi as usize, xi as usize]] as f64;
            }
        }
    }
    acc
}

/// Line integral of the rotated map along z.
///
/// The rotated volume is `V_R(p) = V(R^T p)` about the grid center (index
/// `n/2`), sampled by inverse mapping with trilinear interpolation. The output
/// is `image_size` square, centered on the same axis, with the map's voxel size
/// as pixel size.
pub fn project(map: &DensityMap, orientation: &Orientation, image_size: usize) -> Result<Image2D> {
    let n = map.cubic_side()?;
    if image_size == 0 || image_size > n {
        return Err(Error::Precondition(format!(
            "image size {image_size} must be in 1..={n}"
        )));
    }
    let center = (n / 2) as f64;
    let half = (image_size / 2) as f64;
    let m = orientation.matrix();
    // Columns of R^T are rows of R.
    let step = [m[2][0], m[2][1], m[2][2]];
    let mut image = Array2::zeros((image_size, image_size));
    for ((v, u), pixel) in image.indexed_iter_mut() {
        let (xr, yr) = (u as f64 - half, v as f64 - half);
        let base = [
            m[0][0] * xr + m[1][0] * yr + center,
            m[0][1] * xr + m[1][1] * yr + center,
            m[0][2] * xr + m[1][2] * yr + center,
        ];
        let mut sum = 0.0;
        for k in 0..n {
            let zr = k as f64 - center;
            sum += trilinear(
                &map.voxels,
                base[0] + step[0] * zr,
                base[1] + step[1] * zr,
                base[2] + step[2] * zr,
            );
        }
        *pixel = sum as f32;
    }
    Ok(image)
}
