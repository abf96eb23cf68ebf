//! Classical reference denoisers: Gaussian low-pass and a radial-shell Wiener
//! filter. Both operate in the Fourier domain on periodic images.

use serde::{Deserialize, Serialize};

use crate::fft;
use crate::map::Image2D;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FilterSpec {
    /// Gaussian kernel width in pixels.
    Lowpass { sigma: f64 },
    /// Per-pixel noise variance.
    Wiener { noise_var: f64 },
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FilterSpec::Lowpass { sigma } if !(sigma > 0.0 && sigma.is_finite()) => Err(
                Error::Precondition(format!("lowpass sigma must be > 0, got {sigma}")),
            ),
            FilterSpec::Wiener { noise_var } if !(noise_var >= 0.0 && noise_var.is_finite()) => {
                Err(Error::Precondition(format!(
                    "wiener noise variance must be >= 0, got {noise_var}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(&self, image: &Image2D) -> Result<Image2D> {
        match *self {
            FilterSpec::Lowpass { sigma } => lowpass(image, sigma),
            FilterSpec::Wiener { noise_var } => wiener_shell(image, noise_var),
        }
    }
}

fn radial_freq(y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
    let fy = fft::signed_freq(y, h) as f64 / h as f64;
    let fx = fft::signed_freq(x, w) as f64 / w as f64;
    (fy, fx)
}

/// Convolution with a normalized Gaussian of width `sigma` pixels, applied as
/// the transfer function `exp(-2π²σ²|f|²)` (`f` in cycles/pixel).
pub fn lowpass(image: &Image2D, sigma: f64) -> Result<Image2D> {
    FilterSpec::Lowpass { sigma }.validate()?;
    let (h, w) = image.dim();
    let mut spectrum = fft::forward_real(image);
    let c = 2.0 * std::f64::consts::PI.powi(2) * sigma * sigma;
    for ((y, x), v) in spectrum.indexed_iter_mut() {
        let (fy, fx) = radial_freq(y, x, h, w);
        *v *= (-c * (fx * fx + fy * fy)).exp();
    }
    Ok(fft::inverse_real(spectrum).mapv(|v| v as f32))
}

/// Shell-wise Wiener attenuation.
///
/// For each radial shell `s` (integer-rounded Fourier radius) the spectrum is
/// scaled by `max(P_s - σ², 0) / P_s`, where `P_s` is the shell-mean power
/// `|F|² / N` and `σ²` is the per-pixel noise variance.
pub fn wiener_shell(image: &Image2D, noise_var: f64) -> Result<Image2D> {
    FilterSpec::Wiener { noise_var }.validate()?;
    let (h, w) = image.dim();
    let n_pix = (h * w) as f64;
    let mut spectrum = fft::forward_real(image);
    let shell_of = |y: usize, x: usize| {
        let ky = fft::signed_freq(y, h) as f64;
        let kx = fft::signed_freq(x, w) as f64;
        (kx * kx + ky * ky).sqrt().round() as usize
    };
    let max_shell = (h.max(w) as f64 * 0.75).ceil() as usize + 1;
    let mut power = vec![0.0f64; max_shell + 1];
    let mut count = vec![0usize; max_shell + 1];
    for ((y, x), v) in spectrum.indexed_iter() {
        let s = shell_of(y, x);
        power[s] += v.norm_sqr() / n_pix;
        count[s] += 1;
    }
    let gain: Vec<f64> = power
        .iter()
        .zip(&count)
        .map(|(&p, &c)| {
            if c == 0 {
                return 1.0;
            }
            let mean = p / c as f64;
            if mean > 0.0 {
                (mean - noise_var).max(0.0) / mean
            } else {
                1.0
            }
        })
        .collect();
    for ((y, x), v) in spectrum.indexed_iter_mut() {
        *v *= gain[shell_of(y, x)];
    }
    Ok(fft::inverse_real(spectrum).mapv(|v| v as f32))
}
