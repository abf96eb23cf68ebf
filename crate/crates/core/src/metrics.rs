//! Image-quality metrics and Fourier shell correlation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayBase, ArrayView2, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::fft;
use crate::map::{DensityMap, Image2D};
use crate::{Error, Result};

/// FSC threshold for resolution estimation.
pub const FSC_THRESHOLD: f64 = 0.143;

const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean of squared differences over all pixels/voxels.
pub fn mse<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>) -> Result<f64>
where
    S1: Data<Elem = f32>,
    S2: Data<Elem = f32>,
    D: Dimension,
{
    check_shapes(a.shape(), b.shape())?;
    if a.is_empty() {
        return Err(Error::Shape("empty arrays".into()));
    }
    let sum = Zip::from(a).and(b).fold(0.0f64, |acc, &x, &y| {
        let d = x as f64 - y as f64;
        acc + d * d
    });
    Ok(sum / a.len() as f64)
}

/// `10·log10(range² / mse)` in dB; `+∞` for identical inputs.
pub fn psnr<S1, S2, D>(a: &ArrayBase<S1, D>, b: &ArrayBase<S2, D>, data_range: f64) -> Result<f64>
where
    S1: Data<Elem = f32>,
    S2: Data<Elem = f32>,
    D: Dimension,
{
    if !(data_range > 0.0) {
        return Err(Error::Precondition(format!(
            "data_range must be > 0, got {data_range}"
        )));
    }
    Ok(psnr_from_mse(mse(a, b)?, data_range))
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

fn gaussian_taps() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut taps = std::array::from_fn(|i| {
        let x = i as f64 - SSIM_RADIUS as f64;
        (-0.5 * x * x / (SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian filter evaluated only where the window fits.
fn filter_valid(image: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = image.dim();
    let k = taps.len();
    let rows = Array2::from_shape_fn((h, w + 1 - k), |(y, x)| {
        taps.iter()
            .enumerate()
            .map(|(i, t)| t * image[[y, x + i]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h + 1 - k, w + 1 - k), |(y, x)| {
        taps.iter()
            .enumerate()
            .map(|(i, t)| t * rows[[y + i, x]])
            .sum::<f64>()
    })
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5).
///
/// Local statistics use population (biased) moments and are averaged over the
/// positions where the window lies entirely inside the image.
pub fn ssim(a: ArrayView2<f32>, b: ArrayView2<f32>, data_range: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let win = 2 * SSIM_RADIUS + 1;
    let (h, w) = a.dim();
    if h < win || w < win {
        return Err(Error::Precondition(format!(
            "SSIM needs images of at least {win}x{win}, got {h}x{w}"
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::Precondition(format!(
            "data_range must be > 0, got {data_range}"
        )));
    }
    let taps = gaussian_taps();
    let x = a.mapv(|v| v as f64);
    let y = b.mapv(|v| v as f64);
    let mu_x = filter_valid(&x, &taps);
    let mu_y = filter_valid(&y, &taps);
    let xx = filter_valid(&(&x * &x), &taps);
    let yy = filter_valid(&(&y * &y), &taps);
    let xy = filter_valid(&(&x * &y), &taps);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for (((&mx, &my), (&sxx, &syy)), &sxy) in
        mu_x.iter().zip(&mu_y).zip(xx.iter().zip(&yy)).zip(&xy)
    {
        let vx = sxx - mx * mx;
        let vy = syy - my * my;
        let cov = sxy - mx * my;
        total +=
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Maps `image` and `reference` affinely so the reference spans `[0, 1]`.
pub fn normalize_to_reference(image: &Image2D, reference: &Image2D) -> (Image2D, Image2D) {
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let map = |v: f32| ((v as f64 - lo) / span) as f32;
    (image.mapv(map), reference.mapv(map))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub mse: f64,
    #[serde(with = "float_or_inf")]
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Scores `image` against `clean` after normalizing both to the clean image's
/// `[0, 1]` range (so `data_range = 1`).
pub fn score_image(image: &Image2D, clean: &Image2D) -> Result<ImageScores> {
    let (x, reference) = normalize_to_reference(image, clean);
    let mse = mse(&x, &reference)?;
    Ok(ImageScores {
        mse,
        psnr_db: psnr_from_mse(mse, 1.0),
        ssim: ssim(x.view(), reference.view(), 1.0)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "float_or_inf")]
    pub mean: f64,
    #[serde(with = "float_or_inf")]
    pub std: f64,
}

impl Aggregate {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = if mean.is_finite() {
            values.map(|v| (v - mean).powi(2)).sum::<f64>() / n
        } else {
            f64::NAN
        };
        Aggregate {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub method: String,
    pub images: Vec<ImageScores>,
    pub mse: Aggregate,
    pub psnr_db: Aggregate,
    pub ssim: Aggregate,
}

pub const METRICS_CSV_HEADER: &str = "index,mse,psnr_db,ssim";

impl MetricsReport {
    pub fn evaluate(
        dataset: &str,
        method: &str,
        images: &[Image2D],
        clean: &[Image2D],
    ) -> Result<Self> {
        if images.len() != clean.len() || images.is_empty() {
            return Err(Error::Shape(format!(
                "{} images scored against {} references",
                images.len(),
                clean.len()
            )));
        }
        let scores = images
            .iter()
            .zip(clean)
            .map(|(im, c)| score_image(im, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_scores(dataset, method, scores))
    }

    pub fn from_scores(dataset: &str, method: &str, images: Vec<ImageScores>) -> Self {
        MetricsReport {
            dataset: dataset.into(),
            method: method.into(),
            mse: Aggregate::of(images.iter().map(|s| s.mse)),
            psnr_db: Aggregate::of(images.iter().map(|s| s.psnr_db)),
            ssim: Aggregate::of(images.iter().map(|s| s.ssim)),
            images,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for (i, s) in self.images.iter().enumerate() {
            writeln!(out, "{i},{},{},{}", s.mse, fmt_float(s.psnr_db), s.ssim).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn fmt_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        v.to_string()
    }
}

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
pub(crate) mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else {
            s.serialize_str(&super::fmt_float(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(v),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Correlation per radial Fourier shell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FscCurve {
    /// Shell-center spatial frequency, 1/Å.
    pub shell_freq: Vec<f64>,
    pub correlation: Vec<f64>,
    pub shell_counts: Vec<usize>,
}

pub const FSC_CSV_HEADER: &str = "shell_freq_invA,fsc,count";

impl FscCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(FSC_CSV_HEADER);
        out.push('\n');
        for ((f, c), n) in self
            .shell_freq
            .iter()
            .zip(&self.correlation)
            .zip(&self.shell_counts)
        {
            writeln!(out, "{f},{c},{n}").unwrap();
        }
        out
    }

    pub fn nyquist(&self) -> f64 {
        self.shell_freq.last().copied().unwrap_or(f64::NAN)
    }
}

/// Fourier shell correlation of two cubic maps.
///
/// Shells are one Fourier voxel wide; voxel `k` belongs to shell
/// `round(|k|)`, and shells `1..=n/2` are reported.
pub fn fsc(a: &DensityMap, b: &DensityMap) -> Result<FscCurve> {
    let n = a.cubic_side()?;
    if b.cubic_side()? != n {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if (a.voxel_size - b.voxel_size).abs() > 1e-9 * a.voxel_size {
        return Err(Error::Precondition(format!(
            "voxel sizes differ: {} vs {}",
            a.voxel_size, b.voxel_size
        )));
    }
    let fa = fft::forward_real(&a.voxels);
    let fb = fft::forward_real(&b.voxels);
    let shells = n / 2;
    let mut cross = vec![0.0f64; shells + 1];
    let mut pa = vec![0.0f64; shells + 1];
    let mut pb = vec![0.0f64; shells + 1];
    let mut counts = vec![0usize; shells + 1];
    for ((z, y, x), va) in fa.indexed_iter() {
        let k = [
            fft::signed_freq(x, n),
            fft::signed_freq(y, n),
            fft::signed_freq(z, n),
        ];
        let r = ((k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64).sqrt();
        let shell = r.round() as usize;
        if shell == 0 || shell > shells {
            continue;
        }
        let vb = fb[[z, y, x]];
        cross[shell] += va.re * vb.re + va.im * vb.im;
        pa[shell] += va.norm_sqr();
        pb[shell] += vb.norm_sqr();
        counts[shell] += 1;
    }
    let box_len = n as f64 * a.voxel_size;
    let mut curve = FscCurve {
        shell_freq: Vec::with_capacity(shells),
        correlation: Vec::with_capacity(shells),
        shell_counts: Vec::with_capacity(shells),
    };
    for s in 1..=shells {
        let denom = (pa[s] * pb[s]).sqrt();
        curve.shell_freq.push(s as f64 / box_len);
        curve
            .correlation
            .push(if denom > 0.0 { cross[s] / denom } else { 0.0 });
        curve.shell_counts.push(counts[s]);
    }
    Ok(curve)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    /// Resolution in Å.
    pub angstrom: f64,
    /// Frequency of the crossing, 1/Å.
    pub frequency: f64,
    /// `false` when the curve never drops below the threshold; the Nyquist
    /// resolution is reported instead.
    pub crossed: bool,
}

/// First crossing of `threshold` scanning shells in increasing frequency,
/// interpolated linearly between the bracketing shells.
pub fn resolution_at(curve: &FscCurve, threshold: f64) -> Resolution {
    let (f, c) = (&curve.shell_freq, &curve.correlation);
    for i in 0..c.len() {
        if c[i] < threshold {
            let frequency = if i == 0 {
                f[0]
            } else {
                let t = (c[i - 1] - threshold) / (c[i - 1] - c[i]);
                f[i - 1] + t * (f[i] - f[i - 1])
            };
            return Resolution {
                angstrom: 1.0 / frequency,
                frequency,
                crossed: true,
            };
        }
    }
    let nyquist = curve.nyquist();
    Resolution {
        angstrom: 1.0 / nyquist,
        frequency: nyquist,
        crossed: false,
    }
}
