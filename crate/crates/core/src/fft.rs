//! Thin N-dimensional FFT helpers over `rustfft`.
//!
//! Inverse transforms are normalized by `1/N`. The `centered` variants treat
//! real-space index `n/2` as the origin, which is the convention used by the
//! projector and the reconstruction code.

use ndarray::{Array, ArrayBase, Axis, Data, Dimension, Slice};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

pub use rustfft::num_complex::Complex64 as Complex;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// In-place transform along every axis.
pub fn fft_nd<D: Dimension>(data: &mut Array<Complex64, D>, direction: Direction) {
    let mut planner = FftPlanner::<f64>::new();
    let mut buffer = Vec::new();
    for axis in 0..data.ndim() {
        let n = data.len_of(Axis(axis));
        if n <= 1 {
            continue;
        }
        let fft = match direction {
            Direction::Forward => planner.plan_fft_forward(n),
            Direction::Inverse => planner.plan_fft_inverse(n),
        };
        for mut lane in data.lanes_mut(Axis(axis)) {
            buffer.clear();
            buffer.extend(lane.iter().copied());
            fft.process(&mut buffer);
            for (dst, src) in lane.iter_mut().zip(&buffer) {
                *dst = *src;
            }
        }
    }
    if direction == Direction::Inverse {
        let scale = 1.0 / data.len() as f64;
        data.mapv_inplace(|v| v * scale);
    }
}

/// Forward transform of a real array.
pub fn forward_real<S, D>(data: &ArrayBase<S, D>) -> Array<Complex64, D>
where
    S: Data<Elem = f32>,
    D: Dimension,
{
    let mut out = data.mapv(|v| Complex64::new(v as f64, 0.0));
    fft_nd(&mut out, Direction::Forward);
    out
}

/// Inverse transform, keeping the real part.
pub fn inverse_real<D: Dimension>(mut spectrum: Array<Complex64, D>) -> Array<f64, D> {
    fft_nd(&mut spectrum, Direction::Inverse);
    spectrum.mapv(|c| c.re)
}

/// Rolls every axis so that index `n/2` moves to index 0.
pub fn ifftshift<T: Clone, D: Dimension>(data: &Array<T, D>) -> Array<T, D> {
    roll(data, |n| n - n / 2)
}

/// Rolls every axis so that index 0 moves to index `n/2`.
pub fn fftshift<T: Clone, D: Dimension>(data: &Array<T, D>) -> Array<T, D> {
    roll(data, |n| n / 2)
}

fn roll<T: Clone, D: Dimension>(data: &Array<T, D>, shift: impl Fn(usize) -> usize) -> Array<T, D> {
    let mut out = data.to_owned();
    for axis in 0..data.ndim() {
        let n = data.len_of(Axis(axis));
        let s = shift(n) % n.max(1);
        if s == 0 {
            continue;
        }
        let src = out.clone();
        out.slice_axis_mut(Axis(axis), Slice::from(s..))
            .assign(&src.slice_axis(Axis(axis), Slice::from(..n - s)));
        out.slice_axis_mut(Axis(axis), Slice::from(..s))
            .assign(&src.slice_axis(Axis(axis), Slice::from(n - s..)));
    }
    out
}

/// Signed frequency of FFT index `i` on an axis of length `n`.
pub fn signed_freq(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// FFT index of signed frequency `k` on an axis of length `n`.
pub fn wrap_freq(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}
