//! Layer kernels on `[channels, height, width]` feature maps stored flat.

use super::Real;

/// `C = A·B + beta·C` where `A` is `m×k` and `B` is `k×n`, both row-major;
/// `ta`/`tb` mean the slice holds the transpose (`k×m` / `n×k`) instead.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_strided(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Unfolds `input` (`cin×h×w`) into the `(cin·k·k) × (h·w)` patch matrix for a
/// stride-1 convolution with zero "same" padding.
pub fn im2col<T: Real>(input: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut col = vec![T::zero(); cin * k * k * hw];
    for c in 0..cin {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let shift = kx as isize - pad as isize;
                    let (x0, x1) = (
                        (-shift).max(0) as usize,
                        (w as isize - shift).min(w as isize) as usize,
                    );
                    for x in x0..x1 {
                        dst[x] = src[(x as isize + shift) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input grid.
pub fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut out = vec![T::zero(); cin * hw];
    for c in 0..cin {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    let shift = kx as isize - pad as isize;
                    let (x0, x1) = (
                        (-shift).max(0) as usize,
                        (w as isize - shift).min(w as isize) as usize,
                    );
                    for x in x0..x1 {
                        dst[(x as isize + shift) as usize] += src[x];
                    }
                }
            }
        }
    }
    out
}

/// Geometry of a stride-1, same-padded 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.k, self.k]
    }

    /// Returns the output and the patch matrix needed by [`Conv::backward`].
    /// For 1×1 kernels the patch matrix is the input itself.
    pub fn forward<T: Real>(
        &self,
        input: &[T],
        h: usize,
        w: usize,
        weight: &[T],
        bias: &[T],
    ) -> (Vec<T>, Vec<T>) {
        let hw = h * w;
        let col = if self.k == 1 {
            input.to_vec()
        } else {
            im2col(input, self.cin, h, w, self.k)
        };
        let mut out = vec![T::zero(); self.cout * hw];
        for (o, &b) in bias.iter().enumerate() {
            out[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = b);
        }
        gemm(
            self.cout,
            self.cin * self.k * self.k,
            hw,
            weight,
            false,
            &col,
            false,
            T::one(),
            &mut out,
        );
        (out, col)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        col: &[T],
        h: usize,
        w: usize,
        weight: &[T],
        d_out: &[T],
        d_weight: &mut [T],
        d_bias: &mut [T],
        need_input_grad: bool,
    ) -> Option<Vec<T>> {
        let hw = h * w;
        let kk = self.cin * self.k * self.k;
        for (o, db) in d_bias.iter_mut().enumerate() {
            let mut s = T::zero();
            for &g in &d_out[o * hw..(o + 1) * hw] {
                s += g;
            }
            *db += s;
        }
        gemm(
            self.cout,
            hw,
            kk,
            d_out,
            false,
            col,
            true,
            T::one(),
            d_weight,
        );
        if !need_input_grad {
            return None;
        }
        let mut d_col = vec![T::zero(); kk * hw];
        gemm(
            kk,
            self.cout,
            hw,
            weight,
            true,
            d_out,
            false,
            T::zero(),
            &mut d_col,
        );
        Some(if self.k == 1 {
            d_col
        } else {
            col2im(&d_col, self.cin, h, w, self.k)
        })
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Multiplies `grad` in place by `silu'(pre)`.
pub fn silu_backward<T: Real>(pre: &[T], grad: &mut [T]) {
    for (g, &x) in grad.iter_mut().zip(pre) {
        let s = sigmoid(x);
        *g *= s * (T::one() + x * (T::one() - s));
    }
}

/// 2×2 average pooling; `h` and `w` must be even.
pub fn avg_pool2<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..][..h * w];
        let dst = &mut out[ch * oh * ow..][..oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = (2 * y, 2 * x);
                dst[y * ow + x] = (src[sy * w + sx]
                    + src[sy * w + sx + 1]
                    + src[(sy + 1) * w + sx]
                    + src[(sy + 1) * w + sx + 1])
                    * quarter;
            }
        }
    }
    out
}

/// Gradient of [`avg_pool2`] with respect to its input (`h×w` is the input size).
pub fn avg_pool2_backward<T: Real>(d_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &d_out[ch * oh * ow..][..oh * ow];
        let dst = &mut out[ch * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * ow + x / 2] * quarter;
            }
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling from `h×w`.
pub fn upsample2<T: Real>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..][..h * w];
        let dst = &mut out[ch * oh * ow..][..oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                dst[y * ow + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

/// Gradient of [`upsample2`]; `h×w` is the pre-upsampling size.
pub fn upsample2_backward<T: Real>(d_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &d_out[ch * oh * ow..][..oh * ow];
        let dst = &mut out[ch * h * w..][..h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Direct convolution used as an independent reference.
    fn conv_direct(
        input: &[f64],
        weight: &[f64],
        bias: &[f64],
        conv: Conv,
        h: usize,
        w: usize,
    ) -> Vec<f64> {
        let pad = (conv.k / 2) as isize;
        let mut out = vec![0.0; conv.cout * h * w];
        for o in 0..conv.cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[o];
                    for c in 0..conv.cin {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = x as isize + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += weight[((o * conv.cin + c) * conv.k + ky) * conv.k + kx]
                                    * input[(c * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(o * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let conv = Conv { cin: 3, cout: 4, k };
            let (h, w) = (5, 7);
            let input = random(3 * h * w, &mut rng);
            let weight = random(4 * 3 * k * k, &mut rng);
            let bias = random(4, &mut rng);
            let (out, _) = conv.forward(&input, h, w, &weight, &bias);
            let reference = conv_direct(&input, &weight, &bias, conv, h, w);
            for (a, b) in out.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, h, w, k) = (2, 6, 4, 3);
        let x = random(c * h * w, &mut rng);
        let y = random(c * k * k * h * w, &mut rng);
        assert!(
            (dot(&im2col(&x, c, h, w, k), &y) - dot(&x, &col2im(&y, c, h, w, k))).abs() < 1e-12
        );

        let p = random(c * h / 2 * w / 2, &mut rng);
        assert!(
            (dot(&avg_pool2(&x, c, h, w), &p) - dot(&x, &avg_pool2_backward(&p, c, h, w))).abs()
                < 1e-12
        );

        let u = random(c * h * w * 4, &mut rng);
        assert!(
            (dot(&upsample2(&x, c, h, w), &u) - dot(&x, &upsample2_backward(&u, c, h, w))).abs()
                < 1e-12
        );
    }

    #[test]
    fn silu_derivative_matches_difference() {
        let xs: [f64; 5] = [-3.0, -0.5, 0.0, 0.7, 2.5];
        let mut grad = vec![1.0; xs.len()];
        silu_backward(&xs, &mut grad);
        for (x, g) in xs.iter().zip(&grad) {
            let h = 1e-6;
            let fd = (silu(&[x + h])[0] - silu(&[x - h])[0]) / (2.0 * h);
            assert!((fd - g).abs() < 1e-8);
        }
    }
}
