//! Encoder-decoder with skip connections and optional noise-level embedding.
//!
//! Level `l` works at resolution `H/2^l` with `base_width·2^l` channels. Each
//! level is a block `conv3×3 → (+ embedding) → SiLU → conv3×3 → SiLU`. The
//! encoder downsamples with 2×2 average pooling; the decoder upsamples by
//! nearest neighbour and concatenates the matching encoder output. A 1×1
//! convolution maps to the output channels, optionally added to the input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{self, Conv};
use super::{Param, ParamSet, Real};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub levels: usize,
    /// Width of the sinusoidal noise-level features; `None` disables them.
    pub embed_dim: Option<usize>,
    /// Adds the first `out_channels` input channels to the output.
    pub residual: bool,
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::Precondition(
                "channel counts must be positive".into(),
            ));
        }
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::Precondition(format!(
                "levels must be in 1..=8, got {}",
                self.levels
            )));
        }
        if let Some(e) = self.embed_dim {
            if e < 2 || e % 2 != 0 {
                return Err(Error::Precondition(format!(
                    "embed_dim must be even and >= 2, got {e}"
                )));
            }
        }
        if self.residual && self.out_channels > self.in_channels {
            return Err(Error::Precondition(
                "residual output needs out_channels <= in_channels".into(),
            ));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Image sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv_a: Conv,
    conv_b: Conv,
    a_w: usize,
    a_b: usize,
    b_w: usize,
    b_b: usize,
    embed: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct UNet<T> {
    pub config: UNetConfig,
    pub params: ParamSet<T>,
    enc: Vec<Block>,
    dec: Vec<Block>,
    out_conv: Conv,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Debug)]
struct BlockTrace<T> {
    h: usize,
    w: usize,
    col_a: Vec<T>,
    pre_a: Vec<T>,
    col_b: Vec<T>,
    pre_b: Vec<T>,
    out: Vec<T>,
}

/// Activations kept by [`UNet::forward_traced`] for the backward pass.
#[derive(Clone, Debug)]
pub struct UNetTrace<T> {
    features: Option<Vec<T>>,
    enc: Vec<BlockTrace<T>>,
    dec: Vec<BlockTrace<T>>,
    out_col: Vec<T>,
    h: usize,
    w: usize,
}

/// Sinusoidal features of the noise level, evaluated at `sqrt(gamma)`.
pub fn noise_features<T: Real>(gamma: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let level = 1000.0 * gamma.max(0.0).sqrt();
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let arg = level * freq;
        out[i] = T::from_f64(arg.sin());
        out[half + i] = T::from_f64(arg.cos());
    }
    out
}

impl<T: Real> UNet<T> {
    /// He-normal weights drawn from a stream seeded by `seed`, zero biases.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::empty();
        let mut init = |params: &mut ParamSet<T>, name: String, shape: &[usize], std: f64| {
            let mut p = Param::zeros(name, shape);
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("positive std");
                for v in &mut p.data {
                    *v = T::from_f64(normal.sample(&mut rng));
                }
            }
            params.push(p)
        };
        let mut block = |params: &mut ParamSet<T>, prefix: String, cin: usize, c: usize| {
            let conv_a = Conv { cin, cout: c, k: 3 };
            let conv_b = Conv {
                cin: c,
                cout: c,
                k: 3,
            };
            let he = |conv: &Conv| (2.0 / (conv.cin * conv.k * conv.k) as f64).sqrt();
            let a_w = init(
                params,
                format!("{prefix}.conv_a.weight"),
                &conv_a.weight_shape(),
                he(&conv_a),
            );
            let a_b = init(params, format!("{prefix}.conv_a.bias"), &[c], 0.0);
            let embed = config.embed_dim.map(|e| {
                let w = init(
                    params,
                    format!("{prefix}.embed.weight"),
                    &[c, e],
                    (1.0 / e as f64).sqrt(),
                );
                let b = init(params, format!("{prefix}.embed.bias"), &[c], 0.0);
                (w, b)
            });
            let b_w = init(
                params,
                format!("{prefix}.conv_b.weight"),
                &conv_b.weight_shape(),
                he(&conv_b),
            );
            let b_b = init(params, format!("{prefix}.conv_b.bias"), &[c], 0.0);
            Block {
                conv_a,
                conv_b,
                a_w,
                a_b,
                b_w,
                b_b,
                embed,
            }
        };

        let mut enc = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let cin = if l == 0 {
                config.in_channels
            } else {
                config.width(l - 1)
            };
            enc.push(block(&mut params, format!("enc{l}"), cin, config.width(l)));
        }
        let mut dec = Vec::with_capacity(config.levels - 1);
        for l in 0..config.levels - 1 {
            let cin = config.width(l + 1) + config.width(l);
            dec.push(block(&mut params, format!("dec{l}"), cin, config.width(l)));
        }
        let out_conv = Conv {
            cin: config.width(0),
            cout: config.out_channels,
            k: 1,
        };
        let out_std = (1.0 / out_conv.cin as f64).sqrt() * if config.residual { 0.1 } else { 1.0 };
        let out_w = init(
            &mut params,
            "out.weight".into(),
            &out_conv.weight_shape(),
            out_std,
        );
        let out_b = init(&mut params, "out.bias".into(), &[config.out_channels], 0.0);
        Ok(UNet {
            config,
            params,
            enc,
            dec,
            out_conv,
            out_w,
            out_b,
        })
    }

    /// Rebuilds the layout for `config` and takes values from `params`, which
    /// must match it name for name.
    pub fn from_params(config: UNetConfig, params: ParamSet<T>) -> Result<Self> {
        let mut net = UNet::new(config, 0)?;
        if !net.params.same_layout(&params) {
            return Err(Error::Shape(
                "parameter tensors do not match the architecture".into(),
            ));
        }
        net.params = params;
        Ok(net)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_values()
    }

    fn check_input(&self, input: &[T], h: usize, w: usize, gamma: Option<f64>) -> Result<()> {
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} must have sides divisible by {m}"
            )));
        }
        if input.len() != self.config.in_channels * h * w {
            return Err(Error::Shape(format!(
                "expected {} input values, got {}",
                self.config.in_channels * h * w,
                input.len()
            )));
        }
        if self.config.embed_dim.is_some() != gamma.is_some() {
            return Err(Error::Precondition(
                "noise level must be given exactly when the model embeds it".into(),
            ));
        }
        Ok(())
    }

    fn data(&self, idx: usize) -> &[T] {
        &self.params.params[idx].data
    }

    fn block_forward(
        &self,
        block: &Block,
        input: &[T],
        h: usize,
        w: usize,
        features: Option<&[T]>,
    ) -> BlockTrace<T> {
        let hw = h * w;
        let (mut pre_a, col_a) =
            block
                .conv_a
                .forward(input, h, w, self.data(block.a_w), self.data(block.a_b));
        if let (Some((ew, eb)), Some(feat)) = (block.embed, features) {
            let (ew, eb) = (self.data(ew), self.data(eb));
            let e = feat.len();
            for c in 0..block.conv_a.cout {
                let mut shift = eb[c];
                for j in 0..e {
                    shift += ew[c * e + j] * feat[j];
                }
                pre_a[c * hw..(c + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v += shift);
            }
        }
        let act_a = ops::silu(&pre_a);
        let (pre_b, col_b) =
            block
                .conv_b
                .forward(&act_a, h, w, self.data(block.b_w), self.data(block.b_b));
        let out = ops::silu(&pre_b);
        BlockTrace {
            h,
            w,
            col_a,
            pre_a,
            col_b,
            pre_b,
            out,
        }
    }

    fn block_backward(
        &self,
        block: &Block,
        trace: &BlockTrace<T>,
        mut d_out: Vec<T>,
        features: Option<&[T]>,
        grads: &mut ParamSet<T>,
        need_input_grad: bool,
    ) -> Option<Vec<T>> {
        let (h, w) = (trace.h, trace.w);
        let hw = h * w;
        ops::silu_backward(&trace.pre_b, &mut d_out);
        let mut d_act = {
            let (dw, db) = two_mut(grads, block.b_w, block.b_b);
            block
                .conv_b
                .backward(
                    &trace.col_b,
                    h,
                    w,
                    self.data(block.b_w),
                    &d_out,
                    dw,
                    db,
                    true,
                )
                .expect("input gradient requested")
        };
        ops::silu_backward(&trace.pre_a, &mut d_act);
        if let (Some((ew, eb)), Some(feat)) = (block.embed, features) {
            let e = feat.len();
            let (dw, db) = two_mut(grads, ew, eb);
            for c in 0..block.conv_a.cout {
                let mut s = T::zero();
                for &g in &d_act[c * hw..(c + 1) * hw] {
                    s += g;
                }
                db[c] += s;
                for j in 0..e {
                    dw[c * e + j] += s * feat[j];
                }
            }
        }
        let (dw, db) = two_mut(grads, block.a_w, block.a_b);
        block.conv_a.backward(
            &trace.col_a,
            h,
            w,
            self.data(block.a_w),
            &d_act,
            dw,
            db,
            need_input_grad,
        )
    }

    /// Applies the network to one `in_channels×h×w` input.
    pub fn forward(&self, input: &[T], h: usize, w: usize, gamma: Option<f64>) -> Result<Vec<T>> {
        Ok(self.forward_traced(input, h, w, gamma)?.0)
    }

    pub fn forward_traced(
        &self,
        input: &[T],
        h: usize,
        w: usize,
        gamma: Option<f64>,
    ) -> Result<(Vec<T>, UNetTrace<T>)> {
        self.check_input(input, h, w, gamma)?;
        let features = self
            .config
            .embed_dim
            .zip(gamma)
            .map(|(e, g)| noise_features::<T>(g, e));
        let feat = features.as_deref();
        let levels = self.config.levels;

        let mut enc = Vec::with_capacity(levels);
        let (mut hl, mut wl) = (h, w);
        let mut x = input.to_vec();
        for (l, block) in self.enc.iter().enumerate() {
            let t = self.block_forward(block, &x, hl, wl, feat);
            if l + 1 < levels {
                x = ops::avg_pool2(&t.out, self.config.width(l), hl, wl);
                hl /= 2;
                wl /= 2;
            } else {
                x = t.out.clone();
            }
            enc.push(t);
        }

        let mut dec: Vec<BlockTrace<T>> = Vec::with_capacity(levels - 1);
        for l in (0..levels - 1).rev() {
            let mut cat = ops::upsample2(&x, self.config.width(l + 1), hl, wl);
            hl *= 2;
            wl *= 2;
            cat.extend_from_slice(&enc[l].out);
            let t = self.block_forward(&self.dec[l], &cat, hl, wl, feat);
            x = t.out.clone();
            dec.push(t);
        }
        dec.reverse();

        let (mut out, out_col) =
            self.out_conv
                .forward(&x, h, w, self.data(self.out_w), self.data(self.out_b));
        if self.config.residual {
            for (o, &i) in out.iter_mut().zip(input) {
                *o += i;
            }
        }
        Ok((
            out,
            UNetTrace {
                features,
                enc,
                dec,
                out_col,
                h,
                w,
            },
        ))
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output`.
    pub fn backward(
        &self,
        trace: &UNetTrace<T>,
        d_out: &[T],
        grads: &mut ParamSet<T>,
    ) -> Result<()> {
        if !grads.same_layout(&self.params) {
            return Err(Error::Shape(
                "gradient buffer does not match the model".into(),
            ));
        }
        let (h, w) = (trace.h, trace.w);
        if d_out.len() != self.config.out_channels * h * w {
            return Err(Error::Shape("output gradient has the wrong size".into()));
        }
        let feat = trace.features.as_deref();
        let levels = self.config.levels;
        let mut d_x = {
            let (dw, db) = two_mut(grads, self.out_w, self.out_b);
            self.out_conv
                .backward(
                    &trace.out_col,
                    h,
                    w,
                    self.data(self.out_w),
                    d_out,
                    dw,
                    db,
                    true,
                )
                .expect("input gradient requested")
        };

        let mut d_skip: Vec<Vec<T>> = vec![Vec::new(); levels];
        for l in 0..levels - 1 {
            let t = &trace.dec[l];
            let d_cat = self
                .block_backward(&self.dec[l], t, d_x, feat, grads, true)
                .expect("input gradient requested");
            let up_len = self.config.width(l + 1) * t.h * t.w;
            d_skip[l] = d_cat[up_len..].to_vec();
            d_x = ops::upsample2_backward(
                &d_cat[..up_len],
                self.config.width(l + 1),
                t.h / 2,
                t.w / 2,
            );
        }

        for l in (0..levels).rev() {
            let t = &trace.enc[l];
            let d_out_l = if l + 1 == levels {
                d_x
            } else {
                let mut d = ops::avg_pool2_backward(&d_x, self.config.width(l), t.h, t.w);
                for (a, &b) in d.iter_mut().zip(&d_skip[l]) {
                    *a += b;
                }
                d
            };
            match self.block_backward(&self.enc[l], t, d_out_l, feat, grads, l > 0) {
                Some(d) => d_x = d,
                None => break,
            }
        }
        Ok(())
    }
}

/// Disjoint mutable access to two parameter tensors.
fn two_mut<T>(set: &mut ParamSet<T>, a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b, "weight is registered before its bias");
    let (lo, hi) = set.params.split_at_mut(b);
    (&mut lo[a].data, &mut hi[0].data)
}
