//! Second-stage refinement of diffusion outputs.
//!
//! A small residual encoder-decoder maps a diffusion sample to a cleaner
//! image and is fitted with a pixel-mean squared error against the ground
//! truth. It never sees the original noisy image: the full pipeline is
//! exactly `apply_post ∘ sample`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, check_pairs, DenoiserModel, NoiseSchedule};
use crate::map::{Image2D, ImageStack};
use crate::nn::{fit, Adam, AdamConfig, EpochEnd, FitConfig, ParamSet, Real, UNet, UNetConfig};
use crate::simulate::child_seed;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostConfig {
    pub base_width: usize,
    pub levels: usize,
}

impl Default for PostConfig {
    /// Half the diffusion default width, about a quarter of its parameters.
    fn default() -> Self {
        PostConfig {
            base_width: 16,
            levels: 3,
        }
    }
}

impl PostConfig {
    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            base_width: self.base_width,
            levels: self.levels,
            embed_dim: None,
            residual: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PostModel<T = f32> {
    pub config: PostConfig,
    pub net: UNet<T>,
}

impl<T: Real> PostModel<T> {
    pub fn new(config: PostConfig, seed: u64) -> Result<Self> {
        Ok(PostModel {
            config,
            net: UNet::new(config.unet(), seed)?,
        })
    }

    pub fn from_params(config: PostConfig, params: ParamSet<T>) -> Result<Self> {
        Ok(PostModel {
            config,
            net: UNet::from_params(config.unet(), params)?,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.net.params
    }
}

fn to_input<T: Real>(image: &Image2D) -> Vec<T> {
    image.iter().map(|&v| T::from_f64(v as f64)).collect()
}

fn net_apply<T: Real>(net: &UNet<T>, image: &Image2D) -> Result<Image2D> {
    let (h, w) = image.dim();
    let out = net.forward(&to_input(image), h, w, None)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "refinement produced non-finite values".into(),
        ));
    }
    Ok(
        Array2::from_shape_vec((h, w), out.into_iter().map(|v| v.as_f64() as f32).collect())
            .expect("output has the input shape"),
    )
}

fn loss_and_grad<T: Real>(
    net: &UNet<T>,
    input: &Image2D,
    target: &Image2D,
) -> Result<(f64, ParamSet<T>)> {
    let (h, w) = input.dim();
    let (out, trace) = net.forward_traced(&to_input(input), h, w, None)?;
    let n = (h * w) as f64;
    let residual: Vec<T> = out
        .iter()
        .zip(target.iter())
        .map(|(&o, &t)| o - T::from_f64(t as f64))
        .collect();
    let loss = residual.iter().map(|r| r.as_f64().powi(2)).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::Numerical("non-finite refinement loss".into()));
    }
    let scale = T::from_f64(2.0 / n);
    let d_out: Vec<T> = residual.iter().map(|&r| r * scale).collect();
    let mut grads = net.params.zeros_like();
    net.backward(&trace, &d_out, &mut grads)?;
    Ok((loss, grads))
}

/// One forward pass.
pub fn apply_post<T: Real>(model: &PostModel<T>, image: &Image2D) -> Result<Image2D> {
    net_apply(&model.net, image)
}

pub fn apply_post_many<T: Real>(model: &PostModel<T>, images: &[Image2D]) -> Result<Vec<Image2D>> {
    images.par_iter().map(|im| apply_post(model, im)).collect()
}

/// Mean per-image MSE of the model output against `targets`.
pub fn evaluate_post<T: Real>(
    model: &PostModel<T>,
    inputs: &[Image2D],
    targets: &[Image2D],
) -> Result<f64> {
    let outputs = apply_post_many(model, inputs)?;
    let mut total = 0.0;
    for (o, t) in outputs.iter().zip(targets) {
        total += crate::metrics::mse(o, t)?;
    }
    Ok(total / inputs.len().max(1) as f64)
}

fn default_batch_size() -> usize {
    16
}

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostTrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub rng_seed: u64,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
}

impl PostTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Precondition("learning_rate must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Precondition("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Fits the refinement network on (diffusion output, ground truth) pairs.
pub fn train_post<T, F>(
    model: &mut PostModel<T>,
    adam: &mut Adam<T>,
    inputs: &ImageStack,
    targets: &ImageStack,
    config: &PostTrainConfig,
    mut on_epoch: F,
) -> Result<Vec<f64>>
where
    T: Real,
    F: FnMut(&PostModel<T>, &Adam<T>, EpochEnd) -> Result<()>,
{
    config.validate()?;
    check_pairs(inputs, targets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let fit_config = FitConfig {
        epochs: config.epochs,
        batch_size: config.batch_size,
        grad_clip: config.grad_clip,
    };
    let mut net = model.net.clone();
    let post_config = model.config;
    let result = fit(
        &mut net,
        adam,
        inputs.len(),
        &fit_config,
        &mut rng,
        |_, _| (),
        |net: &UNet<T>, i, _| loss_and_grad(net, &inputs.images[i], &targets.images[i]),
        |net, adam, end| {
            let view = PostModel {
                config: post_config,
                net: net.clone(),
            };
            on_epoch(&view, adam, end)
        },
    );
    model.net = net;
    result
}

/// Diffusion sample (deterministic chain) followed by refinement.
pub fn denoise_pipeline<T: Real, U: Real, R: Rng + ?Sized>(
    dmodel: &DenoiserModel<T>,
    pmodel: &PostModel<U>,
    x: &Image2D,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Image2D> {
    let stage1 = diffusion::sample(dmodel, x, schedule, rng, true)?;
    apply_post(pmodel, &stage1)
}

/// Both stages for every image, each on stream `child_seed(seed, index)`.
/// Returns (diffusion output, refined output) per image.
pub fn denoise_many<T: Real, U: Real>(
    dmodel: &DenoiserModel<T>,
    pmodel: &PostModel<U>,
    conditions: &[Image2D],
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<(Image2D, Image2D)>> {
    conditions
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, i as u64));
            let stage1 = diffusion::sample(dmodel, x, schedule, &mut rng, true)?;
            let stage2 = apply_post(pmodel, &stage1)?;
            Ok((stage1, stage2))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines;

    fn small() -> PostConfig {
        PostConfig {
            base_width: 4,
            levels: 2,
        }
    }

    fn config(epochs: usize) -> PostTrainConfig {
        PostTrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: 3e-3,
            rng_seed: 0,
            checkpoint_every: 0,
            grad_clip: Some(1.0),
        }
    }

    fn blobs(n: usize, seed: u64) -> Vec<Image2D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let (cy, cx, s) = (
                    rng.random_range(5.0..11.0),
                    rng.random_range(5.0..11.0),
                    rng.random_range(1.5..3.5),
                );
                Array2::from_shape_fn((16, 16), |(y, x)| {
                    let r2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    (2.0 * (-r2 / (2.0 * s * s)).exp() - 0.3) as f32
                })
            })
            .collect()
    }

    #[test]
    fn identity_task_is_learned() {
        let images = ImageStack::new(blobs(16, 1), 1.0).unwrap();
        let mut model = PostModel::<f32>::new(small(), 3).unwrap();
        let initial = evaluate_post(&model, &images.images, &images.images).unwrap();
        let mut adam = Adam::new(config(30).adam(), model.params());
        train_post(
            &mut model,
            &mut adam,
            &images,
            &images,
            &config(30),
            |_, _, _| Ok(()),
        )
        .unwrap();
        let fin = evaluate_post(&model, &images.images, &images.images).unwrap();
        assert!(fin < 0.1 * initial, "{fin} vs {initial}");
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let images = ImageStack::new(blobs(4, 2), 1.0).unwrap();
        let mut model = PostModel::<f32>::new(small(), 3).unwrap();
        let before = model.params().clone();
        let mut adam = Adam::new(config(0).adam(), model.params());
        train_post(
            &mut model,
            &mut adam,
            &images,
            &images,
            &config(0),
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert_eq!(model.params(), &before);
        let a = apply_post(&model, &images.images[0]).unwrap();
        let b = apply_post(&model, &images.images[0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (16, 16));
        assert!(apply_post(&model, &Array2::zeros((5, 5))).is_err());
    }

    #[test]
    fn learns_to_deblur() {
        let clean = blobs(80, 3);
        let blurred: Vec<Image2D> = clean
            .iter()
            .map(|c| baselines::lowpass(c, 1.0).unwrap())
            .collect();
        let inputs = ImageStack::new(blurred[..64].to_vec(), 1.0).unwrap();
        let targets = ImageStack::new(clean[..64].to_vec(), 1.0).unwrap();
        let mut model = PostModel::<f32>::new(small(), 4).unwrap();
        let mut adam = Adam::new(config(40).adam(), model.params());
        train_post(
            &mut model,
            &mut adam,
            &inputs,
            &targets,
            &config(40),
            |_, _, _| Ok(()),
        )
        .unwrap();
        let raw: f64 = blurred[64..]
            .iter()
            .zip(&clean[64..])
            .map(|(b, c)| crate::metrics::mse(b, c).unwrap())
            .sum::<f64>()
            / 16.0;
        let refined = evaluate_post(&model, &blurred[64..], &clean[64..]).unwrap();
        assert!(refined < raw, "{refined} vs {raw}");
    }
}
