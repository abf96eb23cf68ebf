use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{loss_and_grad, DenoiserModel, GammaSampling, NoiseDraw};
use super::schedule::ScheduleSpec;
use crate::map::ImageStack;
use crate::nn::{fit, Adam, AdamConfig, EpochEnd, FitConfig, Real, UNet};
use crate::{Error, Result};

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
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub gamma_sampling: GammaSampling,
    pub rng_seed: u64,
    /// Epochs between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Precondition("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Precondition(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Precondition("grad_clip must be positive".into()));
            }
        }
        self.schedule.build()?;
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            grad_clip: self.grad_clip,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Checks that two stacks are non-empty, aligned and share one image shape.
pub(crate) fn check_pairs(inputs: &ImageStack, targets: &ImageStack) -> Result<(usize, usize)> {
    if inputs.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    if inputs.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    inputs.validate()?;
    targets.validate()?;
    let dim = inputs.image_dim().expect("non-empty");
    if targets.image_dim() != Some(dim) {
        return Err(Error::Shape(
            "inputs and targets differ in image shape".into(),
        ));
    }
    Ok(dim)
}

/// Fits the noise predictor on (noisy condition, clean target) pairs.
///
/// The stream seeded by `config.rng_seed` drives shuffling and every noise
/// draw. `on_epoch` sees the model after each epoch (for checkpoints).
pub fn train<T, F>(
    model: &mut DenoiserModel<T>,
    adam: &mut Adam<T>,
    conditions: &ImageStack,
    targets: &ImageStack,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<f64>>
where
    T: Real,
    F: FnMut(&DenoiserModel<T>, &Adam<T>, EpochEnd) -> Result<()>,
{
    config.validate()?;
    if config.schedule != model.schedule {
        return Err(Error::Precondition(
            "training schedule differs from the one the model was built with".into(),
        ));
    }
    let dim = check_pairs(conditions, targets)?;
    let schedule = config.schedule.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut net = model.net.clone();
    let (model_config, spec) = (model.config, model.schedule);
    let result = fit(
        &mut net,
        adam,
        conditions.len(),
        &config.fit_config(),
        &mut rng,
        |_, rng| NoiseDraw::sample(&schedule, dim, config.gamma_sampling, rng),
        |net: &UNet<T>, i, draw| {
            loss_and_grad(net, &conditions.images[i], &targets.images[i], draw)
        },
        |net, adam, end| {
            let view = DenoiserModel {
                config: model_config,
                schedule: spec,
                net: net.clone(),
            };
            on_epoch(&view, adam, end)
        },
    );
    // Divergence is caught before the update, so `net` is the last good state.
    model.net = net;
    result
}
