use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleSpec};
use crate::map::Image2D;
use crate::nn::{ParamSet, Real, UNet, UNetConfig, UNetTrace};
use crate::{Error, Result};

/// Anything that estimates the noise in `y_t` given the condition `x`.
pub trait NoisePredictor: Sync {
    fn predict_noise(&self, x: &Image2D, y_t: &Array2<f64>, gamma: f64) -> Result<Array2<f64>>;
}

/// `√γ·y0 + √(1−γ)·eps`.
pub fn forward_diffuse(y0: &Image2D, gamma: f64, eps: &Image2D) -> Result<Image2D> {
    if y0.dim() != eps.dim() {
        return Err(Error::Precondition(format!(
            "image {:?} and noise {:?} differ in shape",
            y0.dim(),
            eps.dim()
        )));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Precondition(format!("gamma {gamma} outside (0, 1]")));
    }
    let (a, b) = (gamma.sqrt(), (1.0 - gamma).sqrt());
    Ok(Zip::from(y0)
        .and(eps)
        .map_collect(|&y, &e| (a * y as f64 + b * e as f64) as f32))
}

/// How training picks the noise level of each example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaSampling {
    /// `t` uniform, then `γ` uniform in `(γ_t, γ_{t−1})`.
    #[default]
    Continuous,
    /// `t` uniform, `γ = γ_t`.
    Discrete,
}

/// The random part of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub gamma: f64,
    pub eps: Image2D,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(
        schedule: &NoiseSchedule,
        shape: (usize, usize),
        rule: GammaSampling,
        rng: &mut R,
    ) -> Self {
        let i = rng.random_range(0..schedule.steps());
        let (lo, hi) = (schedule.gamma[i], schedule.gamma_prev(i));
        let gamma = match rule {
            GammaSampling::Continuous => {
                let u: f64 = rng.random();
                // Stay strictly inside the interval so γ < 1 at the first step.
                (lo + u * (hi - lo)).clamp(lo, hi * (1.0 - 1e-12))
            }
            GammaSampling::Discrete => lo,
        };
        let eps = Array2::from_shape_simple_fn(shape, || rng.sample::<f32, _>(StandardNormal));
        NoiseDraw { gamma, eps }
    }
}

/// Architecture of the conditional noise predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_width: usize,
    pub levels: usize,
    pub embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_width: 32,
            levels: 3,
            embed_dim: 32,
        }
    }
}

impl DenoiserConfig {
    /// The condition and the iterate enter as two stacked channels.
    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 2,
            out_channels: 1,
            base_width: self.base_width,
            levels: self.levels,
            embed_dim: Some(self.embed_dim),
            residual: false,
        }
    }
}

/// `f_θ(x, y_t, γ)` together with the training schedule it was fitted on.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T = f32> {
    pub config: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub net: UNet<T>,
}

impl<T: Real> DenoiserModel<T> {
    pub fn new(config: DenoiserConfig, schedule: ScheduleSpec, seed: u64) -> Result<Self> {
        schedule.build()?;
        Ok(DenoiserModel {
            config,
            schedule,
            net: UNet::new(config.unet(), seed)?,
        })
    }

    pub fn from_params(
        config: DenoiserConfig,
        schedule: ScheduleSpec,
        params: ParamSet<T>,
    ) -> Result<Self> {
        schedule.build()?;
        Ok(DenoiserModel {
            config,
            schedule,
            net: UNet::from_params(config.unet(), params)?,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.net.params
    }

    /// Loss of one example with the randomness fixed.
    pub fn loss(&self, x: &Image2D, y0: &Image2D, draw: &NoiseDraw) -> Result<f64> {
        Ok(objective(&self.net, x, y0, draw)?.0)
    }

    /// Loss and `∂loss/∂θ` of one example with the randomness fixed.
    pub fn loss_and_grad(
        &self,
        x: &Image2D,
        y0: &Image2D,
        draw: &NoiseDraw,
    ) -> Result<(f64, ParamSet<T>)> {
        loss_and_grad(&self.net, x, y0, draw)
    }
}

fn stack_input<T, I, J>(x: I, y: J, len: usize) -> Vec<T>
where
    T: Real,
    I: Iterator<Item = f64>,
    J: Iterator<Item = f64>,
{
    let mut input = Vec::with_capacity(2 * len);
    input.extend(x.map(T::from_f64));
    input.extend(y.map(T::from_f64));
    input
}

/// Forward pass returning the pixel-mean squared error against the drawn
/// noise, the residual and the trace for the gradient.
fn objective<T: Real>(
    net: &UNet<T>,
    x: &Image2D,
    y0: &Image2D,
    draw: &NoiseDraw,
) -> Result<(f64, Vec<T>, UNetTrace<T>)> {
    if x.dim() != y0.dim() || x.dim() != draw.eps.dim() {
        return Err(Error::Precondition(format!(
            "condition {:?}, target {:?} and noise {:?} must share a shape",
            x.dim(),
            y0.dim(),
            draw.eps.dim()
        )));
    }
    let (h, w) = x.dim();
    let y_t = forward_diffuse(y0, draw.gamma, &draw.eps)?;
    let input = stack_input(
        x.iter().map(|&v| v as f64),
        y_t.iter().map(|&v| v as f64),
        h * w,
    );
    let (out, trace) = net.forward_traced(&input, h, w, Some(draw.gamma))?;
    let n = (h * w) as f64;
    let residual: Vec<T> = out
        .iter()
        .zip(draw.eps.iter())
        .map(|(&o, &e)| o - T::from_f64(e as f64))
        .collect();
    let loss = residual.iter().map(|r| r.as_f64().powi(2)).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite training loss at gamma {}",
            draw.gamma
        )));
    }
    Ok((loss, residual, trace))
}

pub(crate) fn loss_and_grad<T: Real>(
    net: &UNet<T>,
    x: &Image2D,
    y0: &Image2D,
    draw: &NoiseDraw,
) -> Result<(f64, ParamSet<T>)> {
    let (loss, residual, trace) = objective(net, x, y0, draw)?;
    let scale = T::from_f64(2.0 / residual.len() as f64);
    let d_out: Vec<T> = residual.iter().map(|&r| r * scale).collect();
    let mut grads = net.params.zeros_like();
    net.backward(&trace, &d_out, &mut grads)?;
    Ok((loss, grads))
}

impl<T: Real> NoisePredictor for DenoiserModel<T> {
    fn predict_noise(&self, x: &Image2D, y_t: &Array2<f64>, gamma: f64) -> Result<Array2<f64>> {
        if x.dim() != y_t.dim() {
            return Err(Error::Precondition(
                "condition and iterate differ in shape".into(),
            ));
        }
        let (h, w) = x.dim();
        let input = stack_input(x.iter().map(|&v| v as f64), y_t.iter().copied(), h * w);
        let out = self.net.forward(&input, h, w, Some(gamma))?;
        Ok(
            Array2::from_shape_vec((h, w), out.into_iter().map(|v| v.as_f64()).collect())
                .expect("output has the input shape"),
        )
    }
}

/// Samples `t`, `γ` and `ε` from `rng` and returns the loss and gradient of
/// one example.
pub fn training_step<T: Real, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    x: &Image2D,
    y0: &Image2D,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, ParamSet<T>)> {
    let draw = NoiseDraw::sample(schedule, x.dim(), GammaSampling::Continuous, rng);
    model.loss_and_grad(x, y0, &draw)
}

/// Knows the clean image and returns the exact noise of any iterate.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    pub y0: Array2<f64>,
}

impl NoisePredictor for OracleDenoiser {
    fn predict_noise(&self, _x: &Image2D, y_t: &Array2<f64>, gamma: f64) -> Result<Array2<f64>> {
        let (a, b) = (gamma.sqrt(), (1.0 - gamma).sqrt());
        Ok(Zip::from(y_t)
            .and(&self.y0)
            .map_collect(|&y, &y0| (y - a * y0) / b))
    }
}
