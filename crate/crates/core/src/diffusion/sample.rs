use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::model::NoisePredictor;
use super::schedule::NoiseSchedule;
use crate::map::Image2D;
use crate::simulate::child_seed;
use crate::{Error, Result};

/// One step of the reverse chain: the iterate `y_t` at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionState {
    pub t: usize,
    pub y: Array2<f64>,
}

impl DiffusionState {
    /// `y_T ~ N(0, I)`.
    pub fn start<R: Rng + ?Sized>(shape: (usize, usize), steps: usize, rng: &mut R) -> Self {
        DiffusionState {
            t: steps,
            y: Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal)),
        }
    }

    /// Moves from `y_t` to `y_{t−1}`.
    pub fn step<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
        &mut self,
        model: &P,
        x: &Image2D,
        schedule: &NoiseSchedule,
        rng: &mut R,
        deterministic: bool,
    ) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Precondition("the chain is already at t = 0".into()));
        }
        let i = self.t - 1;
        let (alpha, beta, gamma) = (schedule.alpha[i], schedule.beta[i], schedule.gamma[i]);
        let eps = model.predict_noise(x, &self.y, gamma)?;
        if eps.dim() != self.y.dim() {
            return Err(Error::Shape(
                "noise prediction changed the image shape".into(),
            ));
        }
        let c = beta / (1.0 - gamma).sqrt();
        let inv = 1.0 / alpha.sqrt();
        Zip::from(&mut self.y)
            .and(&eps)
            .for_each(|y, &e| *y = inv * (*y - c * e));
        if !deterministic && self.t > 1 {
            let sigma = schedule.sigma[i];
            self.y
                .mapv_inplace(|y| y + sigma * rng.sample::<f64, _>(StandardNormal));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite iterate at step {}",
                self.t
            )));
        }
        self.t -= 1;
        Ok(())
    }
}

/// Ancestral sampling of `y_0` conditioned on `x`. With `deterministic` the
/// chain still starts from random `y_T` but adds no noise along the way.
pub fn sample<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    x: &Image2D,
    schedule: &NoiseSchedule,
    rng: &mut R,
    deterministic: bool,
) -> Result<Image2D> {
    let mut state = DiffusionState::start(x.dim(), schedule.steps(), rng);
    while state.t > 0 {
        state.step(model, x, schedule, rng, deterministic)?;
    }
    Ok(state.y.mapv(|v| v as f32))
}

/// Samples every condition image with its own stream
/// `child_seed(seed, index)`; the result does not depend on thread count.
pub fn sample_many<P: NoisePredictor + ?Sized>(
    model: &P,
    conditions: &[Image2D],
    schedule: &NoiseSchedule,
    seed: u64,
    deterministic: bool,
) -> Result<Vec<Image2D>> {
    conditions
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, i as u64));
            sample(model, x, schedule, &mut rng, deterministic)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, OracleDenoiser};

    fn target(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(y, x)| {
            ((x as f64) * 0.7).sin() + (y as f64 * 0.3).cos()
        })
    }

    #[test]
    fn oracle_single_step_recovers_target() {
        let y0 = target(16);
        let oracle = OracleDenoiser { y0: y0.clone() };
        let schedule = make_schedule(1, 0.5, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = sample(&oracle, &y0.mapv(|v| v as f32), &schedule, &mut rng, false).unwrap();
        assert!(out
            .iter()
            .zip(&y0)
            .all(|(a, b)| (*a as f64 - b).abs() < 1e-5));
    }

    #[test]
    fn oracle_chain_recovers_target() {
        let y0 = target(16);
        let oracle = OracleDenoiser { y0: y0.clone() };
        let schedule = make_schedule(50, 1e-4, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = sample(&oracle, &y0.mapv(|v| v as f32), &schedule, &mut rng, true).unwrap();
        assert_eq!(out.dim(), (16, 16));
        assert!(out
            .iter()
            .zip(&y0)
            .all(|(a, b)| (*a as f64 - b).abs() < 1e-3));
    }

    #[test]
    fn chain_past_zero_is_an_error() {
        let y0 = target(4);
        let oracle = OracleDenoiser { y0: y0.clone() };
        let schedule = make_schedule(1, 0.5, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut state = DiffusionState::start((4, 4), 1, &mut rng);
        let x = y0.mapv(|v| v as f32);
        state.step(&oracle, &x, &schedule, &mut rng, true).unwrap();
        assert!(state.step(&oracle, &x, &schedule, &mut rng, true).is_err());
    }

    #[test]
    fn many_is_seeded_per_index() {
        let y0 = target(4);
        let oracle = OracleDenoiser { y0 };
        let schedule = make_schedule(5, 0.01, 0.2).unwrap();
        let xs = vec![Array2::zeros((4, 4)); 3];
        let a = sample_many(&oracle, &xs, &schedule, 9, false).unwrap();
        let b = sample_many(&oracle, &xs, &schedule, 9, false).unwrap();
        assert_eq!(a, b);
    }
}
