//! Conditional denoising diffusion.
//!
//! The forward process corrupts a clean image `y0` as
//! `y = √γ·y0 + √(1−γ)·ε`. A network `f_θ(x, y, γ)` sees the noisy particle
//! image `x` stacked with `y` as two channels, plus an embedding of `γ`, and
//! is trained to predict `ε` under a pixel-mean squared error. Sampling runs
//! the ancestral chain from `y_T ~ N(0, I)` down to `y_0`.
//!
//! Training draws continuous noise levels, so inference may use a shorter
//! schedule obtained with [`NoiseSchedule::respaced`].

mod model;
mod sample;
mod schedule;
mod train;

pub use model::{
    forward_diffuse, training_step, DenoiserConfig, DenoiserModel, GammaSampling, NoiseDraw,
    NoisePredictor, OracleDenoiser,
};
pub use sample::{sample, sample_many, DiffusionState};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleSpec};
pub use train::{train, TrainConfig};

pub(crate) use train::check_pairs;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::ImageStack;
    use crate::nn::Adam;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            base_width: 2,
            levels: 2,
            embed_dim: 4,
        }
    }

    #[test]
    fn training_step_gradient_matches_finite_differences() {
        let model = DenoiserModel::<f64>::new(tiny(), ScheduleSpec::default(), 11).unwrap();
        assert!(model.net.num_parameters() < 1000);
        let schedule = model.schedule.build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_simple_fn((8, 8), || rng.random_range(-1.0f32..1.0));
        let y0 = Array2::from_shape_simple_fn((8, 8), || rng.random_range(-1.0f32..1.0));
        let draw = NoiseDraw::sample(&schedule, (8, 8), GammaSampling::Continuous, &mut rng);
        let (_, grads) = model.loss_and_grad(&x, &y0, &draw).unwrap();

        let mut probe = model.clone();
        let h = 1e-6;
        for (pi, p) in model.params().params.iter().enumerate() {
            for vi in 0..p.data.len() {
                let orig = p.data[vi];
                probe.net.params.params[pi].data[vi] = orig + h;
                let plus = probe.loss(&x, &y0, &draw).unwrap();
                probe.net.params.params[pi].data[vi] = orig - h;
                let minus = probe.loss(&x, &y0, &draw).unwrap();
                probe.net.params.params[pi].data[vi] = orig;
                let fd = (plus - minus) / (2.0 * h);
                let an = grads.params[pi].data[vi];
                assert!(
                    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-4),
                    "{}[{vi}]: {fd} vs {an}",
                    p.name
                );
            }
        }
    }

    fn stacks(n: usize, seed: u64) -> (ImageStack, ImageStack) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut image = || Array2::from_shape_simple_fn((8, 8), || rng.random_range(-1.0f32..1.0));
        let xs = (0..n).map(|_| image()).collect();
        let ys = (0..n).map(|_| image()).collect();
        (
            ImageStack::new(xs, 1.0).unwrap(),
            ImageStack::new(ys, 1.0).unwrap(),
        )
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            learning_rate: 1e-3,
            schedule: ScheduleSpec::default(),
            gamma_sampling: GammaSampling::Continuous,
            rng_seed: 1,
            checkpoint_every: 0,
            grad_clip: Some(1.0),
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let mut model = DenoiserModel::<f32>::new(tiny(), ScheduleSpec::default(), 2).unwrap();
        let before = model.params().clone();
        let mut adam = Adam::new(config(0).adam(), model.params());
        let (xs, ys) = stacks(6, 0);
        let history = train(
            &mut model,
            &mut adam,
            &xs,
            &ys,
            &config(0),
            |_, _, _| Ok(()),
        )
        .unwrap();
        assert!(history.is_empty());
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn training_is_reproducible() {
        let (xs, ys) = stacks(10, 1);
        let run = || {
            let mut model = DenoiserModel::<f32>::new(tiny(), ScheduleSpec::default(), 2).unwrap();
            let mut adam = Adam::new(config(2).adam(), model.params());
            let mut epochs = Vec::new();
            let history = train(&mut model, &mut adam, &xs, &ys, &config(2), |_, _, e| {
                epochs.push(e.epoch);
                Ok(())
            })
            .unwrap();
            assert_eq!(epochs, vec![1, 2]);
            (history, model.params().clone())
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1.len(), 6);
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn mismatched_stacks_are_rejected() {
        let mut model = DenoiserModel::<f32>::new(tiny(), ScheduleSpec::default(), 2).unwrap();
        let mut adam = Adam::new(config(1).adam(), model.params());
        let (xs, _) = stacks(6, 0);
        let (_, ys) = stacks(5, 0);
        assert!(train(
            &mut model,
            &mut adam,
            &xs,
            &ys,
            &config(1),
            |_, _, _| Ok(())
        )
        .is_err());
    }
}
