//! Shuffled mini-batch loop shared by the trainable models.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Adam, ParamSet, Real, UNet};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Rescales the summed batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

/// Per-epoch summary handed to the epoch callback.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochEnd {
    pub epoch: usize,
    pub steps: u64,
    pub mean_loss: f64,
}

/// Runs `config.epochs` passes over items `0..n`.
///
/// Each step draws per-item randomness serially with `draw` (in shuffled
/// order, from `rng`), evaluates `loss_grad` for the batch items, possibly in
/// parallel, and reduces their gradients in item order, so results do not
/// depend on the thread count. Returns the mean loss of every step.
///
/// A non-finite loss or gradient aborts with [`Error::Numerical`] before the
/// offending update, leaving `net` at its last good parameters.
#[allow(clippy::too_many_arguments)]
pub fn fit<T, D, DrawFn, GradFn, EpochFn>(
    net: &mut UNet<T>,
    adam: &mut Adam<T>,
    n: usize,
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
    mut draw: DrawFn,
    loss_grad: GradFn,
    mut on_epoch: EpochFn,
) -> Result<Vec<f64>>
where
    T: Real,
    D: Send + Sync,
    DrawFn: FnMut(usize, &mut ChaCha8Rng) -> D,
    GradFn: Fn(&UNet<T>, usize, &D) -> Result<(f64, ParamSet<T>)> + Sync,
    EpochFn: FnMut(&UNet<T>, &Adam<T>, EpochEnd) -> Result<()>,
{
    if config.epochs > 0 && n == 0 {
        return Err(Error::Precondition(
            "cannot train on an empty dataset".into(),
        ));
    }
    if config.batch_size == 0 {
        return Err(Error::Precondition("batch_size must be positive".into()));
    }
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            let draws: Vec<(usize, D)> = batch.iter().map(|&i| (i, draw(i, rng))).collect();
            let results: Vec<Result<(f64, ParamSet<T>)>> = draws
                .par_iter()
                .map(|(i, d)| loss_grad(net, *i, d))
                .collect();
            let mut total = net.params.zeros_like();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                total.add_assign(&g)?;
            }
            let inv = 1.0 / batch.len() as f64;
            loss *= inv;
            total.scale(T::from_f64(inv));
            if !loss.is_finite() || !total.all_finite() {
                return Err(Error::Numerical(format!(
                    "training diverged at epoch {epoch}, step {} (loss {loss})",
                    adam.step + 1
                )));
            }
            if let Some(clip) = config.grad_clip {
                let norm = total
                    .values()
                    .map(|v| v.as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    total.scale(T::from_f64(clip / norm));
                }
            }
            adam.update(&mut net.params, &total)?;
            history.push(loss);
            epoch_loss += loss;
            epoch_steps += 1;
        }
        on_epoch(
            net,
            adam,
            EpochEnd {
                epoch: epoch + 1,
                steps: adam.step,
                mean_loss: epoch_loss / epoch_steps.max(1) as f64,
            },
        )?;
    }
    Ok(history)
}
