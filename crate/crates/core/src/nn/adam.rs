use serde::{Deserialize, Serialize};

use super::{ParamSet, Real};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept in the parameter dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamSet<T>) -> Self {
        Adam {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::Shape(
                "optimizer state does not match parameters".into(),
            ));
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let lr_t = T::from_f64(
            c.lr * (1.0 - c.beta2.powi(self.step as i32)).sqrt()
                / (1.0 - c.beta1.powi(self.step as i32)),
        );
        let eps = T::from_f64(c.eps);
        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads.values())
            .zip(self.m.values_mut())
            .zip(self.v.values_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            *p = *p - lr_t * *m / (v.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamSet::<f64>::empty();
        params.push(Param {
            name: "x".into(),
            shape: vec![2],
            data: vec![3.0, -2.0],
        });
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            &params,
        );
        for _ in 0..2000 {
            let mut grads = params.zeros_like();
            for (g, &x) in grads.values_mut().zip(params.values()) {
                *g = 2.0 * (x - 1.0);
            }
            adam.update(&mut params, &grads).unwrap();
        }
        assert!(params.values().all(|&x| (x - 1.0).abs() < 1e-3));
        assert_eq!(adam.step, 2000);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut params = ParamSet::<f64>::empty();
        params.push(Param {
            name: "x".into(),
            shape: vec![1],
            data: vec![0.0],
        });
        let mut grads = params.zeros_like();
        grads.params[0].data[0] = 123.0;
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.update(&mut params, &grads).unwrap();
        assert!((params.params[0].data[0] + 1e-3).abs() < 1e-9);
    }
}
