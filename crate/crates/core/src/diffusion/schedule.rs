use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Variance schedule of the forward process. Index `i` holds step `t = i + 1`;
/// `γ_0 ≡ 1` is implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Parameters of a linear β schedule, as stored in configs and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Linear β from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Precondition(
            "schedule needs at least one step".into(),
        ));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Precondition(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Precondition(
                "schedule needs at least one step".into(),
            ));
        }
        if let Some(b) = beta.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Precondition(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut gamma = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            gamma.push(acc);
        }
        Ok(Self::assemble(beta, alpha, gamma))
    }

    /// Builds a schedule with the given cumulative products, which must be
    /// strictly decreasing inside (0, 1).
    pub fn from_gammas(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::Precondition(
                "schedule needs at least one step".into(),
            ));
        }
        let mut prev = 1.0;
        let mut alpha = Vec::with_capacity(gamma.len());
        for &g in &gamma {
            if !(g > 0.0 && g < prev) {
                return Err(Error::Precondition(
                    "gammas must decrease strictly inside (0, 1)".into(),
                ));
            }
            alpha.push(g / prev);
            prev = g;
        }
        let beta = alpha.iter().map(|a| 1.0 - a).collect();
        Ok(Self::assemble(beta, alpha, gamma))
    }

    fn assemble(beta: Vec<f64>, alpha: Vec<f64>, gamma: Vec<f64>) -> Self {
        let sigma = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { gamma[i - 1] };
                (beta[i] * (1.0 - prev) / (1.0 - gamma[i])).max(0.0).sqrt()
            })
            .collect();
        NoiseSchedule {
            beta,
            alpha,
            gamma,
            sigma,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `γ_{t-1}` for the step at index `i` (1 for the first step).
    pub fn gamma_prev(&self, i: usize) -> f64 {
        if i == 0 {
            1.0
        } else {
            self.gamma[i - 1]
        }
    }

    /// A shorter schedule on `steps` evenly spaced levels of this one; the
    /// last level is always kept so sampling starts from the same noise level.
    pub fn respaced(&self, steps: usize) -> Result<Self> {
        let t = self.steps();
        if steps == 0 || steps > t {
            return Err(Error::Precondition(format!(
                "respaced step count must be in 1..={t}, got {steps}"
            )));
        }
        if steps == t {
            return Ok(self.clone());
        }
        let gamma = (1..=steps)
            .map(|k| {
                let idx = ((k * t) as f64 / steps as f64).round() as usize;
                self.gamma[idx.clamp(1, t) - 1]
            })
            .collect();
        Self::from_gammas(gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.gamma, vec![0.5]);
        assert_eq!(s.sigma, vec![0.0]);
    }

    #[test]
    fn hand_computed_products() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2, 0.3]).unwrap();
        for (g, e) in s.gamma.iter().zip([0.9, 0.72, 0.504]) {
            assert!((g - e).abs() < 1e-12);
        }
        let l = make_schedule(3, 0.1, 0.3).unwrap();
        for (g, e) in l.gamma.iter().zip([0.9, 0.72, 0.504]) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn invariants_of_default_schedule() {
        let s = ScheduleSpec::default().build().unwrap();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.sigma[0], 0.0);
        for i in 0..s.steps() {
            assert!((s.gamma[i] / s.gamma_prev(i) - s.alpha[i]).abs() < 1e-12);
            assert!(s.sigma[i] >= 0.0);
            if i > 0 {
                assert!(s.gamma[i] < s.gamma[i - 1]);
            }
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn respacing_keeps_endpoints_and_identity() {
        let s = ScheduleSpec::default().build().unwrap();
        let r = s.respaced(20).unwrap();
        assert_eq!(r.steps(), 20);
        assert_eq!(*r.gamma.last().unwrap(), *s.gamma.last().unwrap());
        assert_eq!(r.gamma[0], s.gamma[49]);
        for i in 0..r.steps() {
            assert!((r.gamma[i] / r.gamma_prev(i) - r.alpha[i]).abs() < 1e-12);
        }
        assert_eq!(r.sigma[0], 0.0);
        assert_eq!(s.respaced(1000).unwrap(), s);
        assert!(s.respaced(0).is_err());
    }
}
