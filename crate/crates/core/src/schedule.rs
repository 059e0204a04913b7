use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-beta DDPM schedule over timesteps `0..=T`, with `ᾱ₀ = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let mut alphas_cumprod = Vec::with_capacity(timesteps + 1);
        alphas_cumprod.push(1.0);
        let mut acc = 1.0;
        for t in 1..=timesteps {
            let beta = if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (timesteps - 1) as f64
            };
            acc *= 1.0 - beta;
            alphas_cumprod.push(acc);
        }
        Ok(Self {
            timesteps,
            beta_start,
            beta_end,
            alphas_cumprod,
        })
    }

    /// Schedule used by the toy model: the standard 1e-4..0.02 range rescaled
    /// to `timesteps` steps.
    pub fn toy(timesteps: usize) -> Result<Self> {
        let k = 1000.0 / timesteps as f64;
        Self::linear(timesteps, 1e-4 * k, (0.02 * k).min(0.999))
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::Argument(format!("timestep {t} outside 0..={}", self.timesteps)))
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// Schedule with explicit cumulative products, mainly for tests.
    pub fn from_alphas_cumprod(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.len() < 2 {
            return Err(Error::Config("need at least two schedule entries".into()));
        }
        let ok = alphas_cumprod.iter().all(|a| *a > 0.0 && *a <= 1.0)
            && alphas_cumprod.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(Error::Config(
                "ᾱ must be in (0,1] and strictly decreasing".into(),
            ));
        }
        Ok(Self {
            timesteps: alphas_cumprod.len() - 1,
            beta_start: 1.0 - alphas_cumprod[1] / alphas_cumprod[0],
            beta_end: 1.0
                - alphas_cumprod[alphas_cumprod.len() - 1]
                    / alphas_cumprod[alphas_cumprod.len() - 2],
            alphas_cumprod,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_schedule_endpoints() {
        let s = NoiseSchedule::toy(100).unwrap();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bar(100).unwrap() < 1e-3);
        assert!(s.alphas_cumprod().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(101).is_err());
    }
}
