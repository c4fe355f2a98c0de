use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear beta schedule settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Forward-process variances `beta_1..beta_T` with `alpha_t = 1 - beta_t` and
/// `alpha_bar_t = prod_{s<=t} alpha_s`. Timesteps are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("noise schedule needs at least one step"));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return Err(Error::config(format!(
                "beta_{} = {b} is outside (0, 1)",
                i + 1
            )));
        }
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("noise schedule needs at least one step"));
        }
        let betas = if steps == 1 {
            vec![start]
        } else {
            (0..steps)
                .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::new(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `alpha_bar_t`; `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::config(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `x_t = sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps`.
pub fn noise_with_alpha_bar(x0: &[f32], alpha_bar: f64, eps: &[f32]) -> Vec<f32> {
    assert_eq!(x0.len(), eps.len(), "x0 and noise shapes differ");
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    x0.iter()
        .zip(eps)
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect()
}

/// Sample `x_t` from the forward process given `x0` and unit-gaussian `eps`.
pub fn forward_noise(
    x0: &[f32],
    t: usize,
    eps: &[f32],
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>> {
    schedule.check_t(t)?;
    if x0.len() != eps.len() {
        return Err(Error::config(format!(
            "x0 has {} values but noise has {}",
            x0.len(),
            eps.len()
        )));
    }
    Ok(noise_with_alpha_bar(x0, schedule.alpha_bar(t), eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_schedule_endpoints() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.steps(), 200);
        assert!((s.beta(1) - 1e-4).abs() < 1e-15);
        assert!((s.beta(200) - 0.02).abs() < 1e-15);
        assert!(s.alpha_bar(200) < s.alpha_bar(1));
    }

    #[test]
    fn rejects_out_of_range_betas() {
        assert!(NoiseSchedule::new(vec![0.1, 0.0]).is_err());
        assert!(NoiseSchedule::new(vec![1.0]).is_err());
        assert!(NoiseSchedule::new(vec![]).is_err());
        assert!(NoiseSchedule::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn identity_at_alpha_bar_one() {
        let x0 = [0.3f32, -0.7, 1.0];
        assert_eq!(
            noise_with_alpha_bar(&x0, 1.0, &[5.0, 5.0, 5.0]),
            x0.to_vec()
        );
    }

    #[test]
    fn zero_signal_gives_scaled_noise() {
        let s = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let eps = [1.0f32, -2.0];
        let out = forward_noise(&[0.0, 0.0], 7, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(7)).sqrt();
        assert!((out[0] as f64 - k).abs() < 1e-6);
        assert!((out[1] as f64 + 2.0 * k).abs() < 1e-6);
    }

    #[test]
    fn timestep_bounds() {
        let s = NoiseSchedule::linear(5, 1e-3, 0.1).unwrap();
        assert!(forward_noise(&[0.0], 0, &[0.0], &s).is_err());
        assert!(forward_noise(&[0.0], 6, &[0.0], &s).is_err());
        assert!(forward_noise(&[0.0], 5, &[0.0], &s).is_ok());
    }

    proptest! {
        #[test]
        fn alpha_bar_strictly_decreasing(betas in proptest::collection::vec(1e-6f64..0.999, 1..50)) {
            let s = NoiseSchedule::new(betas).unwrap();
            for t in 1..=s.steps() {
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }
}
