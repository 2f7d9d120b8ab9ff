use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Linear-beta noise schedule with cumulative products `alpha_bar`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_min: 1e-4, beta_max: 2e-2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::invalid(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    // Betas are rounded to single precision so that checkpoints, which
    // store them as 32-bit floats, reproduce the schedule exactly.
    let betas: Vec<f64> = (0..steps)
        .map(|i| (beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64) as f32 as f64)
        .collect();
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::invalid("betas must lie in (0, 1) with at least 2 steps"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bars = alphas
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// Number of steps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::invalid(format!("timestep {t} outside [0, {})", self.len())));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Evenly spaced descending subsequence of `n` timesteps ending at 0,
    /// starting at `start` (inclusive).
    pub fn respaced(&self, start: usize, n: usize) -> Vec<usize> {
        let start = start.min(self.len() - 1);
        let n = n.clamp(1, start + 1);
        if n == 1 {
            return vec![start];
        }
        let mut ts: Vec<usize> = (0..n)
            .map(|i| ((start as f64) * (1.0 - i as f64 / (n - 1) as f64)).round() as usize)
            .collect();
        ts.dedup();
        ts
    }
}

/// Forward process `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn add_noise(x0: &Image, t: usize, eps: &Image, schedule: &DiffusionSchedule) -> Result<Image> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, seeded};

    #[test]
    fn default_schedule_ends_near_zero() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        assert!(s.alpha_bar(999) < 5e-3, "{}", s.alpha_bar(999));
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn two_step_closed_form() {
        let s = make_schedule(2, 0.125, 0.375).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0 - 0.125);
        assert_eq!(s.alpha_bar(1), 0.875 * 0.625);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(make_schedule(1, 1e-4, 2e-2).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
    }

    #[test]
    fn add_noise_identities() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        let x0 = Image::from_fn(4, 4, 3, |x, y, c| (x + y + c) as f64 / 10.0);
        let zero = Image::zeros(4, 4, 3);
        let xt = add_noise(&x0, 500, &zero, &s).unwrap();
        let k = s.alpha_bar(500).sqrt();
        assert_eq!(xt, x0.map(|v| k * v));
        assert!(add_noise(&x0, 1000, &zero, &s).is_err());
        let mut rng = seeded(1);
        let eps = crate::rng::normal_image(&mut rng, 4, 4, 3);
        let xt0 = add_noise(&x0, 0, &eps, &s).unwrap();
        let scale = (1.0 - s.alpha_bar(0)).sqrt();
        for (a, b) in xt0.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 5.0 * scale + 1e-2 * b.abs());
        }
    }

    #[test]
    fn forward_process_variance() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        let t = 300;
        let ab = s.alpha_bar(t);
        let mut rng = seeded(5);
        let n = 10_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        // x0 ~ Uniform(0, 1) per draw: var = 1/12.
        for _ in 0..n {
            let x0 = Image::from_vec(1, 1, 1, vec![rand::Rng::random::<f64>(&mut rng)]).unwrap();
            let e = Image::from_vec(1, 1, 1, vec![normal(&mut rng)]).unwrap();
            let v = add_noise(&x0, t, &e, &s).unwrap().data()[0];
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        let expected = ab / 12.0 + (1.0 - ab);
        // Standard error of a sample variance of a near-normal law.
        let se = expected * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((var - expected).abs() < 3.0 * se, "{var} vs {expected} (se {se})");
    }

    #[test]
    fn respacing_is_descending_and_ends_at_zero() {
        let s = make_schedule(1000, 1e-4, 2e-2).unwrap();
        let ts = s.respaced(999, 50);
        assert_eq!(ts[0], 999);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.respaced(0, 10), vec![0]);
    }
}
