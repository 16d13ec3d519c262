use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Cumulative signal fractions `ᾱ_t` for `t = 0..=T`.
///
/// `ᾱ_0` is the clean end (at least 0.999) and the sequence is strictly
/// decreasing inside `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_INFERENCE_STEPS: usize = 50;

impl NoiseSchedule {
    pub fn new(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidInput(
                "schedule needs at least two entries".into(),
            ));
        }
        if alpha_bar[0] < 0.999 || alpha_bar[0] > 1.0 {
            return Err(Error::InvalidInput(format!(
                "alpha_bar[0] = {} must lie in [0.999, 1]",
                alpha_bar[0]
            )));
        }
        for (t, pair) in alpha_bar.windows(2).enumerate() {
            let ok = pair[1] < pair[0] && pair[1] > 0.0;
            if !ok {
                return Err(Error::InvalidInput(format!(
                    "alpha_bar must be strictly decreasing in (0, 1]; fails at t = {}",
                    t + 1
                )));
            }
        }
        Ok(Self { alpha_bar })
    }

    /// Linear-in-β schedule with `steps` noising steps; `ᾱ_0 = 1`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidInput(
                "schedule needs at least one step".into(),
            ));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::new(alpha_bar)
    }

    /// Number of steps `T`; valid timesteps are `0..=T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::Timestep {
            t,
            len: self.alpha_bar.len(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Inference grid with `steps` uniform strides over this schedule:
    /// entries at `round(k·T/steps)` for `k = 0..=steps`.
    pub fn subsample(&self, steps: usize) -> Result<NoiseSchedule> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::InvalidInput(format!(
                "inference steps must be in 1..={total}, got {steps}"
            )));
        }
        if steps == total {
            return Ok(self.clone());
        }
        let alpha_bar = (0..=steps)
            .map(|k| {
                let idx = (k as f64 * total as f64 / steps as f64).round() as usize;
                self.alpha_bar[idx]
            })
            .collect();
        Self::new(alpha_bar)
    }

    /// Short content hash, recorded in latent dumps.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.alpha_bar {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        let last = s.alpha_bar(1000).unwrap();
        assert!(last > 0.0 && last < 1e-4, "{last}");
        assert!(s.alpha_bar(1001).is_err());
    }

    #[test]
    fn rejects_non_monotone() {
        assert!(NoiseSchedule::new(vec![1.0, 0.5, 0.5]).is_err());
        assert!(NoiseSchedule::new(vec![1.0, 0.5, 0.6]).is_err());
        assert!(NoiseSchedule::new(vec![0.99, 0.5]).is_err());
        assert!(NoiseSchedule::new(vec![1.0, 0.0]).is_err());
        assert!(NoiseSchedule::new(vec![1.0]).is_err());
    }

    #[test]
    fn subsample_uniform_stride() {
        let s = NoiseSchedule::default();
        let g = s.subsample(50).unwrap();
        assert_eq!(g.steps(), 50);
        for k in 0..=50 {
            assert_eq!(g.alpha_bar(k).unwrap(), s.alpha_bar(20 * k).unwrap());
        }
        assert_eq!(s.subsample(1000).unwrap(), s);
        assert!(s.subsample(0).is_err());
        assert!(s.subsample(1001).is_err());
        // Non-dividing step counts still give a valid grid.
        assert_eq!(s.subsample(7).unwrap().steps(), 7);
    }
}
