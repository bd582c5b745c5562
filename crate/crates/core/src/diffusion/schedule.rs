use rand::Rng;
use udad_tensor::Tensor;

use crate::{Error, Result};

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;

/// Linear-β variance-preserving schedule indexed by integer `t ∈ [0, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    horizon: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(horizon: usize) -> Result<Self> {
        if horizon < 1 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        let mut alpha = Vec::with_capacity(horizon + 1);
        let mut sigma = Vec::with_capacity(horizon + 1);
        alpha.push(1.0);
        sigma.push(0.0);
        let mut alpha_bar = 1.0f64;
        for i in 0..horizon {
            let beta = if horizon == 1 {
                BETA_START
            } else {
                BETA_START + (BETA_END - BETA_START) * i as f64 / (horizon - 1) as f64
            };
            alpha_bar *= 1.0 - beta;
            alpha.push(alpha_bar.sqrt());
            sigma.push((1.0 - alpha_bar).sqrt());
        }
        Ok(Self {
            horizon,
            alpha,
            sigma,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.horizon {
            return Err(Error::TimestepOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.sigma[t])
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// `α_t·x + σ_t·ε` at one timestep for the whole batch.
    pub fn q_sample(&self, x: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.q_sample_rows(x, &vec![t; x.rows()], eps)
    }

    /// Per-row timesteps.
    pub fn q_sample_rows(&self, x: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        x.expect_same_shape(eps, "q_sample")?;
        if ts.len() != x.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} timesteps for a batch of {}",
                ts.len(),
                x.rows()
            )));
        }
        let mut out = x.clone();
        for (i, &t) in ts.iter().enumerate() {
            self.check(t)?;
            let (a, s) = (self.alpha[t], self.sigma[t]);
            for (o, e) in out.row_mut(i).iter_mut().zip(eps.row(i)) {
                *o = a * *o + s * e;
            }
        }
        Ok(out)
    }

    /// Inclusive timestep range used by distribution matching and the GAN:
    /// `[⌈0.02T⌉, ⌊0.98T⌋]`.
    pub fn matching_range(&self) -> (usize, usize) {
        let lo = ((self.horizon * 2).div_ceil(100)).max(1);
        let hi = (self.horizon * 98 / 100).max(lo);
        (lo, hi)
    }

    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let (lo, hi) = self.matching_range();
        rng.random_range(lo..=hi)
    }

    /// Full range `[1, T]` used for denoiser training.
    pub fn sample_train_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(1..=self.horizon)
    }
}
