use udad_tensor::Tensor;

use super::{EpsPredictor, NoiseSchedule};
use crate::{Error, Result};

impl NoiseSchedule {
    /// `n` evenly spaced integers descending from T: `⌊(n−i)·T/n⌋`.
    pub fn ladder(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.horizon() {
            return Err(Error::InvalidArgument(format!(
                "ladder of {n} steps over horizon {}",
                self.horizon()
            )));
        }
        Ok((0..n).map(|i| (n - i) * self.horizon() / n).collect())
    }
}

/// Deterministic DDIM from `z` at T over `steps` timesteps; returns the last
/// clean-sample estimate.
pub fn ddim_sample(
    model: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    steps: usize,
    z: &Tensor,
) -> Result<Tensor> {
    let ladder = schedule.ladder(steps)?;
    let n = z.rows();
    let mut x = z.clone();
    for (i, &t) in ladder.iter().enumerate() {
        let ts = vec![t; n];
        let eps = model.predict_eps(schedule, &x, &ts)?;
        if !eps.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} prediction at t={t}",
                model.role_name()
            )));
        }
        let (a, s) = (schedule.alpha(t)?, schedule.sigma(t)?);
        let x0 = x.zip_map(&eps, "ddim", |xv, ev| (xv - s * ev) / a)?;
        match ladder.get(i + 1) {
            Some(&next) => {
                let (a2, s2) = (schedule.alpha(next)?, schedule.sigma(next)?);
                x = x0.zip_map(&eps, "ddim", |xv, ev| a2 * xv + s2 * ev)?;
            }
            None => return Ok(x0),
        }
    }
    unreachable!("ladder is non-empty")
}
