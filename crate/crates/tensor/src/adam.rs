use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Anything whose parameters can be walked as an ordered list of tensors.
pub trait ParamSet {
    fn param_tensors(&self) -> Vec<&Tensor>;
    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor>;
    fn param_names(&self) -> Vec<String>;

    fn param_len(&self) -> usize {
        self.param_tensors().iter().map(|t| t.numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
        }
    }

    pub fn for_params<P: ParamSet + ?Sized>(params: &P, config: AdamConfig) -> Self {
        Self::new(params.param_len(), config)
    }

    /// Rebuilds a state from saved moments.
    pub fn from_parts(config: AdamConfig, step: u64, m: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(TensorError::Invalid(format!(
                "adam moments differ in length: {} vs {}",
                m.len(),
                v.len()
            )));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One Adam update. Gradients are validated before anything is touched.
    pub fn step<P: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &[Tensor]) -> Result<()> {
        let names = params.param_names();
        {
            let current = params.param_tensors();
            if current.len() != grads.len() {
                return Err(TensorError::Invalid(format!(
                    "expected {} gradient blocks, got {}",
                    current.len(),
                    grads.len()
                )));
            }
            let total: usize = current.iter().map(|t| t.numel()).sum();
            if total != self.m.len() {
                return Err(TensorError::Invalid(format!(
                    "optimizer holds {} moments for {} parameters",
                    self.m.len(),
                    total
                )));
            }
            for ((p, g), name) in current.iter().zip(grads).zip(&names) {
                p.expect_same_shape(g, "adam_step")?;
                if !g.is_finite() {
                    return Err(TensorError::NonFinite(name.clone()));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut offset = 0;
        for (p, g) in params.param_tensors_mut().into_iter().zip(grads) {
            let n = p.numel();
            let m = &mut self.m[offset..offset + n];
            let v = &mut self.v[offset..offset + n];
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
            offset += n;
        }
        for (p, name) in params.param_tensors().iter().zip(&names) {
            if !p.is_finite() {
                return Err(TensorError::NonFinite(name.clone()));
            }
        }
        Ok(())
    }
}
