//! Helpers shared by several test targets.
#![allow(dead_code)]

use udad_core::diffusion::NoiseSchedule;
use udad_core::distillation::{dmd_surrogate_loss, AnalyticGaussianScore, DmdProbe, DomainTag};
use udad_core::tensor::{normal_tensor, AdamConfig, AdamState, ParamSet, RngStreams, Tape, Tensor};

/// `x = z·W + b` with `W` starting at the identity and `b` at the origin.
#[derive(Clone, Debug)]
pub struct AffineGenerator {
    pub w: Tensor,
    pub b: Tensor,
}

impl AffineGenerator {
    pub fn identity() -> Self {
        Self {
            w: Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]),
            b: Tensor::vector(vec![0.0, 0.0]),
        }
    }

    pub fn apply(&self, z: &Tensor) -> Tensor {
        let w = self.w.data();
        let b = self.b.data();
        let rows: Vec<[f64; 2]> = (0..z.rows())
            .map(|r| {
                let v = z.row(r);
                [
                    v[0] * w[0] + v[1] * w[2] + b[0],
                    v[0] * w[1] + v[1] * w[3] + b[1],
                ]
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    pub fn mean(&self) -> [f64; 2] {
        [self.b.data()[0], self.b.data()[1]]
    }

    /// Monte-Carlo `KL(p_G ‖ N(μ, I))` over fixed latents.
    pub fn kl_to_unit_gaussian(&self, mu: [f64; 2], z: &Tensor) -> f64 {
        let w = self.w.data();
        let log_det = (w[0] * w[3] - w[1] * w[2]).abs().ln();
        let x = self.apply(z);
        let n = z.rows();
        (0..n)
            .map(|r| {
                let zz: f64 = z.row(r).iter().map(|v| v * v).sum();
                let xx: f64 = x.row(r).iter().zip(mu).map(|(v, m)| (v - m).powi(2)).sum();
                // log N(z; 0, I) − log|det W| − log N(x; μ, I)
                -0.5 * zz - log_det + 0.5 * xx
            })
            .sum::<f64>()
            / n as f64
    }
}

impl ParamSet for AffineGenerator {
    fn param_tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }
    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
    fn param_names(&self) -> Vec<String> {
        vec!["w".into(), "b".into()]
    }
}

pub struct KlDescent {
    pub generator: AffineGenerator,
    /// KL estimate before any step and after each step.
    pub kl: Vec<f64>,
}

/// Trains the affine generator with the surrogate loss against an analytic
/// teacher at `target`; the fake teacher is the exact score of the
/// generator's current mean, starting at the origin.
pub fn kl_descent(target: [f64; 2], steps: usize, seed: u64) -> KlDescent {
    let schedule = NoiseSchedule::linear(1000).unwrap();
    let streams = RngStreams::new(seed);
    let teacher = AnalyticGaussianScore::new(target.to_vec()).unwrap();
    let mut g = AffineGenerator::identity();
    let mut opt = AdamState::for_params(&g, AdamConfig::with_lr(0.01));
    let probe_z = normal_tensor(&mut streams.stream("kl", 0), 4096, 2);
    let batch = 64;
    let mut kl = vec![g.kl_to_unit_gaussian(target, &probe_z)];
    for step in 0..steps as u64 {
        let z = normal_tensor(&mut streams.stream("latent", step), batch, 2);
        let eps = normal_tensor(&mut streams.stream("noise", step), batch, 2);
        let mut tr = streams.stream("timestep", step);
        let ts: Vec<usize> = (0..batch)
            .map(|_| schedule.sample_timestep(&mut tr))
            .collect();

        let fake = AnalyticGaussianScore::new(g.mean().to_vec()).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(g.w.clone());
        let b = tape.param(g.b.clone());
        let zc = tape.constant(z);
        let zw = tape.matmul(zc, w).unwrap();
        let x = tape.add_row(zw, b).unwrap();
        let xv = tape.value(x).clone();
        let dir = DmdProbe::new(&fake, &schedule, &xv, &ts, &eps)
            .unwrap()
            .direction(&teacher, &schedule, DomainTag::Source)
            .unwrap();
        let loss = dmd_surrogate_loss(&mut tape, x, &dir).unwrap();
        tape.backward(loss).unwrap();
        let grads = vec![tape.grad_or_zeros(w), tape.grad_or_zeros(b)];
        opt.step(&mut g, &grads).unwrap();
        kl.push(g.kl_to_unit_gaussian(target, &probe_z));
    }
    KlDescent { generator: g, kl }
}
