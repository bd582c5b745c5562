use rand::Rng;
use udad_tensor::{Activation, BoundMlp, MlpNetwork, Tape, Tensor, Var};

use super::NoiseSchedule;
use crate::{Error, Result};

/// Width of the sinusoidal timestep features appended to every input row.
pub const EMBED_DIM: usize = 16;

/// `[sin(t·ω_k), cos(t·ω_k)]` for eight angular frequencies ω_k spaced
/// geometrically from 1 down to 1/T (radians per step).
pub fn timestep_embedding(t: usize, horizon: usize) -> [f64; EMBED_DIM] {
    let mut out = [0.0; EMBED_DIM];
    let half = EMBED_DIM / 2;
    let h = horizon.max(2) as f64;
    for k in 0..half {
        let omega = h.powf(-(k as f64) / (half - 1) as f64);
        let angle = t as f64 * omega;
        out[2 * k] = angle.sin();
        out[2 * k + 1] = angle.cos();
    }
    out
}

fn check_timesteps(ts: &[usize], rows: usize, horizon: usize) -> Result<()> {
    if ts.len() != rows {
        return Err(Error::InvalidArgument(format!(
            "{} timesteps for a batch of {rows}",
            ts.len()
        )));
    }
    if let Some(&t) = ts.iter().find(|&&t| t > horizon) {
        return Err(Error::TimestepOutOfRange { t, horizon });
    }
    Ok(())
}

fn embedding_matrix(ts: &[usize], horizon: usize) -> Tensor {
    let data = ts
        .iter()
        .flat_map(|&t| timestep_embedding(t, horizon))
        .collect();
    Tensor::matrix(ts.len(), EMBED_DIM, data).expect("sized")
}

/// `[x_t ‖ emb(t)]` row by row.
pub fn conditioned_input(x_t: &Tensor, ts: &[usize], horizon: usize) -> Result<Tensor> {
    check_timesteps(ts, x_t.rows(), horizon)?;
    let d = x_t.cols();
    let mut data = Vec::with_capacity(ts.len() * (d + EMBED_DIM));
    for (i, &t) in ts.iter().enumerate() {
        data.extend_from_slice(x_t.row(i));
        data.extend_from_slice(&timestep_embedding(t, horizon));
    }
    Ok(Tensor::matrix(ts.len(), d + EMBED_DIM, data)?)
}

pub fn conditioned_input_on_tape(
    tape: &mut Tape,
    x_t: Var,
    ts: &[usize],
    horizon: usize,
) -> Result<Var> {
    check_timesteps(ts, tape.value(x_t).rows(), horizon)?;
    let emb = tape.constant(embedding_matrix(ts, horizon));
    Ok(tape.concat_cols(x_t, emb)?)
}

/// Anything that predicts the noise in `x_t` at per-row timesteps.
pub trait EpsPredictor {
    /// Used in diagnostics.
    fn role_name(&self) -> &str;

    fn predict_eps(&self, schedule: &NoiseSchedule, x_t: &Tensor, ts: &[usize]) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Source,
    Fake,
    Target,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Fake => "fake",
            Role::Target => "target",
        }
    }
}

/// Body shape shared by the denoisers and the student.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub data_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            data_dim: 2,
            hidden_width: 64,
            hidden_layers: 3,
            activation: Activation::Relu,
        }
    }
}

impl Architecture {
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.data_dim + EMBED_DIM];
        w.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        w.push(self.data_dim);
        w
    }

    pub fn init_network<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MlpNetwork> {
        if self.data_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return Err(Error::InvalidArgument(format!(
                "degenerate architecture {self:?}"
            )));
        }
        Ok(MlpNetwork::init(&self.widths(), self.activation, rng)?)
    }
}

/// Timestep-conditioned ε-prediction network.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    net: MlpNetwork,
    role: Role,
    horizon: usize,
}

impl Denoiser {
    pub fn new(net: MlpNetwork, role: Role, horizon: usize) -> Result<Self> {
        if net.input_width() != net.output_width() + EMBED_DIM {
            return Err(Error::InvalidArgument(format!(
                "denoiser input width {} must equal output width {} + {EMBED_DIM}",
                net.input_width(),
                net.output_width()
            )));
        }
        Ok(Self { net, role, horizon })
    }

    pub fn init<R: Rng + ?Sized>(
        arch: &Architecture,
        role: Role,
        horizon: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(arch.init_network(rng)?, role, horizon)
    }

    /// Same weights under a new role, e.g. the fake teacher cloned from the
    /// source.
    pub fn copy_as(&self, role: Role) -> Self {
        Self {
            net: self.net.clone(),
            role,
            horizon: self.horizon,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn net(&self) -> &MlpNetwork {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpNetwork {
        &mut self.net
    }

    pub fn into_net(self) -> MlpNetwork {
        self.net
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_width()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn predict(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        Ok(self
            .net
            .forward(&conditioned_input(x_t, ts, self.horizon)?)?)
    }

    /// Prediction plus the hidden activations the discriminator heads read.
    pub fn predict_taps(&self, x_t: &Tensor, ts: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        Ok(self
            .net
            .forward_taps(&conditioned_input(x_t, ts, self.horizon)?)?)
    }

    /// Recorded forward through parameters already bound on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundMlp,
        x_t: Var,
        ts: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        let input = conditioned_input_on_tape(tape, x_t, ts, self.horizon)?;
        Ok(bound.forward_taps(tape, input)?)
    }
}

impl EpsPredictor for Denoiser {
    fn role_name(&self) -> &str {
        self.role.name()
    }

    fn predict_eps(&self, _schedule: &NoiseSchedule, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.predict(x_t, ts)
    }
}

/// Mean over the batch of `‖ε̂(x_t, t) − ε‖²` with unit time weighting.
pub fn denoise_loss(
    model: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    x: &Tensor,
    ts: &[usize],
    eps: &Tensor,
) -> Result<f64> {
    let x_t = schedule.q_sample_rows(x, ts, eps)?;
    let pred = model.predict_eps(schedule, &x_t, ts)?;
    pred.expect_same_shape(eps, "denoise_loss")?;
    let sq: f64 = pred
        .data()
        .iter()
        .zip(eps.data())
        .map(|(p, e)| (p - e) * (p - e))
        .sum();
    Ok(sq / x.rows() as f64)
}

/// Recorded version of [`denoise_loss`] for a denoiser bound on `tape`.
pub fn denoise_loss_on_tape(
    tape: &mut Tape,
    bound: &BoundMlp,
    model: &Denoiser,
    schedule: &NoiseSchedule,
    x: &Tensor,
    ts: &[usize],
    eps: &Tensor,
) -> Result<Var> {
    let x_t = tape.constant(schedule.q_sample_rows(x, ts, eps)?);
    let (pred, _) = model.forward_on_tape(tape, bound, x_t, ts)?;
    let target = tape.constant(eps.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.squared_norm(diff);
    Ok(tape.scale(sq, 1.0 / x.rows() as f64))
}
