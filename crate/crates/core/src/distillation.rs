//! Distribution-matching directions, the surrogate loss that injects them
//! into the student, the few-step student generator, and closed-form score
//! oracles.

use rand::Rng;
use udad_tensor::{normal_tensor, BoundMlp, MlpNetwork, Tape, Tensor, Var};

use crate::diffusion::{
    conditioned_input, conditioned_input_on_tape, Denoiser, EpsPredictor, NoiseSchedule, EMBED_DIM,
};
use crate::{Error, Result};

pub const MAX_NFE: usize = 4;
const OMEGA_FLOOR: f64 = 1e-8;

/// Few-step generator: a timestep-conditioned network that outputs samples,
/// run along a descending ladder with re-noising in between.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentGenerator {
    net: MlpNetwork,
    horizon: usize,
    ladder: Vec<usize>,
}

impl StudentGenerator {
    pub fn new(net: MlpNetwork, schedule: &NoiseSchedule, nfe: usize) -> Result<Self> {
        if !(1..=MAX_NFE).contains(&nfe) {
            return Err(Error::InvalidArgument(format!(
                "NFE must be in 1..={MAX_NFE}, got {nfe}"
            )));
        }
        if net.input_width() != net.output_width() + EMBED_DIM {
            return Err(Error::InvalidArgument(format!(
                "student input width {} must equal output width {} + {EMBED_DIM}",
                net.input_width(),
                net.output_width()
            )));
        }
        Ok(Self {
            net,
            horizon: schedule.horizon(),
            ladder: schedule.ladder(nfe)?,
        })
    }

    /// Starts from the teacher's weights.
    pub fn from_denoiser(teacher: &Denoiser, schedule: &NoiseSchedule, nfe: usize) -> Result<Self> {
        Self::new(teacher.net().clone(), schedule, nfe)
    }

    /// Same weights on a different ladder.
    pub fn with_nfe(&self, schedule: &NoiseSchedule, nfe: usize) -> Result<Self> {
        Self::new(self.net.clone(), schedule, nfe)
    }

    pub fn ladder(&self) -> &[usize] {
        &self.ladder
    }

    pub fn nfe(&self) -> usize {
        self.ladder.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn net(&self) -> &MlpNetwork {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut MlpNetwork {
        &mut self.net
    }

    pub fn data_dim(&self) -> usize {
        self.net.output_width()
    }

    /// One network call: the clean-sample estimate at per-row timesteps.
    pub fn predict(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        Ok(self
            .net
            .forward(&conditioned_input(x_t, ts, self.horizon)?)?)
    }

    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundMlp,
        x_t: Var,
        ts: &[usize],
    ) -> Result<Var> {
        let input = conditioned_input_on_tape(tape, x_t, ts, self.horizon)?;
        Ok(bound.forward(tape, input)?)
    }

    pub fn generate<R: Rng + ?Sized>(
        &self,
        schedule: &NoiseSchedule,
        z: &Tensor,
        rng: &mut R,
    ) -> Result<Tensor> {
        run_ladder(&self.ladder, schedule, z, rng, |x, ts| self.predict(x, ts))
    }

    /// Recorded generation; gradients reach the bound parameters through
    /// every ladder step.
    pub fn generate_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &BoundMlp,
        schedule: &NoiseSchedule,
        z: &Tensor,
        rng: &mut R,
    ) -> Result<Var> {
        let n = z.rows();
        let mut x = tape.constant(z.clone());
        for (i, &t) in self.ladder.iter().enumerate() {
            let x_hat = self.predict_on_tape(tape, bound, x, &vec![t; n])?;
            match self.ladder.get(i + 1) {
                Some(&next) => {
                    let noise = normal_tensor(rng, n, z.cols());
                    let s = schedule.sigma(next)?;
                    let a = schedule.alpha(next)?;
                    let scaled = tape.scale(x_hat, a);
                    let noise = tape.constant(noise.map(|e| s * e));
                    x = tape.add(scaled, noise)?;
                }
                None => return Ok(x_hat),
            }
        }
        unreachable!("ladder is non-empty")
    }
}

/// The ladder loop with an arbitrary step map `g(x_t, t)`: start at `z`,
/// and between ladder entries re-noise the estimate with fresh draws from
/// `rng`.
pub fn run_ladder<R, G>(
    ladder: &[usize],
    schedule: &NoiseSchedule,
    z: &Tensor,
    rng: &mut R,
    mut g: G,
) -> Result<Tensor>
where
    R: Rng + ?Sized,
    G: FnMut(&Tensor, &[usize]) -> Result<Tensor>,
{
    let n = z.rows();
    let mut x = z.clone();
    for (i, &t) in ladder.iter().enumerate() {
        let x_hat = g(&x, &vec![t; n])?;
        match ladder.get(i + 1) {
            Some(&next) => {
                let noise = normal_tensor(rng, n, z.cols());
                x = schedule.q_sample(&x_hat, next, &noise)?;
            }
            None => return Ok(x_hat),
        }
    }
    Err(Error::InvalidArgument("empty ladder".into()))
}

/// Per-sample `σ_t·d / max(‖ε − ε_fk‖₁, 1e-8)`.
pub fn omega(
    schedule: &NoiseSchedule,
    ts: &[usize],
    eps_true: &Tensor,
    eps_fk: &Tensor,
) -> Result<Vec<f64>> {
    eps_true.expect_same_shape(eps_fk, "omega")?;
    if ts.len() != eps_true.rows() {
        return Err(Error::InvalidArgument("one timestep per sample".into()));
    }
    let d = eps_true.cols() as f64;
    ts.iter()
        .enumerate()
        .map(|(i, &t)| {
            let l1: f64 = eps_true
                .row(i)
                .iter()
                .zip(eps_fk.row(i))
                .map(|(a, b)| (a - b).abs())
                .sum();
            Ok(schedule.sigma(t)? * d / l1.max(OMEGA_FLOOR))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Target,
    Combined,
}

/// A detached per-sample update direction for student samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DmdDirection {
    d_vec: Tensor,
    omega: Vec<f64>,
    tag: DomainTag,
}

impl DmdDirection {
    pub fn new(d_vec: Tensor, omega: Vec<f64>, tag: DomainTag) -> Result<Self> {
        if !d_vec.is_finite() {
            return Err(Error::NonFinite(format!("{tag:?} direction")));
        }
        if omega.len() != d_vec.rows() || omega.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(
                "ω must be one finite positive value per sample".into(),
            ));
        }
        Ok(Self { d_vec, omega, tag })
    }

    pub fn d_vec(&self) -> &Tensor {
        &self.d_vec
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn tag(&self) -> DomainTag {
        self.tag
    }

    /// `½·mean‖d‖²`, the surrogate loss value at the current samples.
    pub fn half_mean_sq(&self) -> f64 {
        0.5 * self.d_vec.data().iter().map(|v| v * v).sum::<f64>() / self.d_vec.rows() as f64
    }
}

/// Noised student samples and the fake teacher's view of them, shared by
/// the source and target directions of one iteration.
#[derive(Clone, Debug)]
pub struct DmdProbe {
    x_t: Tensor,
    ts: Vec<usize>,
    eps_fk: Tensor,
    omega: Vec<f64>,
}

fn checked(pred: Tensor, who: &dyn EpsPredictor) -> Result<Tensor> {
    if !pred.is_finite() {
        return Err(Error::NonFinite(format!(
            "{} teacher prediction",
            who.role_name()
        )));
    }
    Ok(pred)
}

impl DmdProbe {
    pub fn new(
        fake: &dyn EpsPredictor,
        schedule: &NoiseSchedule,
        x: &Tensor,
        ts: &[usize],
        eps: &Tensor,
    ) -> Result<Self> {
        let x_t = schedule.q_sample_rows(x, ts, eps)?;
        let eps_fk = checked(fake.predict_eps(schedule, &x_t, ts)?, fake)?;
        let omega = omega(schedule, ts, eps, &eps_fk)?;
        Ok(Self {
            x_t,
            ts: ts.to_vec(),
            eps_fk,
            omega,
        })
    }

    pub fn x_t(&self) -> &Tensor {
        &self.x_t
    }

    pub fn eps_fake(&self) -> &Tensor {
        &self.eps_fk
    }

    /// `ω·(ε_fk − ε_teacher)`.
    pub fn direction(
        &self,
        teacher: &dyn EpsPredictor,
        schedule: &NoiseSchedule,
        tag: DomainTag,
    ) -> Result<DmdDirection> {
        self.build(teacher, schedule, tag, &self.omega)
    }

    /// Same with ω replaced by a constant.
    pub fn direction_with_omega(
        &self,
        teacher: &dyn EpsPredictor,
        schedule: &NoiseSchedule,
        tag: DomainTag,
        omega: f64,
    ) -> Result<DmdDirection> {
        self.build(teacher, schedule, tag, &vec![omega; self.ts.len()])
    }

    fn build(
        &self,
        teacher: &dyn EpsPredictor,
        schedule: &NoiseSchedule,
        tag: DomainTag,
        omega: &[f64],
    ) -> Result<DmdDirection> {
        let eps_t = checked(teacher.predict_eps(schedule, &self.x_t, &self.ts)?, teacher)?;
        let mut d = self.eps_fk.zip_map(&eps_t, "dmd_direction", |f, t| f - t)?;
        for (i, &w) in omega.iter().enumerate() {
            d.row_mut(i).iter_mut().for_each(|v| *v *= w);
        }
        DmdDirection::new(d, omega.to_vec(), tag)
    }
}

pub fn dmd_direction(
    teacher: &dyn EpsPredictor,
    fake: &dyn EpsPredictor,
    schedule: &NoiseSchedule,
    x: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    tag: DomainTag,
) -> Result<DmdDirection> {
    DmdProbe::new(fake, schedule, x, ts, eps)?.direction(teacher, schedule, tag)
}

/// `(1−a)·src + a·trg`; the endpoints return the inputs untouched.
pub fn dual_dmd_direction(src: &DmdDirection, trg: &DmdDirection, a: f64) -> Result<DmdDirection> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::InvalidArgument(format!(
            "mixing weight {a} outside [0, 1]"
        )));
    }
    src.d_vec
        .expect_same_shape(&trg.d_vec, "dual_dmd_direction")?;
    let mix = |s: f64, t: f64| {
        if a == 0.0 {
            s
        } else if a == 1.0 {
            t
        } else {
            (1.0 - a) * s + a * t
        }
    };
    let d = src.d_vec.zip_map(&trg.d_vec, "dual_dmd_direction", mix)?;
    let omega = src
        .omega
        .iter()
        .zip(&trg.omega)
        .map(|(&s, &t)| mix(s, t))
        .collect();
    DmdDirection::new(d, omega, DomainTag::Combined)
}

/// `½·mean‖x − stopgrad(x + d)‖²`, whose gradient in `x` is `−d/batch`.
pub fn dmd_surrogate_loss(tape: &mut Tape, x: Var, direction: &DmdDirection) -> Result<Var> {
    let xv = tape.value(x);
    xv.expect_same_shape(&direction.d_vec, "dmd_surrogate_loss")?;
    let n = xv.rows() as f64;
    let target = tape.constant(xv.zip_map(&direction.d_vec, "dmd_surrogate_loss", |a, b| a + b)?);
    let diff = tape.sub(x, target)?;
    let sq = tape.squared_norm(diff);
    Ok(tape.scale(sq, 0.5 / n))
}

/// Exact noise predictor for `N(μ, I)` data: `σ_t·(x_t − α_t·μ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticGaussianScore {
    pub mean: Vec<f64>,
}

impl AnalyticGaussianScore {
    pub fn new(mean: Vec<f64>) -> Result<Self> {
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("oracle mean".into()));
        }
        Ok(Self { mean })
    }

    pub fn analytic_eps(
        &self,
        schedule: &NoiseSchedule,
        x_t: &Tensor,
        ts: &[usize],
    ) -> Result<Tensor> {
        per_row(schedule, x_t, ts, &self.mean, |a, s, x, m| s * (x - a * m))
    }
}

impl EpsPredictor for AnalyticGaussianScore {
    fn role_name(&self) -> &str {
        "analytic"
    }

    fn predict_eps(&self, schedule: &NoiseSchedule, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.analytic_eps(schedule, x_t, ts)
    }
}

/// Exact noise predictor for data concentrated on one point:
/// `(x_t − α_t·x⋆)/σ_t`. Undefined at t = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMassScore {
    pub point: Vec<f64>,
}

impl EpsPredictor for PointMassScore {
    fn role_name(&self) -> &str {
        "point-mass"
    }

    fn predict_eps(&self, schedule: &NoiseSchedule, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        per_row(schedule, x_t, ts, &self.point, |a, s, x, m| (x - a * m) / s)
    }
}

fn per_row(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    ts: &[usize],
    center: &[f64],
    f: impl Fn(f64, f64, f64, f64) -> f64,
) -> Result<Tensor> {
    if x_t.cols() != center.len() || ts.len() != x_t.rows() {
        return Err(Error::InvalidArgument(format!(
            "oracle of dimension {} given {:?} with {} timesteps",
            center.len(),
            x_t.shape(),
            ts.len()
        )));
    }
    let mut out = x_t.clone();
    for (i, &t) in ts.iter().enumerate() {
        let (a, s) = (schedule.alpha(t)?, schedule.sigma(t)?);
        for (o, &m) in out.row_mut(i).iter_mut().zip(center) {
            *o = f(a, s, *o, m);
        }
    }
    Ok(out)
}
