use rand::Rng;
use udad_tensor::{
    normal_tensor, AdamConfig, AdamState, BoundMlp, ParamSet, RngStreams, Tape, Tensor, Var,
};

use super::config::{StudentInit, TargetMode, TrainConfig};
use super::log::{LossSnapshot, MetricRow};
use crate::adversarial::{gan_d_loss, gan_g_loss, BoundDiscriminator, MultiHeadDiscriminator};
use crate::datasets::{sample_distribution, DistributionSpec};
use crate::diffusion::{denoise_loss_on_tape, Denoiser, NoiseSchedule, Role};
use crate::distillation::{
    dmd_surrogate_loss, dual_dmd_direction, DmdProbe, DomainTag, StudentGenerator,
};
use crate::{Error, Result};

/// Where real samples for a batch come from.
#[derive(Clone, Debug)]
pub enum RealSource {
    /// Uniform draws with replacement from a fixed set.
    Exemplars(Tensor),
    /// Fresh samples from a distribution.
    Distribution(DistributionSpec),
}

impl RealSource {
    pub fn batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        match self {
            RealSource::Exemplars(y) => {
                if y.rows() == 0 {
                    return Err(Error::InvalidArgument("no exemplars".into()));
                }
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..y.rows())).collect();
                Ok(y.gather_rows(&idx))
            }
            RealSource::Distribution(spec) => Ok(sample_distribution(spec, n, rng)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub student: StudentGenerator,
    /// Frozen.
    pub source: Denoiser,
    pub fake: Denoiser,
    pub target: Option<Denoiser>,
    pub disc: MultiHeadDiscriminator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub student: AdamState,
    pub fake: AdamState,
    pub disc: AdamState,
    /// Present only for an online target teacher.
    pub target: Option<AdamState>,
}

/// Optional starting points that replace the default copies of the source.
#[derive(Clone, Debug, Default)]
pub struct WarmStart {
    pub student: Option<StudentGenerator>,
    pub target: Option<Denoiser>,
}

/// Which sub-step of an iteration just ran its backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubStep {
    Student,
    FakeAndDisc,
    Target,
}

/// Which parameter groups hold a nonzero gradient after a backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradPresence {
    pub student: bool,
    pub fake: bool,
    pub disc: bool,
    pub target: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub student_updated: bool,
    pub target_updated: bool,
    pub losses: LossSnapshot,
}

/// The shared draws of one iteration.
#[derive(Clone, Debug)]
pub struct StepDraws {
    pub ts: Vec<usize>,
    pub z: Tensor,
    pub eps: Tensor,
    pub y: Tensor,
}

#[derive(Clone, Debug)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub models: Models,
    pub optim: Optimizers,
    pub step: u64,
    pub streams: RngStreams,
    /// Most recent value of every loss term.
    pub last: LossSnapshot,
    pub log: Vec<MetricRow>,
}

fn adam(lr: f64, p: &impl ParamSet) -> AdamState {
    AdamState::for_params(p, AdamConfig::with_lr(lr))
}

fn nonzero(grads: &[Tensor]) -> bool {
    grads.iter().any(|g| g.data().iter().any(|&v| v != 0.0))
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    Ok(tape.value(v).item()?)
}

fn mean_sq_error(tape: &mut Tape, pred: Var, eps: &Tensor) -> Result<Var> {
    let target = tape.constant(eps.clone());
    let diff = tape.sub(pred, target)?;
    let sq = tape.squared_norm(diff);
    Ok(tape.scale(sq, 1.0 / eps.rows() as f64))
}

/// `α_t·x + σ_t·ε` per row, recorded.
fn q_sample_on_tape(
    tape: &mut Tape,
    schedule: &NoiseSchedule,
    x: Var,
    ts: &[usize],
    eps: &Tensor,
) -> Result<Var> {
    let d = eps.cols();
    let mut a = Vec::with_capacity(ts.len() * d);
    let mut noise = eps.clone();
    for (i, &t) in ts.iter().enumerate() {
        let (al, s) = (schedule.alpha(t)?, schedule.sigma(t)?);
        a.extend(std::iter::repeat_n(al, d));
        noise.row_mut(i).iter_mut().for_each(|e| *e *= s);
    }
    let a = tape.constant(Tensor::matrix(ts.len(), d, a)?);
    let noise = tape.constant(noise);
    let scaled = tape.mul(x, a)?;
    Ok(tape.add(scaled, noise)?)
}

impl TrainerState {
    /// Builds the models from the teacher to be distilled: the fake teacher
    /// (and an online target teacher) start as copies of it, the student too
    /// unless a pre-distilled one is supplied.
    pub fn new(
        config: TrainConfig,
        streams: RngStreams,
        teacher: &Denoiser,
        warm: WarmStart,
    ) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let schedule = NoiseSchedule::linear(config.timesteps)?;
        if teacher.horizon() != config.timesteps {
            return Err(Error::InvalidArgument(format!(
                "teacher horizon {} vs configured {}",
                teacher.horizon(),
                config.timesteps
            )));
        }
        let student = match config.student_init {
            StudentInit::CopyOfSource => {
                StudentGenerator::from_denoiser(teacher, &schedule, config.nfe)?
            }
            StudentInit::PreDistilled => warm
                .student
                .ok_or_else(|| {
                    Error::MissingPrerequisite("pre-distilled student checkpoint".into())
                })?
                .with_nfe(&schedule, config.nfe)?,
        };
        let target = match config.target_mode {
            TargetMode::Online => Some(teacher.copy_as(Role::Target)),
            TargetMode::FrozenCheckpoint => Some(
                warm.target
                    .ok_or_else(|| {
                        Error::MissingPrerequisite("frozen target teacher checkpoint".into())
                    })?
                    .copy_as(Role::Target),
            ),
            TargetMode::Disabled => None,
        };
        let source = teacher.copy_as(Role::Source);
        let fake = teacher.copy_as(Role::Fake);
        let disc = MultiHeadDiscriminator::for_denoiser(
            &fake,
            config.disc_heads,
            &mut streams.stream("init-disc", 0),
        )?;
        let optim = Optimizers {
            student: adam(config.lr_student, student.net()),
            fake: adam(config.lr_fake, fake.net()),
            disc: adam(config.lr_disc, &disc),
            target: match (config.target_mode, &target) {
                (TargetMode::Online, Some(t)) => Some(adam(config.lr_target, t.net())),
                _ => None,
            },
        };
        Ok(Self {
            config,
            schedule,
            models: Models {
                student,
                source,
                fake,
                target,
                disc,
            },
            optim,
            step: 0,
            streams,
            last: LossSnapshot::default(),
            log: Vec::new(),
        })
    }

    pub fn is_student_step(&self, step: u64) -> bool {
        step.is_multiple_of(self.config.update_ratio)
    }

    /// The iteration's `(t, z, ε, y)`, each from its own named stream.
    pub fn draws(&self, step: u64, reals: &RealSource) -> Result<StepDraws> {
        let b = self.config.batch_size;
        let d = self.models.student.data_dim();
        let mut r = self.streams.stream("timestep", step);
        let ts = (0..b)
            .map(|_| self.schedule.sample_timestep(&mut r))
            .collect();
        Ok(StepDraws {
            ts,
            z: normal_tensor(&mut self.streams.stream("latent", step), b, d),
            eps: normal_tensor(&mut self.streams.stream("noise", step), b, d),
            y: reals.batch(b, &mut self.streams.stream("real", step))?,
        })
    }

    /// One training iteration.
    pub fn unidad_step(&mut self, reals: &RealSource) -> Result<StepReport> {
        self.step_probed(reals, None)
    }

    /// [`Self::unidad_step`], reporting which parameter groups received
    /// gradient after each backward pass.
    pub fn step_probed(
        &mut self,
        reals: &RealSource,
        mut probe: Option<&mut dyn FnMut(SubStep, GradPresence)>,
    ) -> Result<StepReport> {
        let step = self.step;
        let draws = self.draws(step, reals)?;
        let student_turn = self.is_student_step(step);
        let target_turn = student_turn && self.optim.target.is_some();
        let m = &self.models;
        let sched = &self.schedule;
        let mut renoise = self.streams.stream("renoise", step);

        let mut tape = Tape::new();
        let student_b: Option<BoundMlp> =
            student_turn.then(|| m.student.net().bind(&mut tape, true));
        let x = match &student_b {
            Some(b) => m
                .student
                .generate_on_tape(&mut tape, b, sched, &draws.z, &mut renoise)?,
            None => {
                let x = m.student.generate(sched, &draws.z, &mut renoise)?;
                tape.constant(x)
            }
        };
        let x_t = q_sample_on_tape(&mut tape, sched, x, &draws.ts, &draws.eps)?;
        let mut losses = LossSnapshot::default();

        let student_leak =
            |tape: &Tape| student_b.as_ref().is_some_and(|b| nonzero(&b.grads(tape)));

        let mut student_grads = None;
        if student_turn {
            let (total, parts) = self.student_objective(&mut tape, x, x_t, &draws)?;
            losses.g_dmd_src = Some(parts.0);
            losses.g_dmd_trg = parts.1;
            losses.g_gan = Some(parts.2);
            let value = scalar(&tape, total)?;
            if !value.is_finite() {
                return Err(self.non_finite("student loss", &losses));
            }
            tape.backward(total)?;
            let g = student_b
                .as_ref()
                .expect("bound on student turns")
                .grads(&tape);
            if let Some(p) = probe.as_deref_mut() {
                p(
                    SubStep::Student,
                    GradPresence {
                        student: nonzero(&g),
                        ..Default::default()
                    },
                );
            }
            student_grads = Some(g);
        }

        // Fake teacher and discriminator on detached student samples.
        let x_t_det = tape.detach(x_t);
        let fake_b = m.fake.net().bind(&mut tape, true);
        let disc_b = m.disc.bind(&mut tape, true);
        let (fk_total, fk_mse, d_loss) =
            self.fake_objective(&mut tape, &fake_b, &disc_b, x_t_det, &draws)?;
        losses.fk_mse = Some(fk_mse);
        losses.d_gan = Some(d_loss);
        if !scalar(&tape, fk_total)?.is_finite() {
            return Err(self.non_finite("fake/discriminator loss", &losses));
        }
        tape.backward(fk_total)?;
        let fake_grads = fake_b.grads(&tape);
        let disc_grads = disc_b.grads(&tape);
        if let Some(p) = probe.as_deref_mut() {
            p(
                SubStep::FakeAndDisc,
                GradPresence {
                    student: student_leak(&tape),
                    fake: nonzero(&fake_grads),
                    disc: nonzero(&disc_grads),
                    target: false,
                },
            );
        }

        let mut target_grads = None;
        if target_turn {
            let target = m.target.as_ref().expect("online target");
            let target_b = target.net().bind(&mut tape, true);
            let l = self.target_objective(&mut tape, &target_b, &draws)?;
            losses.trg_mse = Some(scalar(&tape, l)?);
            if !losses.trg_mse.unwrap().is_finite() {
                return Err(self.non_finite("target loss", &losses));
            }
            tape.backward(l)?;
            let g = target_b.grads(&tape);
            if let Some(p) = probe {
                p(
                    SubStep::Target,
                    GradPresence {
                        student: student_leak(&tape),
                        fake: nonzero(&fake_b.grads(&tape)),
                        disc: nonzero(&disc_b.grads(&tape)),
                        target: nonzero(&g),
                    },
                );
            }
            target_grads = Some(g);
        }

        let wrap = |e: udad_tensor::TensorError, what: &str| {
            Error::NonFinite(format!("step {step}: {what} update: {e}"))
        };
        if let Some(g) = student_grads {
            self.optim
                .student
                .step(self.models.student.net_mut(), &g)
                .map_err(|e| wrap(e, "student"))?;
        }
        self.optim
            .fake
            .step(self.models.fake.net_mut(), &fake_grads)
            .map_err(|e| wrap(e, "fake teacher"))?;
        self.optim
            .disc
            .step(&mut self.models.disc, &disc_grads)
            .map_err(|e| wrap(e, "discriminator"))?;
        if let Some(g) = target_grads {
            let net = self
                .models
                .target
                .as_mut()
                .expect("online target")
                .net_mut();
            self.optim
                .target
                .as_mut()
                .expect("online target")
                .step(net, &g)
                .map_err(|e| wrap(e, "target teacher"))?;
        }

        self.last.update(&losses);
        self.step += 1;
        Ok(StepReport {
            step,
            student_updated: student_turn,
            target_updated: target_turn,
            losses,
        })
    }

    fn non_finite(&self, what: &str, losses: &LossSnapshot) -> Error {
        Error::NonFinite(format!("step {}: {what} ({losses:?})", self.step))
    }

    /// Generator objective: surrogate loss along the mixed direction plus
    /// the weighted generator GAN loss, with the fake teacher and heads
    /// bound as constants. Returns the total and the logged parts
    /// `(dmd_src, dmd_trg, gan)`.
    pub fn student_objective(
        &self,
        tape: &mut Tape,
        x: Var,
        x_t: Var,
        draws: &StepDraws,
    ) -> Result<(Var, (f64, Option<f64>, f64))> {
        let m = &self.models;
        let sched = &self.schedule;
        let x_val = tape.value(x).clone();
        let probe = DmdProbe::new(&m.fake, sched, &x_val, &draws.ts, &draws.eps)?;
        let d_src = probe.direction(&m.source, sched, DomainTag::Source)?;
        let d_trg = match &m.target {
            Some(t) => Some(probe.direction(t, sched, DomainTag::Target)?),
            None => None,
        };
        let dir = match &d_trg {
            Some(t) => dual_dmd_direction(&d_src, t, self.config.effective_a())?,
            None => d_src.clone(),
        };
        let l_dmd = dmd_surrogate_loss(tape, x, &dir)?;

        let fake_c = m.fake.net().bind(tape, false);
        let disc_c = m.disc.bind(tape, false);
        let (_, taps) = m.fake.forward_on_tape(tape, &fake_c, x_t, &draws.ts)?;
        let logits = disc_c.logits(tape, &taps)?;
        let l_gan = gan_g_loss(tape, self.config.gan_family, &logits)?;
        let weighted = tape.scale(l_gan, self.config.lambda_g_gan);
        let total = tape.add(l_dmd, weighted)?;
        Ok((
            total,
            (
                d_src.half_mean_sq(),
                d_trg.map(|d| d.half_mean_sq()),
                scalar(tape, l_gan)?,
            ),
        ))
    }

    /// Fake-teacher MSE on `x_t` plus the weighted discriminator loss with
    /// reals `y_t`. Returns `(total, mse, d_loss)`.
    pub fn fake_objective(
        &self,
        tape: &mut Tape,
        fake_b: &BoundMlp,
        disc_b: &BoundDiscriminator,
        x_t: Var,
        draws: &StepDraws,
    ) -> Result<(Var, f64, f64)> {
        let m = &self.models;
        let (pred, taps_fake) = m.fake.forward_on_tape(tape, fake_b, x_t, &draws.ts)?;
        let mse = mean_sq_error(tape, pred, &draws.eps)?;
        let y_t = tape.constant(
            self.schedule
                .q_sample_rows(&draws.y, &draws.ts, &draws.eps)?,
        );
        let (_, taps_real) = m.fake.forward_on_tape(tape, fake_b, y_t, &draws.ts)?;
        let fake_logits = disc_b.logits(tape, &taps_fake)?;
        let real_logits = disc_b.logits(tape, &taps_real)?;
        let d_loss = gan_d_loss(tape, self.config.gan_family, &real_logits, &fake_logits)?;
        let weighted = tape.scale(d_loss, self.config.lambda_d_gan);
        let total = tape.add(mse, weighted)?;
        Ok((total, scalar(tape, mse)?, scalar(tape, d_loss)?))
    }

    /// Target-teacher denoising loss on the few-shot batch.
    pub fn target_objective(
        &self,
        tape: &mut Tape,
        target_b: &BoundMlp,
        draws: &StepDraws,
    ) -> Result<Var> {
        if self.optim.target.is_none() {
            return Err(Error::InvalidArgument(format!(
                "target loss requested with target mode {}",
                self.config.target_mode
            )));
        }
        let target = self.models.target.as_ref().expect("online target");
        denoise_loss_on_tape(
            tape,
            target_b,
            target,
            &self.schedule,
            &draws.y,
            &draws.ts,
            &draws.eps,
        )
    }

    /// Student loss evaluated without updating anything.
    pub fn student_loss_value(&self, draws: &StepDraws) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.models.student.net().bind(&mut tape, true);
        let mut renoise = self.streams.stream("renoise", self.step);
        let x = self.models.student.generate_on_tape(
            &mut tape,
            &b,
            &self.schedule,
            &draws.z,
            &mut renoise,
        )?;
        let x_t = q_sample_on_tape(&mut tape, &self.schedule, x, &draws.ts, &draws.eps)?;
        let (total, _) = self.student_objective(&mut tape, x, x_t, draws)?;
        scalar(&tape, total)
    }
}
