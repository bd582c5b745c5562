use rand::Rng;
use udad_tensor::{normal_tensor, AdamConfig, AdamState, RngStreams, Tape, Tensor};

use super::checkpoint::Checkpoint;
use super::config::{GanReals, PipelineKind, StudentInit, TargetMode, TrainConfig};
use super::log::{LossSnapshot, MetricRow};
use super::trainer::{RealSource, TrainerState, WarmStart};
use crate::datasets::{sample_distribution, Benchmark, FewShotSet, HELD_OUT_SIZE, SELECTION_SEED};
use crate::diffusion::{ddim_sample, denoise_loss_on_tape, Denoiser, NoiseSchedule, Role};
use crate::distillation::StudentGenerator;
use crate::evaluation::{evaluate_samples, EvalReference, MetricsReport};
use crate::{Error, Result};

/// A trained sampler: a few-step student or a denoiser run with DDIM.
#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    Student(StudentGenerator),
    Diffusion { denoiser: Denoiser, steps: usize },
}

impl Generator {
    pub fn sample<R: Rng + ?Sized>(
        &self,
        schedule: &NoiseSchedule,
        z: &Tensor,
        rng: &mut R,
    ) -> Result<Tensor> {
        match self {
            Generator::Student(s) => s.generate(schedule, z, rng),
            Generator::Diffusion { denoiser, steps } => ddim_sample(denoiser, schedule, *steps, z),
        }
    }

    pub fn to_checkpoint(
        &self,
        config: &TrainConfig,
        step: u64,
        extra: &[(&str, &str)],
    ) -> Checkpoint {
        let (name, net, kind) = match self {
            Generator::Student(s) => ("student", s.net().clone(), "student".to_string()),
            Generator::Diffusion { denoiser, steps } => {
                ("denoiser", denoiser.net().clone(), format!("ddim:{steps}"))
            }
        };
        let mut metadata = vec![
            ("config".to_string(), config.to_text()),
            ("generator".to_string(), kind),
        ];
        metadata.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        Checkpoint {
            step,
            metadata,
            models: vec![(name.to_string(), net)],
            optimizers: Vec::new(),
            rng_seed: config.seed,
        }
    }

    /// Reads the sampler out of a generator or trainer checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck.config()?;
        let schedule = NoiseSchedule::linear(config.timesteps)?;
        match ck.meta("generator") {
            Some("student") => Ok(Generator::Student(ck.student(&schedule, config.nfe)?)),
            Some(kind) if kind.starts_with("ddim:") => {
                let steps = kind[5..]
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("generator kind `{kind}`")))?;
                Ok(Generator::Diffusion {
                    denoiser: ck.denoiser("denoiser", Role::Target, config.timesteps)?,
                    steps,
                })
            }
            other => Err(Error::Checkpoint(format!(
                "no generator in checkpoint ({other:?})"
            ))),
        }
    }
}

/// Fixed reference sets and latents for scoring generators during a run.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub reference: EvalReference,
    pub schedule: NoiseSchedule,
    latents: RngStreams,
    n: usize,
}

impl Evaluator {
    pub fn new(config: &TrainConfig, bench: &Benchmark, few_shot: &FewShotSet) -> Result<Self> {
        let n = config.eval_samples;
        if n > HELD_OUT_SIZE {
            return Err(Error::InvalidArgument(format!(
                "eval_samples {n} exceeds held-out size {HELD_OUT_SIZE}"
            )));
        }
        let refs = RngStreams::new(SELECTION_SEED);
        let source = sample_distribution(
            &bench.source,
            n,
            &mut refs.stream(&format!("eval-source/{}", bench.name), 0),
        );
        let centers: Vec<f64> = bench.target.mode_centers().into_iter().flatten().collect();
        Ok(Self {
            reference: EvalReference {
                target: bench.held_out.head_rows(n),
                source,
                exemplars: few_shot.samples.clone(),
                centers: Tensor::matrix(centers.len() / 2, 2, centers)?,
                radius: config.coverage_radius,
            },
            schedule: NoiseSchedule::linear(config.timesteps)?,
            latents: RngStreams::new(config.seed).split("eval"),
            n,
        })
    }

    /// The same latents and re-noising draws on every call.
    pub fn samples(&self, g: &Generator) -> Result<Tensor> {
        let z = normal_tensor(&mut self.latents.stream("latent", 0), self.n, 2);
        g.sample(&self.schedule, &z, &mut self.latents.stream("renoise", 0))
    }

    pub fn evaluate(&self, g: &Generator) -> Result<MetricsReport> {
        evaluate_samples(&self.samples(g)?, &self.reference)
    }
}

fn row(
    step: u64,
    losses: LossSnapshot,
    eval: Option<&Evaluator>,
    g: impl FnOnce() -> Generator,
) -> Result<MetricRow> {
    let metrics = match eval {
        Some(e) => Some(e.evaluate(&g())?),
        None => None,
    };
    Ok(MetricRow {
        step,
        losses,
        metrics,
    })
}

/// Runs the trainer up to `stop` (at most `config.iterations`), logging at
/// step 0, every `eval_every` steps and after the final iteration. Logged
/// steps are shifted by `offset`.
pub fn train_distillation(
    state: &mut TrainerState,
    reals: &RealSource,
    eval: Option<&Evaluator>,
    stop: u64,
    offset: u64,
) -> Result<()> {
    let total = state.config.iterations;
    let every = state.config.eval_every;
    let stop = stop.min(total);
    let log_now = |s: &mut TrainerState| -> Result<()> {
        let r = row(offset + s.step, s.last, eval, || {
            Generator::Student(s.models.student.clone())
        })?;
        s.log.push(r);
        Ok(())
    };
    if state.step == 0 && state.log.is_empty() {
        log_now(state)?;
    }
    while state.step < stop {
        state.unidad_step(reals)?;
        if state.step.is_multiple_of(every) || state.step == total {
            log_now(state)?;
        }
    }
    Ok(())
}

/// How the per-sample timesteps of a denoising fine-tune are drawn.
#[derive(Clone, Debug)]
pub enum TimestepDraw {
    /// Uniform on `[1, T]`.
    Full,
    /// Uniform over the listed timesteps.
    Subset(Vec<usize>),
}

impl TimestepDraw {
    fn draw<R: Rng + ?Sized>(&self, schedule: &NoiseSchedule, n: usize, rng: &mut R) -> Vec<usize> {
        match self {
            TimestepDraw::Full => (0..n)
                .map(|_| schedule.sample_train_timestep(rng))
                .collect(),
            TimestepDraw::Subset(ts) => (0..n).map(|_| ts[rng.random_range(0..ts.len())]).collect(),
        }
    }
}

/// Denoising-MSE training of a copy of `start` on `reals`.
#[allow(clippy::too_many_arguments)]
pub fn train_denoiser(
    start: &Denoiser,
    role: Role,
    reals: &RealSource,
    iterations: u64,
    batch: usize,
    lr: f64,
    streams: &RngStreams,
    eval: Option<(&Evaluator, u64, usize)>,
    offset: u64,
    log: &mut Vec<MetricRow>,
) -> Result<Denoiser> {
    let mut den = start.copy_as(role);
    let schedule = NoiseSchedule::linear(den.horizon())?;
    let mut opt = AdamState::for_params(den.net(), AdamConfig::with_lr(lr));
    let d = den.data_dim();
    let mut last = LossSnapshot::default();
    let (evaluator, every, steps) = match eval {
        Some((e, every, steps)) => (Some(e), every, steps),
        None => (None, u64::MAX, 0),
    };
    let as_gen = |den: &Denoiser| Generator::Diffusion {
        denoiser: den.clone(),
        steps,
    };
    if evaluator.is_some() {
        log.push(row(offset, last, evaluator, || as_gen(&den))?);
    }
    for s in 0..iterations {
        let ts = TimestepDraw::Full.draw(&schedule, batch, &mut streams.stream("timestep", s));
        let y = reals.batch(batch, &mut streams.stream("real", s))?;
        let eps = normal_tensor(&mut streams.stream("noise", s), batch, d);
        let mut tape = Tape::new();
        let bound = den.net().bind(&mut tape, true);
        let loss = denoise_loss_on_tape(&mut tape, &bound, &den, &schedule, &y, &ts, &eps)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("denoiser step {s}: loss {value}")));
        }
        tape.backward(loss)?;
        opt.step(den.net_mut(), &bound.grads(&tape))
            .map_err(|e| Error::NonFinite(format!("denoiser step {s}: {e}")))?;
        last.trg_mse = Some(value);
        let done = s + 1;
        if evaluator.is_some() && (done % every == 0 || done == iterations) {
            log.push(row(offset + done, last, evaluator, || as_gen(&den))?);
        }
    }
    Ok(den)
}

/// Fine-tunes a student on `reals` with the noise-prediction loss implied by
/// its sample output, drawing timesteps only from its ladder.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune_student(
    start: &StudentGenerator,
    reals: &RealSource,
    schedule: &NoiseSchedule,
    iterations: u64,
    batch: usize,
    lr: f64,
    streams: &RngStreams,
    eval: Option<(&Evaluator, u64)>,
    offset: u64,
    log: &mut Vec<MetricRow>,
    mut on_timesteps: impl FnMut(&[usize]),
) -> Result<StudentGenerator> {
    let mut student = start.clone();
    let mut opt = AdamState::for_params(student.net(), AdamConfig::with_lr(lr));
    let d = student.data_dim();
    let draw = TimestepDraw::Subset(student.ladder().to_vec());
    let mut last = LossSnapshot::default();
    let evaluator = eval.map(|e| e.0);
    let every = eval.map_or(u64::MAX, |e| e.1);
    for s in 0..iterations {
        let ts = draw.draw(schedule, batch, &mut streams.stream("timestep", s));
        on_timesteps(&ts);
        let y = reals.batch(batch, &mut streams.stream("real", s))?;
        let eps = normal_tensor(&mut streams.stream("noise", s), batch, d);
        let y_t = schedule.q_sample_rows(&y, &ts, &eps)?;
        let mut scale = Vec::with_capacity(batch * d);
        let mut shift = y_t.clone();
        for (i, &t) in ts.iter().enumerate() {
            let (a, sg) = (schedule.alpha(t)?, schedule.sigma(t)?);
            scale.extend(std::iter::repeat_n(-a / sg, d));
            shift.row_mut(i).iter_mut().for_each(|v| *v /= sg);
        }
        let mut tape = Tape::new();
        let bound = student.net().bind(&mut tape, true);
        let y_t_var = tape.constant(y_t);
        let x_hat = student.predict_on_tape(&mut tape, &bound, y_t_var, &ts)?;
        // ε̂ = (y_t − α·x̂)/σ
        let scale = tape.constant(Tensor::matrix(batch, d, scale)?);
        let shift = tape.constant(shift);
        let scaled = tape.mul(x_hat, scale)?;
        let eps_hat = tape.add(scaled, shift)?;
        let target = tape.constant(eps);
        let diff = tape.sub(eps_hat, target)?;
        let sq = tape.squared_norm(diff);
        let loss = tape.scale(sq, 1.0 / batch as f64);
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "student fine-tune step {s}: loss {value}"
            )));
        }
        tape.backward(loss)?;
        opt.step(student.net_mut(), &bound.grads(&tape))
            .map_err(|e| Error::NonFinite(format!("student fine-tune step {s}: {e}")))?;
        last.trg_mse = Some(value);
        let done = s + 1;
        if evaluator.is_some() && (done % every == 0 || done == iterations) {
            log.push(row(offset + done, last, evaluator, || {
                Generator::Student(student.clone())
            })?);
        }
    }
    Ok(student)
}

/// Trains the source teacher on fresh source samples.
pub fn pretrain_source(config: &TrainConfig, bench: &Benchmark) -> Result<Denoiser> {
    pretrain_source_logged(config, bench, None, &mut Vec::new())
}

/// [`pretrain_source`] with periodic evaluation of the teacher sampled by
/// DDIM with `ft_sample_steps` steps. Evaluation draws from its own streams,
/// so the trained weights do not depend on `eval`.
pub fn pretrain_source_logged(
    config: &TrainConfig,
    bench: &Benchmark,
    eval: Option<&Evaluator>,
    log: &mut Vec<MetricRow>,
) -> Result<Denoiser> {
    let streams = RngStreams::new(config.seed).split("pretrain");
    let init = Denoiser::init(
        &config.architecture(),
        Role::Source,
        config.timesteps,
        &mut streams.stream("init", 0),
    )?;
    train_denoiser(
        &init,
        Role::Source,
        &RealSource::Distribution(bench.source.clone()),
        config.pretrain_iterations,
        config.pretrain_batch_size,
        config.lr_teacher,
        &streams,
        eval.map(|e| (e, config.eval_every, config.ft_sample_steps)),
        0,
        log,
    )
}

pub struct PipelineInputs<'a> {
    pub bench: &'a Benchmark,
    /// The pretrained source teacher.
    pub source: &'a Denoiser,
    pub warm: WarmStart,
}

pub struct PipelineOutput {
    pub generator: Generator,
    pub log: Vec<MetricRow>,
    /// Final distillation state, when the last stage was one.
    pub trainer: Option<TrainerState>,
    /// Total logged steps.
    pub steps: u64,
}

fn distill_streams(config: &TrainConfig) -> RngStreams {
    RngStreams::new(config.seed).split("distill")
}

fn source_only(config: &TrainConfig, reals: GanReals) -> TrainConfig {
    TrainConfig {
        a: 0.0,
        target_mode: TargetMode::Disabled,
        gan_reals: reals,
        ..config.clone()
    }
}

fn reals_for(config: &TrainConfig, bench: &Benchmark, few_shot: &FewShotSet) -> RealSource {
    match config.gan_reals {
        GanReals::FewShot => RealSource::Exemplars(few_shot.samples.clone()),
        GanReals::Source => RealSource::Distribution(bench.source.clone()),
    }
}

pub fn run_pipeline(
    kind: PipelineKind,
    config: &TrainConfig,
    inputs: PipelineInputs<'_>,
) -> Result<PipelineOutput> {
    config.validate()?;
    let config = config.clone().resolved();
    let bench = inputs.bench;
    let few_shot = bench.few_shot(config.shots)?;
    let eval = Evaluator::new(&config, bench, &few_shot)?;
    let schedule = NoiseSchedule::linear(config.timesteps)?;
    let y = RealSource::Exemplars(few_shot.samples.clone());
    let ft_streams = RngStreams::new(config.seed).split("ft");
    let ft_every = Some((&eval, config.eval_every, config.ft_sample_steps));

    match kind {
        PipelineKind::Unidad | PipelineKind::Dmd2 => {
            let cfg = if kind == PipelineKind::Dmd2 {
                source_only(&config, GanReals::Source)
            } else {
                config.clone()
            };
            let reals = reals_for(&cfg, bench, &few_shot);
            let mut state =
                TrainerState::new(cfg, distill_streams(&config), inputs.source, inputs.warm)?;
            let total = state.config.iterations;
            train_distillation(&mut state, &reals, Some(&eval), total, 0)?;
            Ok(PipelineOutput {
                generator: Generator::Student(state.models.student.clone()),
                log: state.log.clone(),
                steps: total,
                trainer: Some(state),
            })
        }
        PipelineKind::Ft => {
            let mut log = Vec::new();
            let ft = train_denoiser(
                inputs.source,
                Role::Target,
                &y,
                config.ft_iterations,
                config.batch_size,
                config.lr_teacher,
                &ft_streams,
                ft_every,
                0,
                &mut log,
            )?;
            Ok(PipelineOutput {
                generator: Generator::Diffusion {
                    denoiser: ft,
                    steps: config.ft_sample_steps,
                },
                log,
                trainer: None,
                steps: config.ft_iterations,
            })
        }
        PipelineKind::FtThenDmd2 => {
            let mut log = Vec::new();
            let ft = train_denoiser(
                inputs.source,
                Role::Source,
                &y,
                config.ft_iterations,
                config.batch_size,
                config.lr_teacher,
                &ft_streams,
                ft_every,
                0,
                &mut log,
            )?;
            let cfg = TrainConfig {
                student_init: StudentInit::CopyOfSource,
                ..source_only(&config, GanReals::FewShot)
            };
            let reals = reals_for(&cfg, bench, &few_shot);
            let mut state =
                TrainerState::new(cfg, distill_streams(&config), &ft, WarmStart::default())?;
            state.log = log;
            let total = state.config.iterations;
            train_distillation(&mut state, &reals, Some(&eval), total, config.ft_iterations)?;
            Ok(PipelineOutput {
                generator: Generator::Student(state.models.student.clone()),
                log: state.log.clone(),
                steps: config.ft_iterations + total,
                trainer: Some(state),
            })
        }
        PipelineKind::Dmd2ThenFt => {
            let cfg = source_only(&config, GanReals::Source);
            let reals = reals_for(&cfg, bench, &few_shot);
            let mut state =
                TrainerState::new(cfg, distill_streams(&config), inputs.source, inputs.warm)?;
            let total = state.config.iterations;
            train_distillation(&mut state, &reals, Some(&eval), total, 0)?;
            let mut log = state.log.clone();
            let student = fine_tune_student(
                &state.models.student,
                &y,
                &schedule,
                config.ft_iterations,
                config.batch_size,
                config.lr_student,
                &RngStreams::new(config.seed).split("student-ft"),
                Some((&eval, config.eval_every)),
                total,
                &mut log,
                |_| {},
            )?;
            Ok(PipelineOutput {
                generator: Generator::Student(student),
                log,
                trainer: None,
                steps: total + config.ft_iterations,
            })
        }
    }
}
