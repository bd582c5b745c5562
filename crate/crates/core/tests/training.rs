use udad_core::adversarial::{gan_d_loss_value, gan_g_loss_value};
use udad_core::datasets::{make_benchmark, BenchmarkName};
use udad_core::diffusion::{denoise_loss, Denoiser, Role};
use udad_core::distillation::{dual_dmd_direction, DmdProbe, DomainTag};
use udad_core::tensor::{MlpNetwork, RngStreams, Tape, Tensor};
use udad_core::training::{
    fine_tune_student, metrics_csv, pretrain_source, pretrain_source_logged, run_pipeline,
    train_distillation, Checkpoint, Evaluator, GanReals, Generator, PipelineInputs, PipelineKind,
    RealSource, StepDraws, StudentInit, SubStep, TargetMode, TrainConfig, TrainerState, WarmStart,
};
use udad_core::Error;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        hidden_width: 16,
        hidden_layers: 2,
        timesteps: 100,
        batch_size: 8,
        iterations: 12,
        eval_every: 5,
        eval_samples: 16,
        ft_iterations: 6,
        ft_sample_steps: 5,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn teacher(config: &TrainConfig, seed: u64) -> Denoiser {
    Denoiser::init(
        &config.architecture(),
        Role::Source,
        config.timesteps,
        &mut RngStreams::new(seed).stream("teacher", 0),
    )
    .unwrap()
}

fn exemplars() -> RealSource {
    RealSource::Exemplars(
        make_benchmark(BenchmarkName::Close)
            .few_shot(10)
            .unwrap()
            .samples,
    )
}

fn trainer(config: TrainConfig) -> TrainerState {
    let t = teacher(&config, 11);
    let seed = config.seed;
    TrainerState::new(config, RngStreams::new(seed), &t, WarmStart::default()).unwrap()
}

fn scrambled(den: &Denoiser, role: Role, seed: u64) -> Denoiser {
    let arch_widths: Vec<usize> = den
        .net()
        .layers()
        .iter()
        .map(|l| l.in_width())
        .chain([den.data_dim()])
        .collect();
    let mut rng = RngStreams::new(seed).stream("scramble", 0);
    let net =
        MlpNetwork::init(&arch_widths, udad_core::tensor::Activation::Relu, &mut rng).unwrap();
    Denoiser::new(net, role, den.horizon()).unwrap()
}

// ---------------------------------------------------------------- config

#[test]
fn config_text_round_trip() {
    let mut c = tiny_config();
    c.a = 0.6;
    c.gan_family = "hinge".parse().unwrap();
    c.target_checkpoint = Some("t.ckpt".into());
    c.target_mode = TargetMode::FrozenCheckpoint;
    let back = TrainConfig::parse(&c.to_text()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn config_defaults_follow_benchmark() {
    assert_eq!(TrainConfig::parse("benchmark = distant").unwrap().a, 0.75);
    assert_eq!(
        TrainConfig::parse("# comment\n\nbenchmark = close\n")
            .unwrap()
            .a,
        0.25
    );
}

#[test]
fn config_errors_name_key_and_line() {
    let e = TrainConfig::parse("seed = 1\na = 1.5\n").unwrap_err();
    match e {
        Error::Config { key, line, .. } => assert_eq!((key.as_str(), line), ("a", 2)),
        other => panic!("{other:?}"),
    }
    let e = TrainConfig::parse("nfe = 3\nbogus = 1\n").unwrap_err();
    assert!(matches!(e, Error::Config { ref key, line: 2, .. } if key == "bogus"));
    assert!(TrainConfig::parse("update_ratio = 0").is_err());
    assert!(TrainConfig::parse("seed = 1\nseed = 2").is_err());
    assert!(TrainConfig::parse("just text").is_err());
    assert!(TrainConfig::parse("gan_family = vanilla").is_err());
}

#[test]
fn disabled_target_forces_zero_weight() {
    let c = TrainConfig::parse("a = 0.8\ntarget_mode = disabled").unwrap();
    assert_eq!(c.a, 0.0);
}

#[test]
fn shared_learning_rate_fans_out() {
    let c = TrainConfig::parse("lr = 0.01\nlr_disc = 0.5").unwrap();
    assert_eq!(
        (c.lr_student, c.lr_fake, c.lr_target, c.lr_teacher),
        (0.01, 0.01, 0.01, 0.01)
    );
    assert_eq!(c.lr_disc, 0.5);
}

// ---------------------------------------------------------------- losses

#[test]
fn student_loss_vanishes_when_fake_equals_source() {
    let state = trainer(TrainConfig {
        lambda_g_gan: 0.0,
        ..tiny_config()
    });
    let draws = state.draws(0, &exemplars()).unwrap();
    assert_eq!(state.student_loss_value(&draws).unwrap(), 0.0);
}

#[test]
fn student_loss_ignores_target_at_zero_weight() {
    let mut state = trainer(TrainConfig {
        a: 0.0,
        ..tiny_config()
    });
    state.models.fake = scrambled(&state.models.fake, Role::Fake, 1);
    let draws = state.draws(0, &exemplars()).unwrap();
    let before = state.student_loss_value(&draws).unwrap();
    assert!(before != 0.0);
    state.models.target = Some(scrambled(&state.models.source, Role::Target, 2));
    let after = state.student_loss_value(&draws).unwrap();
    assert_eq!(before.to_bits(), after.to_bits());
}

#[test]
fn student_loss_is_surrogate_plus_weighted_gan() {
    let mut state = trainer(TrainConfig {
        a: 0.4,
        lambda_g_gan: 0.7,
        ..tiny_config()
    });
    state.models.fake = scrambled(&state.models.fake, Role::Fake, 3);
    state.models.target = Some(scrambled(&state.models.source, Role::Target, 4));
    let draws = state.draws(0, &exemplars()).unwrap();
    let got = state.student_loss_value(&draws).unwrap();

    let m = &state.models;
    let s = &state.schedule;
    let x = m
        .student
        .generate(s, &draws.z, &mut state.streams.stream("renoise", 0))
        .unwrap();
    let probe = DmdProbe::new(&m.fake, s, &x, &draws.ts, &draws.eps).unwrap();
    let d_src = probe.direction(&m.source, s, DomainTag::Source).unwrap();
    let d_trg = probe
        .direction(m.target.as_ref().unwrap(), s, DomainTag::Target)
        .unwrap();
    let dir = dual_dmd_direction(&d_src, &d_trg, 0.4).unwrap();
    // ½·mean‖x − (x + d)‖² is ½·mean‖d‖².
    let surrogate: f64 =
        dir.d_vec().data().iter().map(|v| v * v).sum::<f64>() / (2.0 * x.rows() as f64);
    let x_t = s.q_sample_rows(&x, &draws.ts, &draws.eps).unwrap();
    let logits = m.disc.extract_logits(&m.fake, &x_t, &draws.ts).unwrap();
    let gan = gan_g_loss_value(state.config.gan_family, &logits).unwrap();
    let want = surrogate + 0.7 * gan;
    assert!(
        (got - want).abs() <= 1e-12 * (1.0 + want.abs()),
        "{got} vs {want}"
    );
}

fn fake_loss(state: &TrainerState, draws: &StepDraws) -> f64 {
    let m = &state.models;
    let x = m
        .student
        .generate(
            &state.schedule,
            &draws.z,
            &mut state.streams.stream("renoise", 0),
        )
        .unwrap();
    let x_t = state
        .schedule
        .q_sample_rows(&x, &draws.ts, &draws.eps)
        .unwrap();
    let mut tape = Tape::new();
    let fake_b = m.fake.net().bind(&mut tape, true);
    let disc_b = m.disc.bind(&mut tape, true);
    let x_t_var = tape.constant(x_t);
    let (total, _, _) = state
        .fake_objective(&mut tape, &fake_b, &disc_b, x_t_var, draws)
        .unwrap();
    tape.value(total).item().unwrap()
}

#[test]
fn fake_loss_is_mse_plus_weighted_disc() {
    let state = trainer(TrainConfig {
        lambda_d_gan: 0.3,
        ..tiny_config()
    });
    let draws = state.draws(0, &exemplars()).unwrap();
    let got = fake_loss(&state, &draws);

    let m = &state.models;
    let s = &state.schedule;
    let x = m
        .student
        .generate(s, &draws.z, &mut state.streams.stream("renoise", 0))
        .unwrap();
    let x_t = s.q_sample_rows(&x, &draws.ts, &draws.eps).unwrap();
    let y_t = s.q_sample_rows(&draws.y, &draws.ts, &draws.eps).unwrap();
    let pred = m.fake.predict(&x_t, &draws.ts).unwrap();
    let mse: f64 = pred
        .data()
        .iter()
        .zip(draws.eps.data())
        .map(|(p, e)| (p - e).powi(2))
        .sum::<f64>()
        / x.rows() as f64;
    let fake_logits = m.disc.extract_logits(&m.fake, &x_t, &draws.ts).unwrap();
    let real_logits = m.disc.extract_logits(&m.fake, &y_t, &draws.ts).unwrap();
    let d = gan_d_loss_value(state.config.gan_family, &real_logits, &fake_logits).unwrap();
    let want = mse + 0.3 * d;
    assert!(
        (got - want).abs() <= 1e-12 * (1.0 + want),
        "{got} vs {want}"
    );
}

#[test]
fn fake_loss_vanishes_for_perfect_fake() {
    // A fake whose output is pinned to ε by a zero net and a matching draw.
    let mut state = trainer(TrainConfig {
        lambda_d_gan: 0.0,
        ..tiny_config()
    });
    let widths: Vec<usize> = state.config.architecture().widths();
    state.models.fake = Denoiser::new(
        MlpNetwork::zeros(&widths, state.config.activation).unwrap(),
        Role::Fake,
        100,
    )
    .unwrap();
    let mut draws = state.draws(0, &exemplars()).unwrap();
    draws.eps = Tensor::zeros(draws.eps.shape());
    assert_eq!(fake_loss(&state, &draws), 0.0);
}

fn single_draw(eps: [f64; 2]) -> StepDraws {
    StepDraws {
        ts: vec![50],
        z: Tensor::zeros(&[1, 2]),
        eps: Tensor::from_rows(&[eps]),
        y: Tensor::from_rows(&[[0.5, -0.5]]),
    }
}

fn target_loss(state: &TrainerState, draws: &StepDraws) -> udad_core::Result<f64> {
    let mut tape = Tape::new();
    let t = state.models.target.as_ref().unwrap_or(&state.models.source);
    let b = t.net().bind(&mut tape, true);
    let l = state.target_objective(&mut tape, &b, draws)?;
    Ok(tape.value(l).item()?)
}

#[test]
fn target_loss_examples() {
    let mut state = trainer(TrainConfig {
        batch_size: 1,
        ..tiny_config()
    });
    let widths = state.config.architecture().widths();
    state.models.target = Some(
        Denoiser::new(
            MlpNetwork::zeros(&widths, state.config.activation).unwrap(),
            Role::Target,
            100,
        )
        .unwrap(),
    );
    assert_eq!(target_loss(&state, &single_draw([3.0, 4.0])).unwrap(), 25.0);
    assert_eq!(target_loss(&state, &single_draw([0.0, 0.0])).unwrap(), 0.0);

    // Same formula as the teacher's denoising loss.
    state.models.target = Some(scrambled(&state.models.source, Role::Target, 5));
    let d = single_draw([0.3, -1.2]);
    let direct = denoise_loss(
        state.models.target.as_ref().unwrap(),
        &state.schedule,
        &d.y,
        &d.ts,
        &d.eps,
    )
    .unwrap();
    assert_eq!(target_loss(&state, &d).unwrap(), direct);
}

#[test]
fn target_loss_requires_online_teacher() {
    let state = trainer(TrainConfig {
        target_mode: TargetMode::Disabled,
        ..tiny_config()
    });
    assert!(target_loss(&state, &single_draw([1.0, 1.0])).is_err());

    let cfg = TrainConfig {
        target_mode: TargetMode::FrozenCheckpoint,
        ..tiny_config()
    };
    let t = teacher(&cfg, 11);
    let warm = WarmStart {
        target: Some(t.clone()),
        ..Default::default()
    };
    let frozen = TrainerState::new(cfg, RngStreams::new(1), &t, warm).unwrap();
    assert!(target_loss(&frozen, &single_draw([1.0, 1.0])).is_err());
}

// ---------------------------------------------------------------- stepping

#[derive(Default)]
struct Counts {
    student: usize,
    fake: usize,
    target: usize,
}

#[test]
fn update_schedule_and_gradient_isolation() {
    let mut state = trainer(tiny_config());
    let source0 = state.models.source.clone();
    let reals = exemplars();
    let mut counts = Counts::default();
    let mut isolation_ok = true;
    for _ in 0..10 {
        let mut probe = |s: SubStep, g: udad_core::training::GradPresence| match s {
            SubStep::Student => {
                counts.student += 1;
                isolation_ok &= g.student && !g.fake && !g.disc && !g.target;
            }
            SubStep::FakeAndDisc => {
                counts.fake += 1;
                isolation_ok &= !g.student && g.fake && g.disc && !g.target;
            }
            SubStep::Target => {
                counts.target += 1;
                isolation_ok &= !g.student && !g.fake && !g.disc && g.target;
            }
        };
        let r = state.step_probed(&reals, Some(&mut probe)).unwrap();
        assert_eq!(r.student_updated, r.step % 5 == 0);
        assert_eq!(r.target_updated, r.step % 5 == 0);
    }
    assert_eq!((counts.student, counts.fake, counts.target), (2, 10, 2));
    assert!(isolation_ok);
    assert_eq!(state.models.source, source0);
    assert_eq!(state.step, 10);
}

#[test]
fn update_counts_follow_ceiling_rule() {
    for (n, ratio) in [(7u64, 3u64), (9, 1), (11, 4)] {
        let mut state = trainer(TrainConfig {
            update_ratio: ratio,
            target_mode: TargetMode::Disabled,
            ..tiny_config()
        });
        let (mut s, mut t) = (0, 0);
        for _ in 0..n {
            let r = state.unidad_step(&exemplars()).unwrap();
            s += r.student_updated as u64;
            t += r.target_updated as u64;
        }
        assert_eq!(s, n.div_ceil(ratio));
        assert_eq!(t, 0);
    }
}

#[test]
fn frozen_target_never_moves() {
    let cfg = TrainConfig {
        target_mode: TargetMode::FrozenCheckpoint,
        ..tiny_config()
    };
    let src = teacher(&cfg, 11);
    let frozen = scrambled(&src, Role::Target, 9);
    let warm = WarmStart {
        target: Some(frozen.clone()),
        ..Default::default()
    };
    let mut state = TrainerState::new(cfg, RngStreams::new(2), &src, warm).unwrap();
    for _ in 0..8 {
        let r = state.unidad_step(&exemplars()).unwrap();
        assert!(!r.target_updated);
    }
    assert_eq!(state.models.target.as_ref().unwrap().net(), frozen.net());
    assert_eq!(state.models.source.net(), src.net());
}

#[test]
fn missing_prerequisites_are_reported() {
    let cfg = tiny_config();
    let t = teacher(&cfg, 11);
    let pre = TrainConfig {
        student_init: StudentInit::PreDistilled,
        ..cfg.clone()
    };
    let e = TrainerState::new(pre, RngStreams::new(1), &t, WarmStart::default()).unwrap_err();
    assert!(matches!(e, Error::MissingPrerequisite(_)), "{e:?}");
    let frozen = TrainConfig {
        target_mode: TargetMode::FrozenCheckpoint,
        ..cfg
    };
    let e = TrainerState::new(frozen, RngStreams::new(1), &t, WarmStart::default()).unwrap_err();
    assert!(matches!(e, Error::MissingPrerequisite(_)), "{e:?}");
}

// ---------------------------------------------------------------- pipelines

fn pipeline(kind: PipelineKind, config: &TrainConfig) -> udad_core::training::PipelineOutput {
    let bench = make_benchmark(config.benchmark);
    let src = teacher(config, 11);
    run_pipeline(
        kind,
        config,
        PipelineInputs {
            bench: &bench,
            source: &src,
            warm: WarmStart::default(),
        },
    )
    .unwrap()
}

#[test]
fn zero_iteration_fine_tune_is_the_source() {
    let cfg = TrainConfig {
        ft_iterations: 0,
        ..tiny_config()
    };
    let out = pipeline(PipelineKind::Ft, &cfg);
    match out.generator {
        Generator::Diffusion { denoiser, steps } => {
            assert_eq!(denoiser.net(), teacher(&cfg, 11).net());
            assert_eq!(steps, 5);
        }
        _ => panic!("ft yields a diffusion sampler"),
    }
}

#[test]
fn student_fine_tune_uses_only_ladder_timesteps() {
    let cfg = tiny_config();
    let out = pipeline(PipelineKind::Dmd2, &cfg);
    let Generator::Student(student) = out.generator else {
        panic!("dmd2 yields a student")
    };
    let ladder = student.ladder().to_vec();
    assert_eq!(ladder, vec![100, 66, 33]);
    let mut seen = std::collections::BTreeSet::new();
    let mut log = Vec::new();
    let sched = udad_core::diffusion::NoiseSchedule::linear(100).unwrap();
    fine_tune_student(
        &student,
        &exemplars(),
        &sched,
        20,
        16,
        1e-4,
        &RngStreams::new(4),
        None,
        0,
        &mut log,
        |ts| seen.extend(ts.iter().copied()),
    )
    .unwrap();
    assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![33, 66, 100]);
}

#[test]
fn pipelines_are_deterministic() {
    let cfg = tiny_config();
    for &kind in PipelineKind::ALL {
        let a = pipeline(kind, &cfg);
        let b = pipeline(kind, &cfg);
        let (la, lb) = (metrics_csv(&a.log), metrics_csv(&b.log));
        assert_eq!(la, lb, "{kind}");
        assert_eq!(a.generator, b.generator, "{kind}");
        assert!(a.log.len() >= 2, "{kind}");
        let ca = a.generator.to_checkpoint(&cfg, a.steps, &[]).to_bytes();
        let cb = b.generator.to_checkpoint(&cfg, b.steps, &[]).to_bytes();
        assert_eq!(ca, cb, "{kind}");
    }
}

#[test]
fn pipeline_logs_cover_every_stage() {
    let cfg = tiny_config();
    let steps = |kind| {
        pipeline(kind, &cfg)
            .log
            .iter()
            .map(|r| r.step)
            .collect::<Vec<_>>()
    };
    assert_eq!(steps(PipelineKind::Unidad), vec![0, 5, 10, 12]);
    assert_eq!(steps(PipelineKind::Ft), vec![0, 5, 6]);
    assert_eq!(steps(PipelineKind::FtThenDmd2), vec![0, 5, 6, 11, 16, 18]);
    assert_eq!(steps(PipelineKind::Dmd2ThenFt), vec![0, 5, 10, 12, 17, 18]);
}

#[test]
fn source_only_unidad_matches_dmd2() {
    let base = tiny_config();
    let dmd2 = pipeline(PipelineKind::Dmd2, &base);
    let cfg = TrainConfig {
        a: 0.0,
        target_mode: TargetMode::Disabled,
        gan_reals: GanReals::Source,
        ..base
    };
    let unidad = pipeline(PipelineKind::Unidad, &cfg);
    assert_eq!(metrics_csv(&unidad.log), metrics_csv(&dmd2.log));
    assert_eq!(unidad.generator, dmd2.generator);
}

// ---------------------------------------------------------------- checkpoints

fn evaluator(cfg: &TrainConfig) -> Evaluator {
    let bench = make_benchmark(cfg.benchmark);
    Evaluator::new(cfg, &bench, &bench.few_shot(cfg.shots).unwrap()).unwrap()
}

#[test]
fn trainer_checkpoint_round_trip() {
    let mut state = trainer(tiny_config());
    let reals = exemplars();
    for _ in 0..7 {
        state.unidad_step(&reals).unwrap();
    }
    let bytes = state.to_checkpoint(&[("note", "x")]).to_bytes();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.meta("note"), Some("x"));
    let back = TrainerState::from_checkpoint(&ck).unwrap();
    assert_eq!(back.models, state.models);
    assert_eq!(back.optim, state.optim);
    assert_eq!(back.step, 7);
    assert_eq!(back.config, state.config);
    assert_eq!(back.to_checkpoint(&[("note", "x")]).to_bytes(), bytes);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = tiny_config();
    let reals = exemplars();
    let eval = evaluator(&cfg);

    let mut full = trainer(cfg.clone());
    train_distillation(&mut full, &reals, Some(&eval), cfg.iterations, 0).unwrap();

    let mut first = trainer(cfg.clone());
    train_distillation(&mut first, &reals, Some(&eval), 7, 0).unwrap();
    let bytes = first.to_checkpoint(&[]).to_bytes();
    drop(first);
    let mut resumed =
        TrainerState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    train_distillation(&mut resumed, &reals, Some(&eval), cfg.iterations, 0).unwrap();

    assert_eq!(metrics_csv(&resumed.log), metrics_csv(&full.log));
    assert_eq!(resumed.models, full.models);
    assert_eq!(
        resumed.to_checkpoint(&[]).to_bytes(),
        full.to_checkpoint(&[]).to_bytes()
    );
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let state = trainer(tiny_config());
    let bytes = state.to_checkpoint(&[]).to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Checkpoint(_))
    ));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]).is_err());
    let mut version = bytes.clone();
    version[4] = version[4].wrapping_add(1);
    assert!(Checkpoint::from_bytes(&version).is_err());

    // A generator checkpoint lacks the trainer blocks.
    let g = Generator::Student(state.models.student.clone()).to_checkpoint(&state.config, 0, &[]);
    assert!(TrainerState::from_checkpoint(&g).is_err());
    assert!(Generator::from_checkpoint(&g).is_ok());
}

#[test]
fn pretrain_logging_does_not_change_weights() {
    let cfg = TrainConfig {
        pretrain_iterations: 12,
        pretrain_batch_size: 16,
        ..tiny_config()
    };
    let bench = make_benchmark(cfg.benchmark);
    let eval = Evaluator::new(&cfg, &bench, &bench.few_shot(cfg.shots).unwrap()).unwrap();
    let mut log = Vec::new();
    let logged = pretrain_source_logged(&cfg, &bench, Some(&eval), &mut log).unwrap();
    assert_eq!(logged, pretrain_source(&cfg, &bench).unwrap());
    assert_eq!(
        log.iter().map(|r| r.step).collect::<Vec<_>>(),
        vec![0, 5, 10, 12]
    );
    assert!(log.iter().all(|r| r.metrics.is_some()));
}
