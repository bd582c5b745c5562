use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use udad_core::adversarial::{GanFamily, HeadLayout};
use udad_core::datasets::{make_benchmark, Benchmark, BenchmarkName, SHOT_COUNTS};
use udad_core::diffusion::{Denoiser, NoiseSchedule, Role};
use udad_core::distillation::MAX_NFE;
use udad_core::evaluation::MetricsReport;
use udad_core::training::{
    pretrain_source, pretrain_source_logged, run_pipeline, write_metrics_csv, Checkpoint,
    Evaluator, Generator, PipelineInputs, PipelineKind, StudentInit, TargetMode, TrainConfig,
    WarmStart,
};

use crate::manifest::{
    load_config, out_root, unix_seconds, RunManifest, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE,
    SVG_FILE,
};
use crate::svg::{emit_scatter_svg, Overlays};

pub const TRAINER_FILE: &str = "trainer.ckpt";
pub const SOURCE_FILE: &str = "source.ckpt";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Parser, Debug)]
#[command(
    name = "udad",
    version,
    about = "Few-step distillation with few-shot adaptation on 2-D benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat `key = value` config file; omitted keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `benchmark` from the config file.
    #[arg(long)]
    pub benchmark: Option<String>,
    /// Overrides `seed` from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to a fresh directory under $UDAD_OUT_ROOT (or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut o = Vec::new();
        if let Some(b) = &self.benchmark {
            o.push(("benchmark", b.clone()));
        }
        if let Some(s) = self.seed {
            o.push(("seed", s.to_string()));
        }
        o
    }

    fn load(&self, extra: &[(&'static str, String)]) -> Result<TrainConfig> {
        let mut o = self.overrides();
        o.extend_from_slice(extra);
        load_config(self.config.as_deref(), &o)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    A,
    Nfe,
    K,
    Family,
    Heads,
}

impl Axis {
    pub fn key(self) -> &'static str {
        match self {
            Axis::A => "a",
            Axis::Nfe => "nfe",
            Axis::K => "shots",
            Axis::Family => "gan_family",
            Axis::Heads => "disc_heads",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Axis::A => "a",
            Axis::Nfe => "nfe",
            Axis::K => "k",
            Axis::Family => "family",
            Axis::Heads => "heads",
        }
    }

    pub fn values(self) -> Vec<String> {
        match self {
            Axis::A => ["0", "0.25", "0.5", "0.75", "1"].map(String::from).to_vec(),
            Axis::Nfe => (1..=MAX_NFE).map(|n| n.to_string()).collect(),
            Axis::K => SHOT_COUNTS.iter().map(|k| k.to_string()).collect(),
            Axis::Family => GanFamily::ALL
                .iter()
                .map(|f| f.name().to_string())
                .collect(),
            Axis::Heads => [HeadLayout::Multi, HeadLayout::Single]
                .iter()
                .map(|h| h.name().to_string())
                .collect(),
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the source teacher on the benchmark's source distribution.
    PretrainSource(ConfigArgs),
    /// Run one pipeline end to end.
    Run {
        #[command(flatten)]
        args: ConfigArgs,
        /// unidad, ft, dmd2, ft_then_dmd2 or dmd2_then_ft.
        #[arg(long, default_value = "unidad")]
        pipeline: String,
    },
    /// Run a pipeline once per value of one ablation axis.
    Sweep {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, default_value = "unidad")]
        pipeline: String,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Score a checkpoint against its benchmark and print the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Score against another benchmark than the checkpoint's own.
        #[arg(long)]
        benchmark: Option<String>,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scatter-plot a checkpoint's generations as SVG.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output file; defaults to `<checkpoint>.svg` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainSource(args) => cmd_pretrain(&args),
        Command::Run { args, pipeline } => cmd_run(&args, &pipeline),
        Command::Sweep {
            args,
            pipeline,
            axis,
        } => cmd_sweep(&args, &pipeline, axis),
        Command::Eval {
            checkpoint,
            benchmark,
            out,
        } => cmd_eval(&checkpoint, benchmark.as_deref(), out.as_deref()),
        Command::Plot { checkpoint, out } => cmd_plot(&checkpoint, out.as_deref()),
    }
}

fn parse_pipeline(name: &str) -> Result<PipelineKind> {
    Ok(name.parse::<PipelineKind>()?)
}

fn default_dir(prefix: &str, config: &TrainConfig) -> PathBuf {
    let hash = crate::manifest::content_hash(&config.to_text());
    out_root().join(format!(
        "{prefix}-{}-s{}-{}",
        config.benchmark,
        config.seed,
        &hash[..10]
    ))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        bail!("checkpoint {} not found", path.display());
    }
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

/// The denoiser in a checkpoint written by this tool or by the trainer.
fn denoiser_from(path: &Path, role: Role, horizon: usize) -> Result<Denoiser> {
    let ck = load_checkpoint(path)?;
    let name = ["denoiser", "source", "target"]
        .into_iter()
        .find(|n| ck.model(n).is_some())
        .ok_or_else(|| anyhow!("{} holds no denoiser", path.display()))?;
    Ok(ck.denoiser(name, role, horizon)?)
}

/// The source teacher named by the config, or a freshly pretrained one.
fn source_teacher(config: &TrainConfig, bench: &Benchmark) -> Result<(Denoiser, String)> {
    match &config.source_checkpoint {
        Some(p) => Ok((
            denoiser_from(Path::new(p), Role::Source, config.timesteps)?,
            p.clone(),
        )),
        None => Ok((pretrain_source(config, bench)?, "pretrained-in-run".into())),
    }
}

fn warm_start(config: &TrainConfig) -> Result<WarmStart> {
    let mut warm = WarmStart::default();
    if config.student_init == StudentInit::PreDistilled {
        let p = config.student_checkpoint.as_ref().ok_or_else(|| {
            anyhow!("student_init = pre-distilled-checkpoint needs student_checkpoint")
        })?;
        let schedule = NoiseSchedule::linear(config.timesteps)?;
        warm.student = Some(load_checkpoint(Path::new(p))?.student(&schedule, config.nfe)?);
    }
    if config.target_mode == TargetMode::FrozenCheckpoint {
        let p = config
            .target_checkpoint
            .as_ref()
            .ok_or_else(|| anyhow!("target_mode = frozen-checkpoint needs target_checkpoint"))?;
        warm.target = Some(denoiser_from(Path::new(p), Role::Target, config.timesteps)?);
    }
    Ok(warm)
}

fn overlays(eval: &Evaluator, bench: &Benchmark) -> Overlays {
    let ex = &eval.reference.exemplars;
    Overlays {
        exemplars: (0..ex.rows())
            .map(|r| [ex.row(r)[0], ex.row(r)[1]])
            .collect(),
        centers: bench.source.mode_centers(),
    }
}

fn plot_generator(g: &Generator, eval: &Evaluator, bench: &Benchmark, path: &Path) -> Result<()> {
    let x = eval.samples(g)?;
    let pts: Vec<[f64; 2]> = (0..x.rows()).map(|r| [x.row(r)[0], x.row(r)[1]]).collect();
    emit_scatter_svg(&pts, &overlays(eval, bench), path)
}

fn write_file(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
}

fn cmd_pretrain(args: &ConfigArgs) -> Result<()> {
    let started = (Instant::now(), unix_seconds());
    let config = args.load(&[])?;
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| default_dir("pretrain-source", &config));
    create_dir(&dir)?;
    let bench = make_benchmark(config.benchmark);
    let eval = Evaluator::new(&config, &bench, &bench.few_shot(config.shots)?)?;
    let mut log = Vec::new();
    let den = pretrain_source_logged(&config, &bench, Some(&eval), &mut log)?;
    let g = Generator::Diffusion {
        denoiser: den,
        steps: config.ft_sample_steps,
    };
    write_file(&dir, CONFIG_FILE, config.to_text())?;
    write_metrics_csv(&dir.join(METRICS_FILE), &log)?;
    g.to_checkpoint(
        &config,
        config.pretrain_iterations,
        &[("pipeline", "pretrain-source")],
    )
    .save(&dir.join(CHECKPOINT_FILE))?;
    plot_generator(&g, &eval, &bench, &dir.join(SVG_FILE))?;
    RunManifest {
        command: "pretrain-source".into(),
        pipeline: "pretrain-source".into(),
        config,
        source: "pretrained-in-run".into(),
        files: [CONFIG_FILE, METRICS_FILE, CHECKPOINT_FILE, SVG_FILE]
            .map(String::from)
            .to_vec(),
        started_unix: started.1,
        wall_seconds: started.0.elapsed().as_secs_f64(),
    }
    .write(&dir)?;
    println!("{}", dir.display());
    Ok(())
}

/// Runs one pipeline into `dir` and returns its final metrics.
fn run_into(
    dir: &Path,
    command: &str,
    kind: PipelineKind,
    config: &TrainConfig,
    bench: &Benchmark,
    source: &(Denoiser, String),
) -> Result<Option<MetricsReport>> {
    let started = (Instant::now(), unix_seconds());
    create_dir(dir)?;
    let out = run_pipeline(
        kind,
        config,
        PipelineInputs {
            bench,
            source: &source.0,
            warm: warm_start(config)?,
        },
    )?;
    let config = config.clone().resolved();
    let mut files: Vec<String> = [CONFIG_FILE, METRICS_FILE, CHECKPOINT_FILE, SVG_FILE]
        .map(String::from)
        .to_vec();
    write_file(dir, CONFIG_FILE, config.to_text())?;
    write_metrics_csv(&dir.join(METRICS_FILE), &out.log)?;
    out.generator
        .to_checkpoint(&config, out.steps, &[("pipeline", kind.name())])
        .save(&dir.join(CHECKPOINT_FILE))?;
    if let Some(state) = &out.trainer {
        state
            .to_checkpoint(&[("pipeline", kind.name())])
            .save(&dir.join(TRAINER_FILE))?;
        files.push(TRAINER_FILE.into());
    }
    let eval = Evaluator::new(&config, bench, &bench.few_shot(config.shots)?)?;
    plot_generator(&out.generator, &eval, bench, &dir.join(SVG_FILE))?;
    RunManifest {
        command: command.into(),
        pipeline: kind.name().into(),
        config,
        source: source.1.clone(),
        files,
        started_unix: started.1,
        wall_seconds: started.0.elapsed().as_secs_f64(),
    }
    .write(dir)?;
    Ok(out.log.last().and_then(|r| r.metrics))
}

fn cmd_run(args: &ConfigArgs, pipeline: &str) -> Result<()> {
    let kind = parse_pipeline(pipeline)?;
    let config = args.load(&[])?;
    let bench = make_benchmark(config.benchmark);
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| default_dir(kind.name(), &config));
    let source = source_teacher(&config, &bench)?;
    let report = run_into(&dir, "run", kind, &config, &bench, &source)?;
    if let Some(r) = report {
        print_report(&r);
    }
    println!("{}", dir.display());
    Ok(())
}

fn cmd_sweep(args: &ConfigArgs, pipeline: &str, axis: Axis) -> Result<()> {
    let kind = parse_pipeline(pipeline)?;
    let base = args.load(&[])?;
    let root = args
        .out
        .clone()
        .unwrap_or_else(|| default_dir(&format!("sweep-{}-{}", axis.label(), kind.name()), &base));
    create_dir(&root)?;
    // Resolve every point first so a bad value fails before any training.
    let configs = axis
        .values()
        .into_iter()
        .map(|v| Ok((args.load(&[(axis.key(), v.clone())])?, v)))
        .collect::<Result<Vec<_>>>()?;
    let bench = make_benchmark(base.benchmark);
    // One teacher serves every point; none of the axes changes its training.
    let source = source_teacher(&base, &bench)?;
    if base.source_checkpoint.is_none() {
        let g = Generator::Diffusion {
            denoiser: source.0.clone(),
            steps: base.ft_sample_steps,
        };
        g.to_checkpoint(
            &base,
            base.pretrain_iterations,
            &[("pipeline", "pretrain-source")],
        )
        .save(&root.join(SOURCE_FILE))?;
    }
    let mut summary = format!(
        "{},w2_to_target,w2_to_source,diversity,coverage,memorization\n",
        axis.label()
    );
    for (config, value) in &configs {
        let dir = root.join(format!("{}-{value}", axis.label()));
        let report = run_into(&dir, "sweep", kind, config, &bench, &source)?;
        let cells = match report {
            Some(r) => format!(
                "{},{},{},{},{}",
                r.w2_to_target, r.w2_to_source, r.diversity, r.coverage, r.memorization
            ),
            None => ",,,,".into(),
        };
        summary.push_str(&format!("{value},{cells}\n"));
        eprintln!("{} = {value}: {}", axis.label(), dir.display());
    }
    write_file(&root, SUMMARY_FILE, summary)?;
    println!("{}", root.display());
    Ok(())
}

pub fn report_text(r: &MetricsReport) -> String {
    format!(
        "w2_to_target = {}\nw2_to_source = {}\ndiversity = {}\ndiversity_degenerate = {}\ncoverage = {}\nmemorization = {}\nn_generated = {}\nn_reference = {}\n",
        r.w2_to_target,
        r.w2_to_source,
        r.diversity,
        r.diversity_degenerate,
        r.coverage,
        r.memorization,
        r.n_generated,
        r.n_reference
    )
}

fn print_report(r: &MetricsReport) {
    print!("{}", report_text(r));
}

fn generator_and_config(path: &Path) -> Result<(Generator, TrainConfig)> {
    let ck = load_checkpoint(path)?;
    let config = ck.config()?;
    Ok((Generator::from_checkpoint(&ck)?, config))
}

fn cmd_eval(checkpoint: &Path, benchmark: Option<&str>, out: Option<&Path>) -> Result<()> {
    let (g, mut config) = generator_and_config(checkpoint)?;
    if let Some(b) = benchmark {
        config.benchmark = b.parse::<BenchmarkName>()?;
    }
    let bench = make_benchmark(config.benchmark);
    let eval = Evaluator::new(&config, &bench, &bench.few_shot(config.shots)?)?;
    let report = eval.evaluate(&g)?;
    print_report(&report);
    if let Some(p) = out {
        std::fs::write(p, report_text(&report))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_plot(checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let (g, config) = generator_and_config(checkpoint)?;
    let bench = make_benchmark(config.benchmark);
    let eval = Evaluator::new(&config, &bench, &bench.few_shot(config.shots)?)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.with_extension("svg"));
    plot_generator(&g, &eval, &bench, &path)?;
    println!("{}", path.display());
    Ok(())
}
