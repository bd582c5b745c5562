use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use udad_cli::manifest::{
    content_hash, CHECKPOINT_FILE, CONFIG_FILE, MANIFEST_FILE, METRICS_FILE, SVG_FILE,
};
use udad_core::training::{parse_metrics_csv, TrainConfig};

const TINY: &str = "\
hidden_width = 16
hidden_layers = 2
timesteps = 100
batch_size = 8
iterations = 12
eval_every = 5
eval_samples = 16
ft_iterations = 6
ft_sample_steps = 5
pretrain_iterations = 20
pretrain_batch_size = 16
";

/// Upper bound on W2 to the source for the default-budget dmd2 student on the
/// close benchmark. That run measures 0.867, against 0.75 for the 25-step DDIM
/// teacher and 0.89 for the source-only student on the distant benchmark.
const DMD2_SOURCE_GATE: f64 = 1.0;

fn udad(args: &[&str], cwd: &Path, root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_udad"))
        .args(args)
        .current_dir(cwd)
        .env("UDAD_OUT_ROOT", root)
        .output()
        .expect("spawn udad")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "udad failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn failure(out: Output) -> String {
    assert!(!out.status.success(), "expected failure");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(
        err.trim_end().lines().count(),
        1,
        "diagnostic should be one line: {err}"
    );
    err
}

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("cwd")).unwrap();
        std::fs::create_dir(dir.path().join("root")).unwrap();
        std::fs::write(dir.path().join("tiny.txt"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn tiny(&self) -> String {
        self.path("tiny.txt").display().to_string()
    }

    fn config_with(&self, name: &str, extra: &str) -> String {
        let p = self.path(name);
        std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
        p.display().to_string()
    }

    fn run(&self, args: &[&str]) -> Output {
        udad(args, &self.path("cwd"), &self.path("root"))
    }
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

fn assert_run_dir(dir: &Path) {
    for f in [
        MANIFEST_FILE,
        CONFIG_FILE,
        METRICS_FILE,
        CHECKPOINT_FILE,
        SVG_FILE,
    ] {
        assert!(dir.join(f).is_file(), "{} lacks {f}", dir.display());
    }
    let config = std::fs::read_to_string(dir.join(CONFIG_FILE)).unwrap();
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(TrainConfig::parse(&config).unwrap().to_text(), config);
    assert!(manifest.contains(&format!("config_sha256 = {}", content_hash(&config))));
    assert!(manifest.ends_with(&config));
    let rows =
        parse_metrics_csv(&std::fs::read_to_string(dir.join(METRICS_FILE)).unwrap()).unwrap();
    assert!(rows.len() >= 2);
    let svg = std::fs::read_to_string(dir.join(SVG_FILE)).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<circle"));
}

#[test]
fn repeated_runs_have_identical_logs() {
    let sb = Sandbox::new();
    let tiny = sb.tiny();
    for d in ["r1", "r2"] {
        let out = sb.path(d).display().to_string();
        let args = [
            "run",
            "--pipeline",
            "unidad",
            "--benchmark",
            "close",
            "--seed",
            "7",
            "--config",
            &tiny,
            "--out",
            &out,
        ];
        ok(sb.run(&args));
    }
    for f in [
        METRICS_FILE,
        CHECKPOINT_FILE,
        "trainer.ckpt",
        SVG_FILE,
        CONFIG_FILE,
    ] {
        assert_eq!(
            std::fs::read(sb.path("r1").join(f)).unwrap(),
            std::fs::read(sb.path("r2").join(f)).unwrap(),
            "{f} differs"
        );
    }
    let cfg =
        TrainConfig::parse(&std::fs::read_to_string(sb.path("r1").join(CONFIG_FILE)).unwrap())
            .unwrap();
    assert_eq!(cfg.seed, 7);
}

#[test]
fn every_pipeline_fills_its_run_directory() {
    let sb = Sandbox::new();
    let tiny = sb.tiny();
    for kind in ["unidad", "ft", "dmd2", "ft_then_dmd2", "dmd2_then_ft"] {
        let out = sb.path(kind).display().to_string();
        ok(sb.run(&["run", "--pipeline", kind, "--config", &tiny, "--out", &out]));
        assert_run_dir(&sb.path(kind));
        let manifest = std::fs::read_to_string(sb.path(kind).join(MANIFEST_FILE)).unwrap();
        assert!(manifest.contains(&format!("pipeline = {kind}")));
        assert!(manifest.contains("wall_seconds = "));
    }
    assert!(sb.path("unidad/trainer.ckpt").is_file());
    assert!(!sb.path("ft/trainer.ckpt").exists());
}

#[test]
fn default_directory_lives_under_the_out_root() {
    let sb = Sandbox::new();
    let stdout = ok(sb.run(&["run", "--pipeline", "ft", "--config", &sb.tiny()]));
    let runs = entries(&sb.path("root"));
    assert_eq!(runs.len(), 1, "{runs:?}");
    assert!(runs[0].starts_with("ft-close-s0-"), "{}", runs[0]);
    assert_run_dir(&sb.path("root").join(&runs[0]));
    assert!(stdout.contains("w2_to_target = "));
    // Nothing is written outside the run directory.
    assert!(entries(&sb.path("cwd")).is_empty());
}

#[test]
fn sweep_over_a_makes_one_directory_per_value() {
    let sb = Sandbox::new();
    let out = sb.path("sweep").display().to_string();
    ok(sb.run(&[
        "sweep",
        "--axis",
        "a",
        "--benchmark",
        "distant",
        "--config",
        &sb.tiny(),
        "--out",
        &out,
    ]));
    let dirs: Vec<String> = entries(&sb.path("sweep"))
        .into_iter()
        .filter(|e| e.starts_with("a-"))
        .collect();
    assert_eq!(dirs, ["a-0", "a-0.25", "a-0.5", "a-0.75", "a-1"]);
    for (d, a) in dirs.iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
        let dir = sb.path("sweep").join(d);
        assert_run_dir(&dir);
        let cfg =
            TrainConfig::parse(&std::fs::read_to_string(dir.join(CONFIG_FILE)).unwrap()).unwrap();
        assert_eq!((cfg.a, cfg.benchmark.name()), (a, "distant"));
    }
    let summary = std::fs::read_to_string(sb.path("sweep/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);
    assert!(sb.path("sweep/source.ckpt").is_file());
}

#[test]
fn checkpoints_chain_between_commands() {
    let sb = Sandbox::new();
    let tiny = sb.tiny();
    let src = sb.path("src").display().to_string();
    ok(sb.run(&["pretrain-source", "--config", &tiny, "--out", &src]));
    assert_run_dir(&sb.path("src"));
    let rows =
        parse_metrics_csv(&std::fs::read_to_string(sb.path("src").join(METRICS_FILE)).unwrap())
            .unwrap();
    assert_eq!(
        rows.iter().map(|r| r.step).collect::<Vec<_>>(),
        [0, 5, 10, 15, 20]
    );

    let src_ck = sb.path("src").join(CHECKPOINT_FILE).display().to_string();
    let with_src = sb.config_with("with_src.txt", &format!("source_checkpoint = {src_ck}\n"));
    let dmd2 = sb.path("dmd2").display().to_string();
    let ft = sb.path("ft").display().to_string();
    ok(sb.run(&[
        "run",
        "--pipeline",
        "dmd2",
        "--config",
        &with_src,
        "--out",
        &dmd2,
    ]));
    ok(sb.run(&[
        "run",
        "--pipeline",
        "ft",
        "--config",
        &with_src,
        "--out",
        &ft,
    ]));
    let manifest = std::fs::read_to_string(sb.path("dmd2").join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains(&format!("source = {src_ck}")));

    // Warm-started unidad from the dmd2 student and the fine-tuned teacher.
    let warm = sb.config_with(
        "warm.txt",
        &format!(
            "source_checkpoint = {src_ck}\nstudent_init = pre-distilled-checkpoint\nstudent_checkpoint = {}\ntarget_mode = frozen-checkpoint\ntarget_checkpoint = {}\n",
            sb.path("dmd2").join(CHECKPOINT_FILE).display(),
            sb.path("ft").join(CHECKPOINT_FILE).display()
        ),
    );
    let out = sb.path("warm").display().to_string();
    ok(sb.run(&[
        "run",
        "--pipeline",
        "unidad",
        "--config",
        &warm,
        "--out",
        &out,
    ]));
    assert_run_dir(&sb.path("warm"));

    let missing = sb.config_with("missing.txt", "student_init = pre-distilled-checkpoint\n");
    let err = failure(sb.run(&["run", "--config", &missing, "--out", &out]));
    assert!(err.contains("student_checkpoint"), "{err}");
}

#[test]
fn eval_and_plot_read_checkpoints() {
    let sb = Sandbox::new();
    let out = sb.path("r").display().to_string();
    let stdout = ok(sb.run(&[
        "run",
        "--pipeline",
        "dmd2",
        "--config",
        &sb.tiny(),
        "--out",
        &out,
    ]));
    let ck = sb.path("r").join(CHECKPOINT_FILE).display().to_string();
    let report = ok(sb.run(&["eval", "--checkpoint", &ck]));
    for key in [
        "w2_to_target",
        "w2_to_source",
        "diversity",
        "coverage",
        "memorization",
        "n_generated = 16",
    ] {
        assert!(report.contains(key), "{report}");
    }
    // The run's final log row is the same evaluation.
    assert!(stdout.starts_with(&report), "{stdout}\n---\n{report}");
    let again = ok(sb.run(&[
        "eval",
        "--checkpoint",
        &ck,
        "--out",
        &sb.path("r/eval.txt").display().to_string(),
    ]));
    assert_eq!(report, again);
    assert_eq!(
        std::fs::read_to_string(sb.path("r/eval.txt")).unwrap(),
        report
    );

    let trainer = sb.path("r/trainer.ckpt").display().to_string();
    assert_eq!(ok(sb.run(&["eval", "--checkpoint", &trainer])), report);

    ok(sb.run(&["plot", "--checkpoint", &ck]));
    let plotted = std::fs::read(sb.path("r/final.svg")).unwrap();
    assert_eq!(plotted, std::fs::read(sb.path("r").join(SVG_FILE)).unwrap());
}

#[test]
fn errors_exit_nonzero_with_one_line() {
    let sb = Sandbox::new();
    let err = failure(sb.run(&["eval", "--checkpoint", "nowhere.ckpt"]));
    assert!(err.contains("nowhere.ckpt"), "{err}");
    failure(sb.run(&["plot", "--checkpoint", "nowhere.ckpt"]));
    failure(sb.run(&["frobnicate"]));
    failure(sb.run(&[]));
    failure(sb.run(&["sweep", "--axis", "depth"]));

    let bad = sb.config_with("bad.txt", "a = 1.5\n");
    let err = failure(sb.run(&["run", "--config", &bad]));
    assert!(
        err.contains("`a`") && err.contains(&format!("line {}", TINY.lines().count() + 1)),
        "{err}"
    );
    let unknown = sb.config_with("unknown.txt", "colour = red\n");
    assert!(failure(sb.run(&["run", "--config", &unknown])).contains("colour"));
    assert!(failure(sb.run(&["run", "--pipeline", "gan", "--config", &sb.tiny()])).contains("gan"));
    assert!(
        failure(sb.run(&["run", "--benchmark", "far", "--config", &sb.tiny()])).contains("far")
    );

    let garbage = sb.path("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    failure(sb.run(&["eval", "--checkpoint", &garbage.display().to_string()]));
    assert!(entries(&sb.path("root")).is_empty());
}

#[test]
fn help_succeeds() {
    let sb = Sandbox::new();
    let out = ok(sb.run(&["--help"]));
    for cmd in ["pretrain-source", "run", "sweep", "eval", "plot"] {
        assert!(out.contains(cmd), "{out}");
    }
}

#[test]
fn default_budget_dmd2_student_stays_near_the_source() {
    let sb = Sandbox::new();
    let out = sb.path("dmd2").display().to_string();
    ok(sb.run(&[
        "run",
        "--pipeline",
        "dmd2",
        "--benchmark",
        "close",
        "--out",
        &out,
    ]));
    let ck = sb.path("dmd2").join(CHECKPOINT_FILE).display().to_string();
    let report = ok(sb.run(&["eval", "--checkpoint", &ck]));
    let w2: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("w2_to_source = "))
        .unwrap()
        .parse()
        .unwrap();
    eprintln!("dmd2 student w2_to_source = {w2}");
    assert!(w2 < DMD2_SOURCE_GATE, "{w2} >= gate {DMD2_SOURCE_GATE}");
}
