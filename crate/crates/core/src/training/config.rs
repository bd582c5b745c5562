use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use udad_tensor::Activation;

use crate::adversarial::{GanFamily, HeadLayout};
use crate::datasets::{BenchmarkName, SHOT_COUNTS};
use crate::diffusion::Architecture;
use crate::distillation::MAX_NFE;
use crate::{Error, Result};

macro_rules! named_enum {
    ($(#[$m:meta])* $ty:ident, $kind:literal, { $($variant:ident => $name:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $ty { $($variant),+ }

        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(Error::UnknownName { kind: $kind, name: s.to_string() }),
                }
            }
        }
    };
}

named_enum!(
    /// How the target teacher is obtained.
    TargetMode, "target mode", {
    Online => "online",
    FrozenCheckpoint => "frozen-checkpoint",
    Disabled => "disabled",
});

named_enum!(StudentInit, "student init", {
    CopyOfSource => "copy-of-source",
    PreDistilled => "pre-distilled-checkpoint",
});

named_enum!(
    /// Where the discriminator's real samples come from.
    GanReals, "gan reals", {
    FewShot => "few-shot",
    Source => "source",
});

named_enum!(PipelineKind, "pipeline", {
    Unidad => "unidad",
    Ft => "ft",
    Dmd2 => "dmd2",
    FtThenDmd2 => "ft_then_dmd2",
    Dmd2ThenFt => "dmd2_then_ft",
});

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Identity => "identity",
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
        Activation::Sigmoid => "sigmoid",
        Activation::Silu => "silu",
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    [
        Activation::Relu,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Silu,
    ]
    .into_iter()
    .find(|a| activation_name(*a) == s)
    .ok_or_else(|| Error::UnknownName {
        kind: "activation",
        name: s.to_string(),
    })
}

/// Every knob of a run. Parsed from and serialized to flat `key = value`
/// text; [`TrainConfig::to_text`] emits every key so the text is the fully
/// resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub benchmark: BenchmarkName,
    pub shots: usize,
    pub seed: u64,
    /// Weight of the target direction.
    pub a: f64,
    pub lambda_g_gan: f64,
    pub lambda_d_gan: f64,
    pub update_ratio: u64,
    pub nfe: usize,
    pub timesteps: usize,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_student: f64,
    pub lr_fake: f64,
    pub lr_disc: f64,
    pub lr_target: f64,
    /// Denoiser pretraining and fine-tuning.
    pub lr_teacher: f64,
    pub gan_family: GanFamily,
    pub disc_heads: HeadLayout,
    pub target_mode: TargetMode,
    pub student_init: StudentInit,
    pub gan_reals: GanReals,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub pretrain_iterations: u64,
    pub pretrain_batch_size: usize,
    pub ft_iterations: u64,
    pub ft_sample_steps: usize,
    pub eval_every: u64,
    pub eval_samples: usize,
    pub coverage_radius: f64,
    pub source_checkpoint: Option<String>,
    pub student_checkpoint: Option<String>,
    pub target_checkpoint: Option<String>,
}

const DEFAULT_LR: f64 = 1e-3;
/// The student sees heavy-tailed DMD gradients; a smaller step keeps the
/// final iterate from jumping between mode weightings.
const DEFAULT_STUDENT_LR: f64 = 1e-4;

/// Default target weight: lower when the target sits on the source support.
pub fn default_a(benchmark: BenchmarkName) -> f64 {
    match benchmark {
        BenchmarkName::Close => 0.25,
        BenchmarkName::Distant => 0.75,
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_benchmark(BenchmarkName::Close)
    }
}

const KEYS: &[&str] = &[
    "benchmark",
    "shots",
    "seed",
    "a",
    "lambda_g_gan",
    "lambda_d_gan",
    "update_ratio",
    "nfe",
    "timesteps",
    "iterations",
    "batch_size",
    "lr",
    "lr_student",
    "lr_fake",
    "lr_disc",
    "lr_target",
    "lr_teacher",
    "gan_family",
    "disc_heads",
    "target_mode",
    "student_init",
    "gan_reals",
    "hidden_width",
    "hidden_layers",
    "activation",
    "pretrain_iterations",
    "pretrain_batch_size",
    "ft_iterations",
    "ft_sample_steps",
    "eval_every",
    "eval_samples",
    "coverage_radius",
    "source_checkpoint",
    "student_checkpoint",
    "target_checkpoint",
];

impl TrainConfig {
    pub fn for_benchmark(benchmark: BenchmarkName) -> Self {
        Self {
            benchmark,
            shots: 10,
            seed: 0,
            a: default_a(benchmark),
            lambda_g_gan: 0.01,
            lambda_d_gan: 0.03,
            update_ratio: 5,
            nfe: 3,
            timesteps: 1000,
            iterations: 20_000,
            batch_size: 64,
            lr_student: DEFAULT_STUDENT_LR,
            lr_fake: DEFAULT_LR,
            lr_disc: DEFAULT_LR,
            lr_target: DEFAULT_LR,
            lr_teacher: DEFAULT_LR,
            gan_family: GanFamily::Bce,
            disc_heads: HeadLayout::Multi,
            target_mode: TargetMode::Online,
            student_init: StudentInit::CopyOfSource,
            gan_reals: GanReals::FewShot,
            hidden_width: 64,
            hidden_layers: 3,
            activation: Activation::Relu,
            pretrain_iterations: 20_000,
            pretrain_batch_size: 256,
            ft_iterations: 2_000,
            ft_sample_steps: 25,
            eval_every: 2_000,
            eval_samples: 512,
            coverage_radius: 0.9,
            source_checkpoint: None,
            student_checkpoint: None,
            target_checkpoint: None,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            data_dim: 2,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            activation: self.activation,
        }
    }

    /// The weight actually applied: zero whenever there is no target teacher.
    pub fn effective_a(&self) -> f64 {
        if self.target_mode == TargetMode::Disabled {
            0.0
        } else {
            self.a
        }
    }

    /// First violated constraint as `(key, message)`.
    pub fn violation(&self) -> Option<(&'static str, String)> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let checks: [(&'static str, bool, String); 18] = [
            (
                "a",
                (0.0..=1.0).contains(&self.a),
                format!("{} outside [0, 1]", self.a),
            ),
            (
                "lambda_g_gan",
                self.lambda_g_gan >= 0.0 && self.lambda_g_gan.is_finite(),
                "must be >= 0".into(),
            ),
            (
                "lambda_d_gan",
                self.lambda_d_gan >= 0.0 && self.lambda_d_gan.is_finite(),
                "must be >= 0".into(),
            ),
            (
                "update_ratio",
                self.update_ratio >= 1,
                "must be >= 1".into(),
            ),
            (
                "nfe",
                (1..=MAX_NFE).contains(&self.nfe),
                format!("must be in 1..={MAX_NFE}"),
            ),
            ("timesteps", self.timesteps >= 50, "must be >= 50".into()),
            ("batch_size", self.batch_size >= 1, "must be >= 1".into()),
            (
                "shots",
                SHOT_COUNTS.contains(&self.shots),
                format!("must be one of {SHOT_COUNTS:?}"),
            ),
            (
                "lr_student",
                positive(self.lr_student),
                "must be > 0".into(),
            ),
            ("lr_fake", positive(self.lr_fake), "must be > 0".into()),
            ("lr_disc", positive(self.lr_disc), "must be > 0".into()),
            ("lr_target", positive(self.lr_target), "must be > 0".into()),
            (
                "lr_teacher",
                positive(self.lr_teacher),
                "must be > 0".into(),
            ),
            (
                "hidden_width",
                self.hidden_width >= 1 && self.hidden_layers >= 1,
                "must be >= 1".into(),
            ),
            (
                "pretrain_batch_size",
                self.pretrain_batch_size >= 1,
                "must be >= 1".into(),
            ),
            (
                "ft_sample_steps",
                (1..=self.timesteps).contains(&self.ft_sample_steps),
                "must be in 1..=timesteps".into(),
            ),
            (
                "eval_every",
                self.eval_every >= 1 && self.eval_samples >= 2,
                "must be >= 1".into(),
            ),
            (
                "coverage_radius",
                positive(self.coverage_radius),
                "must be > 0".into(),
            ),
        ];
        checks
            .into_iter()
            .find(|(_, ok, _)| !ok)
            .map(|(k, _, m)| (k, m))
    }

    pub fn validate(&self) -> Result<()> {
        match self.violation() {
            Some((key, message)) => Err(Error::Config {
                key: key.to_string(),
                line: 0,
                message,
            }),
            None => Ok(()),
        }
    }

    /// Every key in a fixed order, one per line.
    pub fn to_text(&self) -> String {
        let opt = |o: &Option<String>| o.clone().unwrap_or_default();
        let pairs: Vec<(&str, String)> = vec![
            ("benchmark", self.benchmark.to_string()),
            ("shots", self.shots.to_string()),
            ("seed", self.seed.to_string()),
            ("a", self.a.to_string()),
            ("lambda_g_gan", self.lambda_g_gan.to_string()),
            ("lambda_d_gan", self.lambda_d_gan.to_string()),
            ("update_ratio", self.update_ratio.to_string()),
            ("nfe", self.nfe.to_string()),
            ("timesteps", self.timesteps.to_string()),
            ("iterations", self.iterations.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_student", self.lr_student.to_string()),
            ("lr_fake", self.lr_fake.to_string()),
            ("lr_disc", self.lr_disc.to_string()),
            ("lr_target", self.lr_target.to_string()),
            ("lr_teacher", self.lr_teacher.to_string()),
            ("gan_family", self.gan_family.to_string()),
            ("disc_heads", self.disc_heads.to_string()),
            ("target_mode", self.target_mode.to_string()),
            ("student_init", self.student_init.to_string()),
            ("gan_reals", self.gan_reals.to_string()),
            ("hidden_width", self.hidden_width.to_string()),
            ("hidden_layers", self.hidden_layers.to_string()),
            ("activation", activation_name(self.activation).to_string()),
            ("pretrain_iterations", self.pretrain_iterations.to_string()),
            ("pretrain_batch_size", self.pretrain_batch_size.to_string()),
            ("ft_iterations", self.ft_iterations.to_string()),
            ("ft_sample_steps", self.ft_sample_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_samples", self.eval_samples.to_string()),
            ("coverage_radius", self.coverage_radius.to_string()),
            ("source_checkpoint", opt(&self.source_checkpoint)),
            ("student_checkpoint", opt(&self.student_checkpoint)),
            ("target_checkpoint", opt(&self.target_checkpoint)),
        ];
        pairs
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses `key = value` lines; `#` starts a comment line. Omitted keys
    /// take their defaults (`a` defaults per benchmark; `lr` sets every
    /// learning rate not given explicitly).
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: HashMap<&str, (usize, &str)> = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(Error::Config {
                    key: trimmed.to_string(),
                    line,
                    message: "expected `key = value`".into(),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            let Some(&key) = KEYS.iter().find(|&&known| known == k) else {
                return Err(Error::Config {
                    key: k.to_string(),
                    line,
                    message: "unknown key".into(),
                });
            };
            if let Some((first, _)) = entries.insert(key, (line, v)) {
                return Err(Error::Config {
                    key: k.to_string(),
                    line,
                    message: format!("duplicate of line {first}"),
                });
            }
        }

        let err = |key: &str, message: String| {
            let line = entries.get(key).map_or(0, |e| e.0);
            Error::Config {
                key: key.to_string(),
                line,
                message,
            }
        };
        fn get<T: FromStr>(
            entries: &HashMap<&str, (usize, &str)>,
            key: &str,
            default: T,
        ) -> std::result::Result<T, (String, String)>
        where
            T::Err: fmt::Display,
        {
            match entries.get(key) {
                None => Ok(default),
                Some((_, v)) => v
                    .parse::<T>()
                    .map_err(|e| (key.to_string(), format!("cannot parse `{v}`: {e}"))),
            }
        }
        let lift = |r: (String, String)| err(&r.0, r.1);

        let benchmark: BenchmarkName =
            get(&entries, "benchmark", BenchmarkName::Close).map_err(lift)?;
        let d = Self::for_benchmark(benchmark);
        let shared: Option<f64> = match entries.contains_key("lr") {
            true => Some(get(&entries, "lr", DEFAULT_LR).map_err(lift)?),
            false => None,
        };
        let lr = shared.unwrap_or(DEFAULT_LR);
        let activation = match entries.get("activation") {
            None => d.activation,
            Some((_, v)) => parse_activation(v).map_err(|e| err("activation", e.to_string()))?,
        };
        let path = |key: &str| {
            entries
                .get(key)
                .map(|(_, v)| v.to_string())
                .filter(|v| !v.is_empty())
        };

        let cfg = Self {
            benchmark,
            shots: get(&entries, "shots", d.shots).map_err(lift)?,
            seed: get(&entries, "seed", d.seed).map_err(lift)?,
            a: get(&entries, "a", d.a).map_err(lift)?,
            lambda_g_gan: get(&entries, "lambda_g_gan", d.lambda_g_gan).map_err(lift)?,
            lambda_d_gan: get(&entries, "lambda_d_gan", d.lambda_d_gan).map_err(lift)?,
            update_ratio: get(&entries, "update_ratio", d.update_ratio).map_err(lift)?,
            nfe: get(&entries, "nfe", d.nfe).map_err(lift)?,
            timesteps: get(&entries, "timesteps", d.timesteps).map_err(lift)?,
            iterations: get(&entries, "iterations", d.iterations).map_err(lift)?,
            batch_size: get(&entries, "batch_size", d.batch_size).map_err(lift)?,
            lr_student: get(&entries, "lr_student", shared.unwrap_or(DEFAULT_STUDENT_LR))
                .map_err(lift)?,
            lr_fake: get(&entries, "lr_fake", lr).map_err(lift)?,
            lr_disc: get(&entries, "lr_disc", lr).map_err(lift)?,
            lr_target: get(&entries, "lr_target", lr).map_err(lift)?,
            lr_teacher: get(&entries, "lr_teacher", lr).map_err(lift)?,
            gan_family: get(&entries, "gan_family", d.gan_family).map_err(lift)?,
            disc_heads: get(&entries, "disc_heads", d.disc_heads).map_err(lift)?,
            target_mode: get(&entries, "target_mode", d.target_mode).map_err(lift)?,
            student_init: get(&entries, "student_init", d.student_init).map_err(lift)?,
            gan_reals: get(&entries, "gan_reals", d.gan_reals).map_err(lift)?,
            hidden_width: get(&entries, "hidden_width", d.hidden_width).map_err(lift)?,
            hidden_layers: get(&entries, "hidden_layers", d.hidden_layers).map_err(lift)?,
            activation,
            pretrain_iterations: get(&entries, "pretrain_iterations", d.pretrain_iterations)
                .map_err(lift)?,
            pretrain_batch_size: get(&entries, "pretrain_batch_size", d.pretrain_batch_size)
                .map_err(lift)?,
            ft_iterations: get(&entries, "ft_iterations", d.ft_iterations).map_err(lift)?,
            ft_sample_steps: get(&entries, "ft_sample_steps", d.ft_sample_steps).map_err(lift)?,
            eval_every: get(&entries, "eval_every", d.eval_every).map_err(lift)?,
            eval_samples: get(&entries, "eval_samples", d.eval_samples).map_err(lift)?,
            coverage_radius: get(&entries, "coverage_radius", d.coverage_radius).map_err(lift)?,
            source_checkpoint: path("source_checkpoint"),
            student_checkpoint: path("student_checkpoint"),
            target_checkpoint: path("target_checkpoint"),
        };
        if let Some((key, message)) = cfg.violation() {
            return Err(err(key, message));
        }
        Ok(cfg.resolved())
    }

    /// Applies the forced settings: no target teacher means `a = 0`.
    pub fn resolved(mut self) -> Self {
        self.a = self.effective_a();
        self
    }
}
