//! Binary checkpoints: `"UDAD"`, a u16 version, the step counter, string
//! metadata, model blocks, optimizer blocks and the RNG seed. All integers
//! and reals are little-endian.

use std::path::Path;

use udad_tensor::{Activation, AdamConfig, AdamState, Layer, MlpNetwork, RngStreams, Tensor};

use super::config::{TargetMode, TrainConfig};
use super::log::{metrics_csv, parse_metrics_csv, LossSnapshot};
use super::trainer::{Models, Optimizers, TrainerState};
use crate::adversarial::MultiHeadDiscriminator;
use crate::diffusion::{Denoiser, NoiseSchedule, Role};
use crate::distillation::StudentGenerator;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UDAD";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub metadata: Vec<(String, String)>,
    pub models: Vec<(String, MlpNetwork)>,
    pub optimizers: Vec<(String, AdamState)>,
    pub rng_seed: u64,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn reals(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("string is not UTF-8"))
    }
    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u16(VERSION);
        w.u64(self.step);
        w.u32(self.metadata.len());
        for (k, v) in &self.metadata {
            w.str(k);
            w.str(v);
        }
        w.u32(self.models.len());
        for (name, net) in &self.models {
            w.str(name);
            w.u32(net.layers().len());
            for l in net.layers() {
                w.u8(l.activation.tag());
                w.u32(l.in_width());
                w.u32(l.out_width());
                w.reals(l.weight.data());
                w.reals(l.bias.data());
            }
        }
        w.u32(self.optimizers.len());
        for (name, st) in &self.optimizers {
            w.str(name);
            let c = st.config;
            w.reals(&[c.lr, c.beta1, c.beta2, c.eps]);
            w.u64(st.step_count());
            w.u64(st.len() as u64);
            w.reals(st.first_moment());
            w.reals(st.second_moment());
        }
        w.u64(self.rng_seed);
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).map_err(|_| corrupt("missing magic bytes"))? != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(corrupt(format!(
                "format version {version}, expected {VERSION}"
            )));
        }
        let step = r.u64()?;
        let n_meta = r.u32()?;
        let mut metadata = Vec::new();
        for _ in 0..n_meta {
            metadata.push((r.str()?, r.str()?));
        }
        let n_models = r.u32()?;
        let mut models = Vec::new();
        for _ in 0..n_models {
            let name = r.str()?;
            let n_layers = r.u32()?;
            let mut layers = Vec::new();
            for _ in 0..n_layers {
                let tag = r.u8()?;
                let activation = Activation::from_tag(tag)
                    .ok_or_else(|| corrupt(format!("model {name}: activation tag {tag}")))?;
                let (i, o) = (r.u32()?, r.u32()?);
                let weight = Tensor::matrix(i, o, r.reals(i * o)?)?;
                let bias = Tensor::vector(r.reals(o)?);
                layers.push(Layer {
                    weight,
                    bias,
                    activation,
                });
            }
            let net = MlpNetwork::new(layers).map_err(|e| corrupt(format!("model {name}: {e}")))?;
            models.push((name, net));
        }
        let n_opt = r.u32()?;
        let mut optimizers = Vec::new();
        for _ in 0..n_opt {
            let name = r.str()?;
            let c = r.reals(4)?;
            let config = AdamConfig {
                lr: c[0],
                beta1: c[1],
                beta2: c[2],
                eps: c[3],
            };
            let step = r.u64()?;
            let len = r.u64()? as usize;
            let m = r.reals(len)?;
            let v = r.reals(len)?;
            optimizers.push((name, AdamState::from_parts(config, step, m, v)?));
        }
        let rng_seed = r.u64()?;
        if r.pos != buf.len() {
            return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            step,
            metadata,
            models,
            optimizers,
            rng_seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn model(&self, name: &str) -> Option<&MlpNetwork> {
        self.models.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn optimizer(&self, name: &str) -> Option<&AdamState> {
        self.optimizers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, o)| o)
    }

    fn require_model(&self, name: &str) -> Result<&MlpNetwork> {
        self.model(name)
            .ok_or_else(|| corrupt(format!("no model `{name}`")))
    }

    fn require_optimizer(&self, name: &str) -> Result<&AdamState> {
        self.optimizer(name)
            .ok_or_else(|| corrupt(format!("no optimizer `{name}`")))
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::parse(self.meta("config").ok_or_else(|| corrupt("no config"))?)
    }

    pub fn denoiser(&self, name: &str, role: Role, horizon: usize) -> Result<Denoiser> {
        Denoiser::new(self.require_model(name)?.clone(), role, horizon)
    }

    pub fn student(&self, schedule: &NoiseSchedule, nfe: usize) -> Result<StudentGenerator> {
        StudentGenerator::new(self.require_model("student")?.clone(), schedule, nfe)
    }
}

/// A checkpoint holding one denoiser under `name`.
pub fn denoiser_checkpoint(
    name: &str,
    den: &Denoiser,
    config: &TrainConfig,
    step: u64,
    extra: &[(&str, &str)],
) -> Checkpoint {
    let mut metadata = vec![("config".to_string(), config.to_text())];
    metadata.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    Checkpoint {
        step,
        metadata,
        models: vec![(name.to_string(), den.net().clone())],
        optimizers: Vec::new(),
        rng_seed: config.seed,
    }
}

fn same_shapes(name: &str, expected: &MlpNetwork, found: &MlpNetwork) -> Result<()> {
    let shape = |n: &MlpNetwork| -> Vec<(usize, usize, u8)> {
        n.layers()
            .iter()
            .map(|l| (l.in_width(), l.out_width(), l.activation.tag()))
            .collect()
    };
    if shape(expected) != shape(found) {
        return Err(corrupt(format!(
            "model {name}: layer shapes {:?} do not match expected {:?}",
            shape(found),
            shape(expected)
        )));
    }
    Ok(())
}

fn encode_losses(l: &LossSnapshot) -> String {
    l.as_array()
        .iter()
        .map(|v| {
            v.map(|x| format!("{:016x}", x.to_bits()))
                .unwrap_or_default()
        })
        .collect::<Vec<_>>()
        .join(",")
}

fn decode_losses(s: &str) -> Result<LossSnapshot> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 6 {
        return Err(corrupt("loss block"));
    }
    let mut out = [None; 6];
    for (o, p) in out.iter_mut().zip(parts) {
        if !p.is_empty() {
            let bits = u64::from_str_radix(p, 16).map_err(|_| corrupt("loss block"))?;
            *o = Some(f64::from_bits(bits));
        }
    }
    Ok(LossSnapshot::from_array(out))
}

impl TrainerState {
    pub fn to_checkpoint(&self, extra: &[(&str, &str)]) -> Checkpoint {
        let m = &self.models;
        let mut models = vec![
            ("student".to_string(), m.student.net().clone()),
            ("source".to_string(), m.source.net().clone()),
            ("fake".to_string(), m.fake.net().clone()),
        ];
        if let Some(t) = &m.target {
            models.push(("target".to_string(), t.net().clone()));
        }
        for (b, h) in m.disc.heads().iter().enumerate() {
            models.push((format!("disc.head{b}"), h.clone()));
        }
        let mut optimizers = vec![
            ("student".to_string(), self.optim.student.clone()),
            ("fake".to_string(), self.optim.fake.clone()),
            ("disc".to_string(), self.optim.disc.clone()),
        ];
        if let Some(t) = &self.optim.target {
            optimizers.push(("target".to_string(), t.clone()));
        }
        let mut metadata = vec![
            ("config".to_string(), self.config.to_text()),
            ("generator".to_string(), "student".to_string()),
            ("disc.taps".to_string(), format!("{:?}", m.disc.taps())),
            ("losses".to_string(), encode_losses(&self.last)),
            ("log".to_string(), metrics_csv(&self.log)),
        ];
        metadata.extend(extra.iter().map(|(k, v)| (k.to_string(), v.to_string())));
        Checkpoint {
            step: self.step,
            metadata,
            models,
            optimizers,
            rng_seed: self.streams.seed(),
        }
    }

    /// Rebuilds a trainer; every block is checked against the layout a fresh
    /// trainer with the stored config would have, so a mismatched file is
    /// rejected before anything is returned.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck.config()?;
        let schedule = NoiseSchedule::linear(config.timesteps)?;
        let source = ck.denoiser("source", Role::Source, config.timesteps)?;
        same_shapes(
            "source",
            &source.net().clone(),
            &MlpNetwork::zeros(&config.architecture().widths(), config.activation)?,
        )?;
        let get = |name: &str| -> Result<MlpNetwork> {
            let net = ck.require_model(name)?.clone();
            same_shapes(name, source.net(), &net)?;
            Ok(net)
        };
        let student = StudentGenerator::new(get("student")?, &schedule, config.nfe)?;
        let fake = Denoiser::new(get("fake")?, Role::Fake, config.timesteps)?;
        let target = match config.target_mode {
            TargetMode::Disabled => None,
            _ => Some(Denoiser::new(
                get("target")?,
                Role::Target,
                config.timesteps,
            )?),
        };
        let mut template = MultiHeadDiscriminator::for_denoiser(
            &fake,
            config.disc_heads,
            &mut RngStreams::new(0).stream("x", 0),
        )?;
        for (b, h) in template.heads_mut().iter_mut().enumerate() {
            let name = format!("disc.head{b}");
            let net = ck.require_model(&name)?.clone();
            same_shapes(&name, h, &net)?;
            *h = net;
        }
        let disc = template;
        let opt = |name: &str, len: usize| -> Result<AdamState> {
            let o = ck.require_optimizer(name)?.clone();
            if o.len() != len {
                return Err(corrupt(format!(
                    "optimizer {name}: {} moments for {len} parameters",
                    o.len()
                )));
            }
            Ok(o)
        };
        use udad_tensor::ParamSet;
        let optim = Optimizers {
            student: opt("student", student.net().param_len())?,
            fake: opt("fake", fake.net().param_len())?,
            disc: opt("disc", disc.param_len())?,
            target: match (config.target_mode, &target) {
                (TargetMode::Online, Some(t)) => Some(opt("target", t.net().param_len())?),
                _ => None,
            },
        };
        let last = decode_losses(ck.meta("losses").ok_or_else(|| corrupt("no loss block"))?)?;
        let log = parse_metrics_csv(ck.meta("log").ok_or_else(|| corrupt("no log block"))?)?;
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
            step: ck.step,
            streams: RngStreams::new(ck.rng_seed),
            last,
            log,
        })
    }
}
