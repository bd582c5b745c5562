//! Discriminator heads on the fake teacher's hidden layers and the GAN loss
//! families.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use udad_tensor::{Activation, BoundMlp, MlpNetwork, ParamSet, Tape, Tensor, Var};

use crate::diffusion::Denoiser;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GanFamily {
    Hinge,
    Bce,
    Lsgan,
    Wgan,
}

impl GanFamily {
    pub const ALL: [GanFamily; 4] = [
        GanFamily::Hinge,
        GanFamily::Bce,
        GanFamily::Lsgan,
        GanFamily::Wgan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GanFamily::Hinge => "hinge",
            GanFamily::Bce => "bce",
            GanFamily::Lsgan => "lsgan",
            GanFamily::Wgan => "wgan",
        }
    }
}

impl fmt::Display for GanFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GanFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "gan family",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadLayout {
    /// One linear head per hidden layer.
    Multi,
    /// One two-layer head on the last hidden layer.
    Single,
}

impl HeadLayout {
    pub fn name(self) -> &'static str {
        match self {
            HeadLayout::Multi => "multi",
            HeadLayout::Single => "single",
        }
    }
}

impl fmt::Display for HeadLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(HeadLayout::Multi),
            "single" => Ok(HeadLayout::Single),
            _ => Err(Error::UnknownName {
                kind: "head layout",
                name: s.to_string(),
            }),
        }
    }
}

/// Heads reading hidden activations of the fake teacher. `taps[b]` is the
/// hidden-layer index read by `heads[b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadDiscriminator {
    layout: HeadLayout,
    taps: Vec<usize>,
    heads: Vec<MlpNetwork>,
}

impl MultiHeadDiscriminator {
    pub fn new(layout: HeadLayout, taps: Vec<usize>, heads: Vec<MlpNetwork>) -> Result<Self> {
        if taps.is_empty() || taps.len() != heads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} taps for {} heads",
                taps.len(),
                heads.len()
            )));
        }
        if let Some(h) = heads.iter().find(|h| h.output_width() != 1) {
            return Err(Error::InvalidArgument(format!(
                "head emits {} logits",
                h.output_width()
            )));
        }
        Ok(Self {
            layout,
            taps,
            heads,
        })
    }

    /// Heads sized for the hidden widths of `fake`.
    pub fn for_denoiser<R: Rng + ?Sized>(
        fake: &Denoiser,
        layout: HeadLayout,
        rng: &mut R,
    ) -> Result<Self> {
        let widths = fake.net().hidden_widths();
        if widths.is_empty() {
            return Err(Error::InvalidArgument(
                "fake teacher has no hidden layers".into(),
            ));
        }
        match layout {
            HeadLayout::Multi => {
                let heads = widths
                    .iter()
                    .map(|&w| MlpNetwork::init(&[w, 1], Activation::Identity, rng))
                    .collect::<std::result::Result<_, _>>()?;
                Self::new(layout, (0..widths.len()).collect(), heads)
            }
            HeadLayout::Single => {
                let last = widths.len() - 1;
                let w = widths[last];
                let head = MlpNetwork::init(&[w, w, 1], Activation::Relu, rng)?;
                Self::new(layout, vec![last], vec![head])
            }
        }
    }

    pub fn layout(&self) -> HeadLayout {
        self.layout
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn heads(&self) -> &[MlpNetwork] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [MlpNetwork] {
        &mut self.heads
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    fn tap<'a, T>(&self, b: usize, features: &'a [T]) -> Result<&'a T> {
        features.get(self.taps[b]).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "tap {} out of range for {} hidden layers",
                self.taps[b],
                features.len()
            ))
        })
    }

    /// One `[batch, 1]` logit tensor per head from precomputed activations.
    pub fn logits_from_taps(&self, features: &[Tensor]) -> Result<Vec<Tensor>> {
        (0..self.heads.len())
            .map(|b| Ok(self.heads[b].forward(self.tap(b, features)?)?))
            .collect()
    }

    pub fn extract_logits(
        &self,
        fake: &Denoiser,
        x_t: &Tensor,
        ts: &[usize],
    ) -> Result<Vec<Tensor>> {
        let (_, features) = fake.predict_taps(x_t, ts)?;
        self.logits_from_taps(&features)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDiscriminator {
        BoundDiscriminator {
            taps: self.taps.clone(),
            heads: self.heads.iter().map(|h| h.bind(tape, trainable)).collect(),
        }
    }
}

impl ParamSet for MultiHeadDiscriminator {
    fn param_tensors(&self) -> Vec<&Tensor> {
        self.heads.iter().flat_map(|h| h.param_tensors()).collect()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.heads
            .iter_mut()
            .flat_map(|h| h.param_tensors_mut())
            .collect()
    }

    fn param_names(&self) -> Vec<String> {
        self.heads
            .iter()
            .enumerate()
            .flat_map(|(b, h)| {
                h.param_names()
                    .into_iter()
                    .map(move |n| format!("head{b}.{n}"))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BoundDiscriminator {
    taps: Vec<usize>,
    heads: Vec<BoundMlp>,
}

impl BoundDiscriminator {
    pub fn logits(&self, tape: &mut Tape, features: &[Var]) -> Result<Vec<Var>> {
        self.taps
            .iter()
            .zip(&self.heads)
            .map(|(&tap, head)| {
                let f = *features.get(tap).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "tap {tap} out of range for {} hidden layers",
                        features.len()
                    ))
                })?;
                Ok(head.forward(tape, f)?)
            })
            .collect()
    }

    /// In [`ParamSet`] order of the discriminator.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.heads.iter().flat_map(|h| h.grads(tape)).collect()
    }
}

fn batch_mean(tape: &mut Tape, v: Var) -> Var {
    tape.mean(v)
}

fn sum_heads(tape: &mut Tape, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::InvalidArgument("no discriminator heads".into()))?;
    for t in it {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn real_term(tape: &mut Tape, family: GanFamily, h: Var) -> Var {
    let v = match family {
        GanFamily::Hinge => {
            let m = tape.neg(h);
            let m = tape.add_scalar(m, 1.0);
            tape.relu(m)
        }
        GanFamily::Bce => {
            let m = tape.neg(h);
            tape.softplus(m)
        }
        GanFamily::Lsgan => {
            let m = tape.add_scalar(h, -1.0);
            let mean_sq = tape.squared_norm(m);
            let n = tape.value(h).numel() as f64;
            return tape.scale(mean_sq, 1.0 / n);
        }
        GanFamily::Wgan => tape.neg(h),
    };
    batch_mean(tape, v)
}

fn fake_term(tape: &mut Tape, family: GanFamily, h: Var) -> Var {
    let v = match family {
        GanFamily::Hinge => {
            let m = tape.add_scalar(h, 1.0);
            tape.relu(m)
        }
        GanFamily::Bce => tape.softplus(h),
        GanFamily::Lsgan => {
            let sq = tape.squared_norm(h);
            let n = tape.value(h).numel() as f64;
            return tape.scale(sq, 1.0 / n);
        }
        GanFamily::Wgan => h,
    };
    batch_mean(tape, v)
}

fn generator_term(tape: &mut Tape, family: GanFamily, h: Var) -> Var {
    match family {
        GanFamily::Hinge | GanFamily::Wgan => {
            let m = tape.mean(h);
            tape.neg(m)
        }
        // non-saturating
        GanFamily::Bce => real_term(tape, GanFamily::Bce, h),
        GanFamily::Lsgan => real_term(tape, GanFamily::Lsgan, h),
    }
}

/// Discriminator loss summed over heads.
pub fn gan_d_loss(tape: &mut Tape, family: GanFamily, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::InvalidArgument(format!(
            "{} real heads vs {} fake heads",
            real.len(),
            fake.len()
        )));
    }
    let mut terms = Vec::with_capacity(2 * real.len());
    for (&r, &f) in real.iter().zip(fake) {
        terms.push(real_term(tape, family, r));
        terms.push(fake_term(tape, family, f));
    }
    sum_heads(tape, terms)
}

/// Generator loss summed over heads.
pub fn gan_g_loss(tape: &mut Tape, family: GanFamily, fake: &[Var]) -> Result<Var> {
    let terms = fake
        .iter()
        .map(|&f| generator_term(tape, family, f))
        .collect();
    sum_heads(tape, terms)
}

fn on_inference_tape(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::inference();
    let v = build(&mut tape)?;
    Ok(tape.value(v).item()?)
}

/// [`gan_d_loss`] on plain logits.
pub fn gan_d_loss_value(family: GanFamily, real: &[Tensor], fake: &[Tensor]) -> Result<f64> {
    on_inference_tape(|t| {
        let r: Vec<Var> = real.iter().map(|x| t.constant(x.clone())).collect();
        let f: Vec<Var> = fake.iter().map(|x| t.constant(x.clone())).collect();
        gan_d_loss(t, family, &r, &f)
    })
}

/// [`gan_g_loss`] on plain logits.
pub fn gan_g_loss_value(family: GanFamily, fake: &[Tensor]) -> Result<f64> {
    on_inference_tape(|t| {
        let f: Vec<Var> = fake.iter().map(|x| t.constant(x.clone())).collect();
        gan_g_loss(t, family, &f)
    })
}
