use rand::Rng;
use rand_distr::StandardNormal;

use crate::adam::ParamSet;
use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => kernels::relu(x),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => kernels::sigmoid(x),
            Activation::Silu => kernels::silu(x),
        }
    }

    pub fn on_tape(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Identity => v,
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Sigmoid => tape.sigmoid(v),
            Activation::Silu => tape.silu(v),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
            Activation::Silu => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            4 => Activation::Silu,
            _ => return None,
        })
    }
}

/// Affine map `x·W + b` followed by an activation. `weight` is `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn in_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_width(&self) -> usize {
        self.weight.cols()
    }
}

/// Plain feed-forward network.
///
/// The activations of every layer except the last are the network's hidden
/// features; [`MlpNetwork::forward_taps`] exposes them.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpNetwork {
    layers: Vec<Layer>,
}

impl MlpNetwork {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(TensorError::Invalid(
                "network needs at least one layer".into(),
            ));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.numel() != l.out_width() {
                return Err(TensorError::ShapeMismatch {
                    op: "layer",
                    left: l.weight.shape().to_vec(),
                    right: l.bias.shape().to_vec(),
                });
            }
            if i > 0 && layers[i - 1].out_width() != l.in_width() {
                return Err(TensorError::LayerWidth {
                    index: i,
                    expected: l.in_width(),
                    found: layers[i - 1].out_width(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Random network with `N(0, 1/fan_in)` weights and zero biases. The last
    /// layer is linear; all others use `hidden`.
    pub fn init<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(widths, hidden, |fan_in| {
            let s = (1.0 / fan_in as f64).sqrt();
            s * rng.sample::<f64, _>(StandardNormal)
        })
    }

    /// All-zero network with the given layout.
    pub fn zeros(widths: &[usize], hidden: Activation) -> Result<Self> {
        Self::build(widths, hidden, |_| 0.0)
    }

    fn build(
        widths: &[usize],
        hidden: Activation,
        mut draw: impl FnMut(usize) -> f64,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(TensorError::Invalid(format!(
                "need at least two widths, got {widths:?}"
            )));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fi, fo) = (widths[i], widths[i + 1]);
                let w = (0..fi * fo).map(|_| draw(fi)).collect();
                Layer {
                    weight: Tensor::matrix(fi, fo, w).expect("sized above"),
                    bias: Tensor::zeros(&[fo]),
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        hidden
                    },
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].out_width()
    }

    /// Widths of the hidden feature maps, in order.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::out_width)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape().len() != 2 || input.cols() != self.input_width() {
            return Err(TensorError::ShapeMismatch {
                op: "mlp_forward",
                left: input.shape().to_vec(),
                right: vec![self.input_width(), self.output_width()],
            });
        }
        Ok(())
    }

    /// Unrecorded forward pass on `[batch, in]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward_taps(input)?.0)
    }

    /// Unrecorded forward pass that also returns every hidden activation.
    pub fn forward_taps(&self, input: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_input(input)?;
        let n = input.rows();
        let mut h = input.clone();
        let mut taps = Vec::with_capacity(self.layers.len() - 1);
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = kernels::matmul(h.data(), l.weight.data(), n, l.in_width(), l.out_width());
            kernels::add_row_inplace(&mut z, l.bias.data());
            if l.activation != Activation::Identity {
                z.iter_mut().for_each(|v| *v = l.activation.apply(*v));
            }
            h = Tensor::matrix(n, l.out_width(), z)?;
            if i + 1 < self.layers.len() {
                taps.push(h.clone());
            }
        }
        Ok((h, taps))
    }

    /// Places the parameters on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (
                        tape.constant(l.weight.clone()),
                        tape.constant(l.bias.clone()),
                    )
                };
                (w, b, l.activation)
            })
            .collect();
        BoundMlp {
            layers,
            input_width: self.input_width(),
        }
    }
}

impl ParamSet for MlpNetwork {
    fn param_tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }
}

/// A network whose parameters sit on a particular tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var, Activation)>,
    input_width: usize,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_taps(tape, x)?.0)
    }

    pub fn forward_taps(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<Var>)> {
        let xv = tape.value(x);
        if xv.shape().len() != 2 || xv.cols() != self.input_width {
            return Err(TensorError::ShapeMismatch {
                op: "mlp_forward",
                left: xv.shape().to_vec(),
                right: vec![self.input_width],
            });
        }
        let mut h = x;
        let mut taps = Vec::with_capacity(self.layers.len() - 1);
        for (i, &(w, b, act)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = act.on_tape(tape, z);
            if i + 1 < self.layers.len() {
                taps.push(h);
            }
        }
        Ok((h, taps))
    }

    /// Parameter gradients in [`ParamSet`] order, zero where nothing flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|&(w, b, _)| [tape.grad_or_zeros(w), tape.grad_or_zeros(b)])
            .collect()
    }

    pub fn param_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }
}
