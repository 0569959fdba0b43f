use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub(crate) fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }
}

/// Affine layer `x @ weight + bias` with `weight: [in, out]`, `bias: [1, out]`.
/// Leaf factory: trainable vars or constants.
pub(crate) fn leaf_binder<'t>(tape: &'t Tape, trainable: bool) -> impl FnMut(&Tensor) -> Var<'t> {
    move |t: &Tensor| {
        if trainable {
            tape.var(t.clone())
        } else {
            tape.constant(t.clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::invalid(format!(
                "zero-width layer {fan_in} -> {fan_out}"
            )));
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: rng.uniform_tensor(&[fan_in, fan_out], -bound, bound),
            bias: Tensor::zeros(&[1, fan_out]),
        })
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundLinear<'t> {
        self.bind_with(&mut leaf_binder(tape, trainable))
    }

    /// Binds with caller-made leaves, requested in parameter order.
    pub fn bind_with<'t>(&self, leaf: &mut dyn FnMut(&Tensor) -> Var<'t>) -> BoundLinear<'t> {
        BoundLinear {
            weight: leaf(&self.weight),
            bias: leaf(&self.bias),
        }
    }

    pub(crate) fn collect<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub(crate) fn collect(&self, out: &mut Vec<Var<'t>>) {
        out.push(self.weight);
        out.push(self.bias);
    }
}

/// Multilayer perceptron. The activation follows every hidden layer, and the
/// output layer too when `activate_output` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub activate_output: bool,
}

impl Mlp {
    /// `sizes` lists every width from input to output.
    pub fn init(
        sizes: &[usize],
        activation: Activation,
        activate_output: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output widths"));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            activation,
            activate_output,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.shape()[1])
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        self.bind_with(&mut leaf_binder(tape, trainable))
    }

    pub fn bind_with<'t>(&self, leaf: &mut dyn FnMut(&Tensor) -> Var<'t>) -> BoundMlp<'t> {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind_with(leaf)).collect(),
            activation: self.activation,
            activate_output: self.activate_output,
        }
    }

    pub(crate) fn collect<'a>(&'a self, out: &mut Vec<&'a Tensor>) {
        self.layers.iter().for_each(|l| l.collect(out));
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.layers.iter_mut().for_each(|l| l.collect_mut(out));
    }
}

pub struct BoundMlp<'t> {
    layers: Vec<BoundLinear<'t>>,
    activation: Activation,
    activate_output: bool,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(h)?;
            if i < last || self.activate_output {
                h = self.activation.apply(h);
            }
        }
        Ok(h)
    }

    /// Forward pass that also returns the last hidden representation (the
    /// input to the output layer).
    pub fn forward_with_penultimate(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for layer in &self.layers[..last] {
            h = self.activation.apply(layer.forward(h)?);
        }
        let mut out = self.layers[last].forward(h)?;
        if self.activate_output {
            out = self.activation.apply(out);
        }
        Ok((out, h))
    }

    pub(crate) fn collect(&self, out: &mut Vec<Var<'t>>) {
        self.layers.iter().for_each(|l| l.collect(out));
    }
}
