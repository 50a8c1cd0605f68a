//! Network building blocks on top of [`crate::diffmath`].

use rand::Rng;

use crate::diffmath::{Module, Parameter, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Negative-side slope of every leaky rectifier in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::LeakyRelu => x.leaky_relu(LEAKY_SLOPE),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

fn uniform_init<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Fully connected layer, `x: (N, in) -> (N, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                uniform_init(vec![input, output], input, rng),
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                uniform_init(vec![output], input, rng),
            ),
        }
    }

    pub fn zeroed(name: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: Parameter::new(format!("{name}.weight"), Tensor::zeros(vec![input, output])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![output])),
        }
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        x.matmul(&tape.param(&self.weight))?
            .add(&tape.param(&self.bias))
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

fn add_channel_bias<'t>(y: Var<'t>, bias: &Parameter) -> Result<Var<'t>> {
    let c = bias.value.len();
    let b = y.tape().param(bias).reshape(vec![c, 1, 1])?;
    y.add(&b)
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = input * kernel * kernel;
        Conv2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                uniform_init(vec![output, input, kernel, kernel], fan_in, rng),
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                uniform_init(vec![output], fan_in, rng),
            ),
            stride,
            padding,
        }
    }

    pub fn zeroed(
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Conv2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::zeros(vec![output, input, kernel, kernel]),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![output])),
            stride,
            padding,
        }
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let w = x.tape().param(&self.weight);
        add_channel_bias(x.conv2d(&w, self.stride, self.padding)?, &self.bias)
    }
}

impl Module for Conv2d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Transposed convolution with bias; weight layout `(in, out, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = input * kernel * kernel;
        ConvTranspose2d {
            weight: Parameter::new(
                format!("{name}.weight"),
                uniform_init(vec![input, output, kernel, kernel], fan_in, rng),
            ),
            bias: Parameter::new(
                format!("{name}.bias"),
                uniform_init(vec![output], fan_in, rng),
            ),
            stride,
            padding,
        }
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let w = x.tape().param(&self.weight);
        add_channel_bias(
            x.conv_transpose2d(&w, self.stride, self.padding)?,
            &self.bias,
        )
    }
}

impl Module for ConvTranspose2d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Per-channel affine normalization with data-dependent initialization:
/// the first batch seen by [`ActNorm::data_init`] sets scale and bias so
/// that batch comes out with zero mean and unit variance per channel.
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub scale: Parameter,
    pub bias: Parameter,
    pub initialized: bool,
}

impl ActNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        ActNorm {
            scale: Parameter::new(format!("{name}.scale"), Tensor::ones(vec![channels])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![channels])),
            initialized: false,
        }
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        x.channel_affine(&tape.param(&self.scale), &tape.param(&self.bias))
    }

    pub fn data_init(&mut self, x: &Tensor) -> Result<()> {
        if self.initialized {
            return Ok(());
        }
        let shape = x.shape();
        let c = self.scale.value.len();
        if shape.len() < 2 || shape[1] != c {
            return Err(Error::ShapeMismatch {
                op: "actnorm_init",
                left: shape.to_vec(),
                right: vec![c],
            });
        }
        let inner: usize = shape[2..].iter().product();
        let count = (shape[0] * inner) as f64;
        for ch in 0..c {
            let vals = (0..shape[0]).flat_map(|i| {
                let base = (i * c + ch) * inner;
                x.data()[base..base + inner].iter().copied()
            });
            let (s, s2) = vals.fold((0.0, 0.0), |(s, s2), v| (s + v, s2 + v * v));
            let mean = s / count;
            let var = (s2 / count - mean * mean).max(0.0);
            let inv = 1.0 / (var.sqrt() + 1e-6);
            self.scale.value.data_mut()[ch] = inv;
            self.bias.value.data_mut()[ch] = -mean * inv;
        }
        self.initialized = true;
        Ok(())
    }
}

impl Module for ActNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.scale);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.scale);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    ActNorm(ActNorm),
    Act(Activation),
    /// `x + inner(x)`
    Residual(Sequential),
    /// Reshape every item to the given per-item shape.
    Reshape(Vec<usize>),
}

impl Layer {
    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv(c) => c.forward(x),
            Layer::ConvTranspose(c) => c.forward(x),
            Layer::ActNorm(a) => a.forward(x),
            Layer::Act(a) => a.apply(x),
            Layer::Residual(s) => x.add(&s.forward(x)?),
            Layer::Reshape(item) => {
                let mut shape = vec![x.shape()[0]];
                shape.extend_from_slice(item);
                x.reshape(shape)
            }
        }
    }
}

impl Module for Layer {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        match self {
            Layer::Linear(l) => l.visit_params(f),
            Layer::Conv(c) => c.visit_params(f),
            Layer::ConvTranspose(c) => c.visit_params(f),
            Layer::ActNorm(a) => a.visit_params(f),
            Layer::Residual(s) => s.visit_params(f),
            Layer::Act(_) | Layer::Reshape(_) => {}
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match self {
            Layer::Linear(l) => l.visit_params_mut(f),
            Layer::Conv(c) => c.visit_params_mut(f),
            Layer::ConvTranspose(c) => c.visit_params_mut(f),
            Layer::ActNorm(a) => a.visit_params_mut(f),
            Layer::Residual(s) => s.visit_params_mut(f),
            Layer::Act(_) | Layer::Reshape(_) => {}
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.layers.iter().try_fold(x, |h, l| l.forward(h))
    }

    /// Runs `x` through the stack, initializing every [`ActNorm`] from the
    /// activations that reach it. Returns the stack output.
    pub fn data_init(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            match layer {
                Layer::ActNorm(a) => a.data_init(&h)?,
                Layer::Residual(s) => {
                    let inner = s.data_init(&h)?;
                    let tape = Tape::no_grad();
                    h = (*tape.constant(h).add(&tape.constant(inner))?.value()).clone();
                    continue;
                }
                _ => {}
            }
            let tape = Tape::no_grad();
            h = (*layer.forward(tape.constant(h))?.value()).clone();
        }
        Ok(h)
    }

    pub fn mark_initialized(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::ActNorm(a) => a.initialized = true,
                Layer::Residual(s) => s.mark_initialized(),
                _ => {}
            }
        }
    }
}

impl Module for Sequential {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for l in &self.layers {
            l.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for l in &mut self.layers {
            l.visit_params_mut(f);
        }
    }
}

/// `input -> hidden -> ... -> output` with leaky rectifiers between layers.
pub fn mlp<R: Rng + ?Sized>(name: &str, sizes: &[usize], rng: &mut R) -> Sequential {
    mlp_with(name, sizes, Activation::LeakyRelu, rng)
}

pub fn mlp_with<R: Rng + ?Sized>(
    name: &str,
    sizes: &[usize],
    activation: Activation,
    rng: &mut R,
) -> Sequential {
    let mut layers = Vec::new();
    for (i, w) in sizes.windows(2).enumerate() {
        if i > 0 {
            layers.push(Layer::Act(activation));
        }
        layers.push(Layer::Linear(Linear::new(
            &format!("{name}.fc{i}"),
            w[0],
            w[1],
            rng,
        )));
    }
    Sequential::new(layers)
}
