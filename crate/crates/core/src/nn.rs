//! Small layer building blocks shared by the model modules.

use rand::Rng;

use crate::autodiff::{Activation, Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How a layer's weights are drawn at construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with the given standard deviation.
    Gaussian(f64),
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
}

impl Init {
    pub fn sample<R: Rng>(self, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
        match self {
            Init::Gaussian(std) => Tensor::gaussian(shape, std, rng),
            Init::Xavier => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::uniform(shape, -limit, limit, rng)
            }
        }
    }
}

/// `y = x·W + b` on `R×in` rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(group, &format!("{name}.weight"), init.sample(&[fan_in, fan_out], fan_in, fan_out, rng));
        let bias = store.add(group, &format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row_bias(xw, b)
    }
}

/// One hidden layer with tanh, linear output.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        fan_in: usize,
        width: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, group, &format!("{name}.hidden"), fan_in, width, init, rng),
            output: Linear::new(store, group, &format!("{name}.out"), width, fan_out, init, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.activation(h, Activation::Tanh);
        self.output.forward(g, store, h)
    }
}

/// Two affine layers, each followed by relu.
#[derive(Clone, Copy, Debug)]
pub struct FcStack {
    pub first: Linear,
    pub second: Linear,
}

impl FcStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        fan_in: usize,
        width: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        FcStack {
            first: Linear::new(store, group, &format!("{name}.fc1"), fan_in, width, init, rng),
            second: Linear::new(store, group, &format!("{name}.fc2"), width, width, init, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.second.forward(g, store, h)?;
        Ok(g.relu(h))
    }
}

/// Convolution with per-output-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let fan_in = c_in * kernel * kernel;
        let fan_out = c_out * kernel * kernel;
        let kernels = store.add(group, &format!("{name}.kernels"), init.sample(&shape, fan_in, fan_out, rng));
        let bias = store.add(group, &format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv {
            kernels,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernels);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, k, self.stride, self.pad)?;
        g.add_channel_bias(y, b)
    }
}
