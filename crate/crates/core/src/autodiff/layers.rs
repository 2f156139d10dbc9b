use serde::{Deserialize, Serialize};

use super::{Graph, NodeId, ParamId, ParamStore, Scalar};
use crate::error::Result;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
        }
    }
}

/// Fully connected layer `x W + b`, `W [in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_uniform(&format!("{name}.weight"), &[inputs, outputs], inputs, rng)?,
            bias: store.add_zeros(&format!("{name}.bias"), &[outputs])?,
            inputs,
            outputs,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// 4x4 convolution, stride 2, padding 1 (halves each spatial side).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;

impl Conv2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let fan_in = in_channels * KERNEL * KERNEL;
        Ok(Self {
            weight: store.add_uniform(
                &format!("{name}.weight"),
                &[out_channels, in_channels, KERNEL, KERNEL],
                fan_in,
                rng,
            )?,
            bias: store.add_zeros(&format!("{name}.bias"), &[out_channels])?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, STRIDE, PAD)
    }
}

/// 4x4 transposed convolution, stride 2, padding 1 (doubles each spatial side).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let fan_in = in_channels * KERNEL * KERNEL;
        Ok(Self {
            weight: store.add_uniform(
                &format!("{name}.weight"),
                &[in_channels, out_channels, KERNEL, KERNEL],
                fan_in,
                rng,
            )?,
            bias: store.add_zeros(&format!("{name}.bias"), &[out_channels])?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv_transpose2d(x, w, b, STRIDE, PAD)
    }
}

/// Stack of dense layers with a shared hidden activation and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: NodeId) -> Result<NodeId> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last {
                x = self.activation.apply(g, x);
            }
        }
        Ok(x)
    }
}
