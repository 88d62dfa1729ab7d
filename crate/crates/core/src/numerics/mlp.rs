use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::kernels::{self, Activation};
use super::optim::Parameters;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// One fully connected layer. `weight` is stored `[in, out]` so the forward
/// pass is `x · W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Uniform in ±√(6/(fan_in+fan_out)), zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Layer {
            weight: Tensor::new(&[fan_in, fan_out], w).expect("weight shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }
}

/// Weights of a fully connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

/// Graph handles of an MLP's parameters, in [`Parameters::tensors`] order.
#[derive(Clone, Debug)]
pub struct ParamHandles(pub Vec<Var>);

impl MlpParams {
    /// Randomly initialized network with layer widths `dims[0] → … → dims[n]`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Layer::glorot(w[0], w[1], rng))
            .collect();
        MlpParams {
            layers,
            hidden_activation,
            output_activation,
        }
    }

    pub fn from_layers(
        layers: Vec<Layer>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        let mlp = MlpParams {
            layers,
            hidden_activation,
            output_activation,
        };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Dimension("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.out_dim()] {
                return Err(Error::Dimension(format!(
                    "layer {i}: weight {:?}, bias {:?}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension(format!(
                    "layer {i} emits {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim() * l.out_dim() + l.out_dim())
            .sum()
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    /// Records the forward pass on `g`. With `trainable` the weights become
    /// gradient-carrying leaves; otherwise they are constants.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        trainable: bool,
    ) -> Result<(Var, ParamHandles)> {
        let mut handles = Vec::with_capacity(2 * self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = if trainable {
                (g.param(&layer.weight), g.param(&layer.bias))
            } else {
                (g.constant_ref(&layer.weight), g.constant_ref(&layer.bias))
            };
            handles.extend([w, b]);
            let z = g.linear(h, w, b)?;
            h = g.activation(z, self.activation_of(i));
        }
        Ok((h, ParamHandles(handles)))
    }

    /// Graph-free forward pass; same kernels as [`MlpParams::forward`].
    pub fn predict(&self, x: ArrayView2<f32>) -> Result<Array2<f32>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "input width {} for network expecting {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        let mut h: Option<Array2<f32>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let input = h.as_ref().map_or(x.view(), |a| a.view());
            let mut z = kernels::linear(input, layer.weight.view2(), layer.bias.data());
            let cols = z.ncols();
            self.activation_of(i)
                .apply(z.as_slice_mut().expect("contiguous"), cols);
            h = Some(z);
        }
        let out = h.expect("non-empty network");
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("network output".into()));
        }
        Ok(out)
    }
}

impl Parameters for MlpParams {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}
