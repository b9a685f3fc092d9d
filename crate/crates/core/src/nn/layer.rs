//! Dense layers: `y = activation(W x + b)`, weights row-major `[out, in]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{ParamGroup, ParamKey};
use crate::nn::tape::{Tape, Var};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// Only valid as the last layer of a stack.
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights in `±sqrt(6/(in+out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weights: Tensor::new(vec![out_dim, in_dim], data).expect("glorot shape"),
            bias: Tensor::zeros(&[out_dim]),
            activation,
        }
    }

    pub fn from_parts(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::shape("dense weights", &[0, 0], weights.shape()));
        }
        if bias.shape() != [weights.rows()] {
            return Err(Error::shape("dense bias", &[weights.rows()], bias.shape()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Multiply-accumulates for one forward pass of one sample.
    pub fn forward_macs(&self) -> u64 {
        (self.in_dim() * self.out_dim()) as u64
    }

    /// Records this layer on `tape`; parameters are keyed `<prefix>w` / `<prefix>b`.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, group: ParamGroup, prefix: &str) -> Result<Var> {
        let w = tape.param(ParamKey::new(group, format!("{prefix}w")), &self.weights);
        let b = tape.param(ParamKey::new(group, format!("{prefix}b")), &self.bias);
        let z = tape.affine(x, w, b)?;
        match self.activation {
            Activation::Identity => Ok(z),
            Activation::Relu => tape.relu(z),
            Activation::Softmax => tape.softmax(z),
        }
    }

    pub fn params<'a>(&'a self, group: ParamGroup, prefix: &str, out: &mut Vec<(ParamKey, &'a Tensor)>) {
        out.push((ParamKey::new(group, format!("{prefix}w")), &self.weights));
        out.push((ParamKey::new(group, format!("{prefix}b")), &self.bias));
    }

    pub fn params_mut<'a>(&'a mut self, group: ParamGroup, prefix: &str, out: &mut Vec<(ParamKey, &'a mut Tensor)>) {
        out.push((ParamKey::new(group, format!("{prefix}w")), &mut self.weights));
        out.push((ParamKey::new(group, format!("{prefix}b")), &mut self.bias));
    }
}

/// Evaluates `layer` on `x` (`[in]` or `[B, in]`) without recording gradients.
pub fn dense_forward(x: &Tensor, layer: &DenseLayer) -> Result<Tensor> {
    let mut tape = Tape::new();
    let was_vector = x.shape().len() == 1;
    let xv = tape.leaf(x.clone().as_matrix());
    let y = layer.forward_tape(&mut tape, xv, ParamGroup::Front, "")?;
    let out = tape.value(y).clone();
    if was_vector {
        Tensor::new(vec![out.cols()], out.into_data())
    } else {
        Ok(out)
    }
}

/// Checks that softmax, if present, is only the terminal activation.
pub fn validate_stack(layers: &[DenseLayer]) -> Result<()> {
    for pair in layers.windows(2) {
        if pair[0].activation == Activation::Softmax {
            return Err(Error::Config("softmax is only allowed as the terminal activation".into()));
        }
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(Error::shape("layer chain", &[pair[0].out_dim()], &[pair[1].in_dim()]));
        }
    }
    Ok(())
}
