use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and the output `y`.
    /// ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitScheme {
    /// Weights uniform in `±sqrt(6 / fan_in)`, biases zero.
    KaimingUniform,
    /// Weights `N(0, scale²)`, biases zero.
    Gaussian { scale: f64 },
    /// Two-layer linear net with `V₀ = W₀ᵀ`; `W₀` entries `N(0, scale²)`.
    BalancedLinear { scale: f64 },
}

/// Architecture of a dense feed-forward network.
///
/// Batch norm, when enabled, sits after every hidden linear layer and before
/// its activation. Hidden layers followed by batch norm carry no linear bias
/// (the BN shift plays that role); the output layer is never normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub batch_norm: bool,
    pub loss: LossKind,
    pub init: InitScheme,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind) -> Self {
        NetworkSpec {
            layer_sizes,
            activation,
            batch_norm: false,
            loss,
            init: InitScheme::KaimingUniform,
        }
    }

    pub fn with_batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config("layer_sizes needs at least input and output"));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        match self.init {
            InitScheme::Gaussian { scale } | InitScheme::BalancedLinear { scale }
                if !(scale.is_finite() && scale >= 0.0) =>
            {
                return Err(Error::config("init scale must be finite and non-negative"));
            }
            _ => {}
        }
        if let InitScheme::BalancedLinear { .. } = self.init {
            if self.activation != Activation::Identity
                || self.layer_sizes.len() != 3
                || self.batch_norm
            {
                return Err(Error::config(
                    "balanced_linear needs an identity-activation net with one hidden layer and no batch norm",
                ));
            }
            if self.layer_sizes[0] != self.layer_sizes[2] {
                return Err(Error::config(
                    "balanced_linear (V0 = W0^T) needs equal input and output widths",
                ));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// True when linear layer `l` is followed by batch norm.
    pub fn has_bn(&self, l: usize) -> bool {
        self.batch_norm && l + 1 < self.num_layers()
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.layer_sizes[1..self.layer_sizes.len() - 1]
    }
}
