use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, Params};
use super::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Mish,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Mish => tape.mish(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(
        params: &mut Params,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = params.add_glorot(format!("{name}.weight"), fan_in, fan_out, gain, rng);
        let bias = params.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Dense {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        tape.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: params.add(format!("{name}.gamma"), Array2::ones((1, width))),
            beta: params.add(format!("{name}.beta"), Array2::zeros((1, width))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: Var) -> Var {
        let g = tape.param(params, self.gamma);
        let b = tape.param(params, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// How the layers of an [`Mlp`] are finished.
#[derive(Clone, Copy, Debug)]
pub struct MlpStyle {
    pub activation: Activation,
    /// Layer-normalize after each activated layer.
    pub layer_norm: bool,
    /// Apply the activation (and norm) to the last layer too.
    pub activate_last: bool,
    /// Glorot gain of the final layer.
    pub last_gain: f64,
}

/// A stack of dense layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
    norms: Vec<Option<LayerNorm>>,
    style: MlpStyle,
}

impl Mlp {
    pub fn new(
        params: &mut Params,
        name: &str,
        input: usize,
        widths: &[usize],
        style: MlpStyle,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            !widths.is_empty(),
            "{name}: an MLP needs at least one layer"
        );
        let mut layers = Vec::with_capacity(widths.len());
        let mut norms = Vec::with_capacity(widths.len());
        let mut fan_in = input;
        for (k, &w) in widths.iter().enumerate() {
            let last = k + 1 == widths.len();
            let gain = if last { style.last_gain } else { 1.0 };
            layers.push(Dense::new(
                params,
                &format!("{name}.{k}"),
                fan_in,
                w,
                gain,
                rng,
            ));
            let activated = !last || style.activate_last;
            norms.push(
                (activated && style.layer_norm)
                    .then(|| LayerNorm::new(params, &format!("{name}.{k}.norm"), w)),
            );
            fan_in = w;
        }
        Mlp {
            layers,
            norms,
            style,
        }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.fan_out).unwrap_or(0)
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, mut x: Var) -> Var {
        let n = self.layers.len();
        for (k, (layer, norm)) in self.layers.iter().zip(&self.norms).enumerate() {
            x = layer.forward(tape, params, x);
            if k + 1 < n || self.style.activate_last {
                x = self.style.activation.apply(tape, x);
            }
            if let Some(norm) = norm {
                x = norm.forward(tape, params, x);
            }
        }
        x
    }
}
