use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Bound, ParamSet};
use super::tape::{Tape, Unary, Var};
use super::tensor::Tensor;
use crate::error::{ensure, Result};

/// Slope of the leaky rectifier used by the skinning and transformation decoders.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Sharpness of the softplus used by the shape decoder.
pub const SOFTPLUS_BETA: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Softplus,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputHead {
    Raw,
    Softmax,
    Sigmoid,
}

/// Fully connected network layout.
///
/// `layer_widths` lists the output width of every layer, the last entry being
/// the network output. A layer index in `skip_layers` receives the network
/// input concatenated to its usual input.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input_width: usize,
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub skip_layers: Vec<usize>,
    pub output_head: OutputHead,
}

const SKIP_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.layer_widths.is_empty(), Validation, "network needs at least one layer");
        ensure!(self.input_width > 0, Validation, "network input width must be positive");
        ensure!(self.layer_widths.iter().all(|&w| w > 0), Validation, "layer widths must be positive");
        ensure!(
            self.skip_layers.iter().all(|&l| l >= 1 && l < self.layer_widths.len()),
            Validation,
            "skip connections must target a hidden layer"
        );
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn layer_input_width(&self, layer: usize) -> usize {
        let base = if layer == 0 { self.input_width } else { self.layer_widths[layer - 1] };
        base + if self.skip_layers.contains(&layer) { self.input_width } else { 0 }
    }

    pub fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.w")
    }

    pub fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.b")
    }

    /// He-style initialization for every layer.
    pub fn init_params(&self, prefix: &str, params: &mut ParamSet, rng: &mut impl Rng) {
        for (l, &out) in self.layer_widths.iter().enumerate() {
            let inp = self.layer_input_width(l);
            let std = (2.0 / inp as f64).sqrt();
            let normal = Normal::new(0.0, std).unwrap();
            let w = (0..inp * out).map(|_| normal.sample(rng)).collect();
            params.insert(Self::weight_name(prefix, l), Tensor::from_raw(inp, out, w));
            params.insert(Self::bias_name(prefix, l), Tensor::zeros(1, out));
        }
    }

    /// Checks that `params` holds correctly shaped tensors for this layout.
    pub fn check_params(&self, prefix: &str, params: &ParamSet) -> Result<()> {
        for (l, &out) in self.layer_widths.iter().enumerate() {
            let inp = self.layer_input_width(l);
            let w = params.value(&Self::weight_name(prefix, l))?;
            let b = params.value(&Self::bias_name(prefix, l))?;
            ensure!(
                w.rows() == inp && w.cols() == out,
                Dimension,
                "layer {prefix}.{l}: weight is {}x{}, expected {inp}x{out}",
                w.rows(),
                w.cols()
            );
            ensure!(b.rows() == 1 && b.cols() == out, Dimension, "layer {prefix}.{l}: bias width mismatch");
        }
        Ok(())
    }

    fn activate(&self, tape: &mut Tape, x: Var) -> Var {
        match self.activation {
            Activation::Relu => tape.unary(Unary::Relu, x),
            Activation::LeakyRelu => tape.unary(Unary::LeakyRelu(LEAKY_SLOPE), x),
            Activation::Softplus => tape.unary(Unary::Softplus(SOFTPLUS_BETA), x),
            Activation::None => x,
        }
    }

    fn activation_slope(&self, tape: &mut Tape, pre: Var) -> Option<Var> {
        match self.activation {
            Activation::Relu => Some(tape.unary(Unary::LeakyReluGrad(0.0), pre)),
            Activation::LeakyRelu => Some(tape.unary(Unary::LeakyReluGrad(LEAKY_SLOPE), pre)),
            Activation::Softplus => Some(tape.unary(Unary::SoftplusGrad(SOFTPLUS_BETA), pre)),
            Activation::None => None,
        }
    }

    /// Records the network on `tape` for a batch of input rows.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, prefix: &str, input: Var) -> Result<Var> {
        self.validate()?;
        let x = tape.value(input);
        ensure!(
            x.cols() == self.input_width,
            Dimension,
            "network `{prefix}` expects input width {}, got {}",
            self.input_width,
            x.cols()
        );
        ensure!(x.is_finite(), Validation, "network input contains non-finite values");
        let n = self.layer_widths.len();
        let mut h = input;
        for l in 0..n {
            if self.skip_layers.contains(&l) {
                let cat = tape.concat(&[h, input]);
                h = tape.scale(cat, SKIP_SCALE);
            }
            let w = bound.get(&Self::weight_name(prefix, l));
            let b = bound.get(&Self::bias_name(prefix, l));
            let z = tape.matmul(h, w);
            h = tape.add(z, b);
            if l + 1 < n {
                h = self.activate(tape, h);
            }
        }
        Ok(match self.output_head {
            OutputHead::Raw => h,
            OutputHead::Softmax => tape.softmax_rows(h),
            OutputHead::Sigmoid => tape.sigmoid(h),
        })
    }

    /// Forward pass that also propagates directional derivatives of the output
    /// with respect to the input. Each tangent has the shape of `input`. The
    /// tangents are themselves recorded on the tape, so losses built from them
    /// (e.g. gradient-norm penalties) can be differentiated w.r.t. parameters.
    pub fn forward_with_tangents(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        input: Var,
        tangents: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        ensure!(self.output_head == OutputHead::Raw, Contract, "tangent propagation needs a raw output head");
        self.validate()?;
        ensure!(tape.value(input).cols() == self.input_width, Dimension, "network input width mismatch");
        let n = self.layer_widths.len();
        let mut h = input;
        let mut th: Vec<Var> = tangents.to_vec();
        for l in 0..n {
            if self.skip_layers.contains(&l) {
                let cat = tape.concat(&[h, input]);
                h = tape.scale(cat, SKIP_SCALE);
                for (t, &t0) in th.iter_mut().zip(tangents) {
                    let cat = tape.concat(&[*t, t0]);
                    *t = tape.scale(cat, SKIP_SCALE);
                }
            }
            let w = bound.get(&Self::weight_name(prefix, l));
            let b = bound.get(&Self::bias_name(prefix, l));
            let z = tape.matmul(h, w);
            let pre = tape.add(z, b);
            for t in th.iter_mut() {
                *t = tape.matmul(*t, w);
            }
            if l + 1 < n {
                if let Some(slope) = self.activation_slope(tape, pre) {
                    for t in th.iter_mut() {
                        *t = tape.mul(*t, slope);
                    }
                }
                h = self.activate(tape, pre);
            } else {
                h = pre;
            }
        }
        Ok((h, th))
    }
}

/// Records `spec` with the given parameters and evaluates it on constant input.
pub fn forward_mlp(spec: &MlpSpec, params: &ParamSet, prefix: &str, input: &Tensor) -> Result<Tensor> {
    spec.check_params(prefix, params)?;
    let mut tape = Tape::new();
    let bound = params.bind_selected(&mut tape, &[&format!("{prefix}.")], false);
    let x = tape.constant(input.clone());
    let y = spec.forward(&mut tape, &bound, prefix, x)?;
    Ok(tape.value(y).clone())
}
