use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, NumError, Result, Tensor, Var};

/// One layer of a feed-forward stack.
///
/// Dense weights are `[output, input]`; convolution weights are
/// `[out_channels, kernel_h, kernel_w, in_channels]` over channels-last
/// activations. Both carry a bias vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        pad: bool,
    },
    Relu,
    Tanh,
    Sigmoid,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Dense { input, output } => input > 0 && output > 0,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                ..
            } => in_channels > 0 && out_channels > 0 && kernel_h > 0 && kernel_w > 0 && stride > 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(NumError::InvalidSpec(format!("{self:?} has a zero width")))
        }
    }

    /// Shapes of the weight and bias tensors, empty for activations.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { input, output } => vec![vec![output, input], vec![output]],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => vec![
                vec![out_channels, kernel_h, kernel_w, in_channels],
                vec![out_channels],
            ],
            _ => Vec::new(),
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Dense { input, output } => (input, output),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => {
                let k = kernel_h * kernel_w;
                (k * in_channels, k * out_channels)
            }
            _ => (0, 0),
        }
    }
}

/// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)), zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Result<Vec<Tensor>> {
    spec.validate()?;
    let shapes = spec.param_shapes();
    if shapes.is_empty() {
        return Ok(Vec::new());
    }
    let (fan_in, fan_out) = spec.fans();
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let w_len: usize = shapes[0].iter().product();
    let w = (0..w_len).map(|_| dist.sample(rng)).collect();
    Ok(vec![
        Tensor::new(shapes[0].clone(), w)?,
        Tensor::zeros(shapes[1].clone()),
    ])
}

/// Output length of a convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Records `spec` applied to `x` on the graph. `params` are the layer's
/// weight and bias variables (empty for activations).
pub fn forward(g: &mut Graph<'_>, spec: &LayerSpec, params: &[Var], x: Var) -> Result<Var> {
    spec.validate()?;
    let need = spec.param_shapes().len();
    if params.len() != need {
        return Err(NumError::InvalidSpec(format!(
            "{spec:?} takes {need} parameter tensors, got {}",
            params.len()
        )));
    }
    match *spec {
        LayerSpec::Dense { .. } => g.dense(x, params[0], params[1]),
        LayerSpec::Conv2d { stride, pad, .. } => g.conv2d(x, params[0], params[1], stride, pad),
        LayerSpec::Relu => g.relu(x),
        LayerSpec::Tanh => g.tanh(x),
        LayerSpec::Sigmoid => g.sigmoid(x),
    }
}

/// Records a whole stack of layers whose parameters are laid out
/// consecutively starting at `first_param` in the graph's parameter slice.
/// Returns the output and the index just past the last parameter used.
pub fn forward_stack(
    g: &mut Graph<'_>,
    layers: &[LayerSpec],
    first_param: usize,
    x: Var,
) -> Result<(Var, usize)> {
    let mut cursor = first_param;
    let mut h = x;
    for spec in layers {
        let n = spec.param_shapes().len();
        let vars = (cursor..cursor + n)
            .map(|i| g.param(i))
            .collect::<Result<Vec<_>>>()?;
        h = forward(g, spec, &vars, h)?;
        cursor += n;
    }
    Ok((h, cursor))
}

pub fn init_stack<R: Rng + ?Sized>(layers: &[LayerSpec], rng: &mut R) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for spec in layers {
        out.extend(init_params(spec, rng)?);
    }
    Ok(out)
}
