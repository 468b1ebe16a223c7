//! Fixed layer set with explicit forward records and hand-written backward
//! passes. Activations are row-major with the batch as the leading axis:
//! `[batch, len, channels]` for the convolutional stage, `[batch, features]`
//! after flattening.

use crate::error::{Error, Result};

use super::gemm::gemm;
use super::{ParamSet, Rng, Tensor};

/// Whether a forward pass is stochastic (dropout active) or deterministic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Valid, stride-1 convolution. Weight shape `[out, in, kernel]`.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weight: usize,
        bias: usize,
    },
    /// Fully connected layer. Weight shape `[inputs, outputs]`.
    Dense {
        inputs: usize,
        outputs: usize,
        weight: usize,
        bias: usize,
    },
    /// Subgradient 1 at zero, so an all-zero input does not freeze biases.
    Relu,
    /// Logistic function, clamped to `[1e-12, 1 - 1e-12]`.
    Sigmoid,
    /// Inverted dropout.
    Dropout { rate: f64 },
    Flatten,
}

pub const SIGMOID_CLAMP: f64 = 1e-12;

enum Record {
    Conv1d {
        cols: Vec<f64>,
        batch: usize,
        len_in: usize,
    },
    Dense {
        input: Tensor,
    },
    Relu {
        active: Vec<bool>,
    },
    Sigmoid {
        output: Tensor,
    },
    Dropout {
        scale: Option<Vec<f64>>,
    },
    Flatten {
        shape: Vec<usize>,
    },
}

/// Intermediate values recorded by [`Sequential::forward`] and consumed by
/// [`Sequential::backward`].
#[derive(Default)]
pub struct Tape {
    records: Vec<Record>,
}

impl Tape {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }
}

/// A feed-forward stack of [`Layer`]s owning its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    layers: Vec<Layer>,
    params: ParamSet,
}

pub struct SequentialBuilder {
    layers: Vec<Layer>,
    params: ParamSet,
    fans: Vec<(usize, usize)>,
    error: Option<Error>,
}

impl Sequential {
    pub fn builder() -> SequentialBuilder {
        SequentialBuilder {
            layers: Vec::new(),
            params: ParamSet::new(),
            fans: Vec::new(),
            error: None,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces the parameters; the layout must match.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, input: &Tensor, mode: Mode<'_>) -> Result<(Tensor, Tape)> {
        self.run(input, mode, true)
    }

    /// Deterministic forward pass without recording.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        self.run(input, Mode::Eval, false).map(|(out, _)| out)
    }

    fn run(&self, input: &Tensor, mut mode: Mode<'_>, record: bool) -> Result<(Tensor, Tape)> {
        let mut tape = Tape::default();
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, rec) = match layer {
                Layer::Conv1d {
                    in_channels,
                    out_channels,
                    kernel,
                    weight,
                    bias,
                } => {
                    let (batch, len_in) = conv_input_dims(&x, *in_channels, *kernel)?;
                    let (out, cols) = conv1d_batch(
                        x.data(),
                        batch,
                        len_in,
                        *in_channels,
                        self.params.get(*weight).value.data(),
                        self.params.get(*bias).value.data(),
                        *out_channels,
                        *kernel,
                    );
                    let len_out = len_in - kernel + 1;
                    let y = Tensor::from_vec(&[batch, len_out, *out_channels], out)?;
                    (y, Record::Conv1d { cols, batch, len_in })
                }
                Layer::Dense {
                    inputs,
                    outputs,
                    weight,
                    bias,
                } => {
                    if x.shape().len() != 2 || x.shape()[1] != *inputs {
                        return Err(Error::Shape(format!(
                            "dense layer expects [batch, {inputs}], got {:?}",
                            x.shape()
                        )));
                    }
                    let batch = x.rows();
                    let mut out = vec![0.0; batch * outputs];
                    let b = self.params.get(*bias).value.data();
                    for row in out.chunks_exact_mut(*outputs) {
                        row.copy_from_slice(b);
                    }
                    gemm(
                        batch,
                        *inputs,
                        *outputs,
                        x.data(),
                        false,
                        self.params.get(*weight).value.data(),
                        false,
                        &mut out,
                        true,
                    );
                    let y = Tensor::from_vec(&[batch, *outputs], out)?;
                    (y, Record::Dense { input: x })
                }
                Layer::Relu => {
                    let active = if record {
                        x.data().iter().map(|v| *v >= 0.0).collect()
                    } else {
                        Vec::new()
                    };
                    let mut y = x;
                    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    (y, Record::Relu { active })
                }
                Layer::Sigmoid => {
                    let mut y = x;
                    y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
                    let rec = Record::Sigmoid {
                        output: if record { y.clone() } else { Tensor::scalar(0.0) },
                    };
                    (y, rec)
                }
                Layer::Dropout { rate } => match &mut mode {
                    Mode::Train(rng) if *rate > 0.0 => {
                        let scale = dropout_scale(x.len(), *rate, rng);
                        let mut y = x;
                        for (v, s) in y.data_mut().iter_mut().zip(&scale) {
                            *v *= s;
                        }
                        (y, Record::Dropout { scale: Some(scale) })
                    }
                    _ => (x, Record::Dropout { scale: None }),
                },
                Layer::Flatten => {
                    let shape = x.shape().to_vec();
                    let rows = x.rows();
                    let width = x.row_len();
                    (x.reshape(&[rows, width])?, Record::Flatten { shape })
                }
            };
            if record {
                tape.records.push(rec);
            }
            x = y;
        }
        Ok((x, tape))
    }

    /// Accumulates parameter gradients for `grad_out` and returns the
    /// gradient with respect to the network input.
    pub fn backward(&mut self, tape: &Tape, grad_out: Tensor) -> Result<Tensor> {
        if tape.is_empty() {
            return Err(Error::Usage(
                "backward called without a recorded forward pass".into(),
            ));
        }
        if tape.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "tape has {} records but the network has {} layers",
                tape.len(),
                self.layers.len()
            )));
        }
        let mut g = grad_out;
        for (layer, rec) in self.layers.iter().zip(&tape.records).rev() {
            g = match (layer, rec) {
                (
                    Layer::Conv1d {
                        in_channels,
                        out_channels,
                        kernel,
                        weight,
                        bias,
                    },
                    Record::Conv1d { cols, batch, len_in },
                ) => {
                    let len_out = len_in - kernel + 1;
                    let m = batch * len_out;
                    let ck = in_channels * kernel;
                    if g.len() != m * out_channels {
                        return Err(Error::Shape("conv gradient size mismatch".into()));
                    }
                    gemm(
                        *out_channels,
                        m,
                        ck,
                        g.data(),
                        true,
                        cols,
                        false,
                        self.params.get_mut(*weight).grad.data_mut(),
                        true,
                    );
                    let db = self.params.get_mut(*bias).grad.data_mut();
                    for row in g.data().chunks_exact(*out_channels) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let mut dcols = vec![0.0; m * ck];
                    gemm(
                        m,
                        *out_channels,
                        ck,
                        g.data(),
                        false,
                        self.params.get(*weight).value.data(),
                        false,
                        &mut dcols,
                        false,
                    );
                    let mut dx = vec![0.0; batch * len_in * in_channels];
                    for b in 0..*batch {
                        for i in 0..len_out {
                            let row = &dcols[(b * len_out + i) * ck..(b * len_out + i + 1) * ck];
                            for c in 0..*in_channels {
                                for j in 0..*kernel {
                                    dx[(b * len_in + i + j) * in_channels + c] += row[c * kernel + j];
                                }
                            }
                        }
                    }
                    Tensor::from_vec(&[*batch, *len_in, *in_channels], dx)?
                }
                (
                    Layer::Dense {
                        inputs,
                        outputs,
                        weight,
                        bias,
                    },
                    Record::Dense { input },
                ) => {
                    let batch = input.rows();
                    if g.len() != batch * outputs {
                        return Err(Error::Shape("dense gradient size mismatch".into()));
                    }
                    gemm(
                        *inputs,
                        batch,
                        *outputs,
                        input.data(),
                        true,
                        g.data(),
                        false,
                        self.params.get_mut(*weight).grad.data_mut(),
                        true,
                    );
                    let db = self.params.get_mut(*bias).grad.data_mut();
                    for row in g.data().chunks_exact(*outputs) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let mut dx = vec![0.0; batch * inputs];
                    gemm(
                        batch,
                        *outputs,
                        *inputs,
                        g.data(),
                        false,
                        self.params.get(*weight).value.data(),
                        true,
                        &mut dx,
                        false,
                    );
                    Tensor::from_vec(&[batch, *inputs], dx)?
                }
                (Layer::Relu, Record::Relu { active }) => {
                    let mut g = g;
                    for (d, on) in g.data_mut().iter_mut().zip(active) {
                        if !on {
                            *d = 0.0;
                        }
                    }
                    g
                }
                (Layer::Sigmoid, Record::Sigmoid { output }) => {
                    let mut g = g;
                    for (d, y) in g.data_mut().iter_mut().zip(output.data()) {
                        *d *= y * (1.0 - y);
                    }
                    g
                }
                (Layer::Dropout { .. }, Record::Dropout { scale }) => {
                    let mut g = g;
                    if let Some(scale) = scale {
                        for (d, s) in g.data_mut().iter_mut().zip(scale) {
                            *d *= s;
                        }
                    }
                    g
                }
                (Layer::Flatten, Record::Flatten { shape }) => g.reshape(shape)?,
                _ => {
                    return Err(Error::Usage(
                        "tape was recorded by a different network".into(),
                    ))
                }
            };
        }
        Ok(g)
    }
}

impl SequentialBuilder {
    fn push_param(&mut self, name: String, shape: &[usize]) -> usize {
        match self.params.add(name, Tensor::zeros(shape)) {
            Ok(i) => i,
            Err(e) => {
                self.error.get_or_insert(e);
                0
            }
        }
    }

    pub fn conv1d(mut self, name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let weight = self.push_param(format!("{name}.weight"), &[out_channels, in_channels, kernel]);
        let bias = self.push_param(format!("{name}.bias"), &[out_channels]);
        self.fans.push((in_channels * kernel, out_channels * kernel));
        self.fans.push((0, 0));
        self.layers.push(Layer::Conv1d {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        });
        self
    }

    pub fn dense(mut self, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = self.push_param(format!("{name}.weight"), &[inputs, outputs]);
        let bias = self.push_param(format!("{name}.bias"), &[outputs]);
        self.fans.push((inputs, outputs));
        self.fans.push((0, 0));
        self.layers.push(Layer::Dense {
            inputs,
            outputs,
            weight,
            bias,
        });
        self
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn sigmoid(mut self) -> Self {
        self.layers.push(Layer::Sigmoid);
        self
    }

    pub fn dropout(mut self, rate: f64) -> Self {
        if !(0.0..1.0).contains(&rate) {
            self.error
                .get_or_insert(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.layers.push(Layer::Dropout { rate });
        self
    }

    pub fn flatten(mut self) -> Self {
        self.layers.push(Layer::Flatten);
        self
    }

    /// Glorot-uniform weights, zero biases.
    pub fn build(mut self, rng: &mut Rng) -> Result<Sequential> {
        if let Some(e) = self.error {
            return Err(e);
        }
        for (p, &(fan_in, fan_out)) in self.params.iter_mut().zip(&self.fans) {
            if fan_in + fan_out == 0 {
                continue;
            }
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in p.value.data_mut() {
                *v = limit * (2.0 * rng.uniform() - 1.0);
            }
        }
        Ok(Sequential {
            layers: self.layers,
            params: self.params,
        })
    }

    /// Uses existing parameters; names and shapes must match the layer stack.
    pub fn build_with(self, params: ParamSet) -> Result<Sequential> {
        if let Some(e) = self.error {
            return Err(e);
        }
        self.params.check_layout(&params)?;
        Ok(Sequential {
            layers: self.layers,
            params,
        })
    }
}

fn conv_input_dims(x: &Tensor, in_channels: usize, kernel: usize) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() != 3 || s[2] != in_channels {
        return Err(Error::Shape(format!(
            "conv1d expects [batch, len, {in_channels}], got {s:?}"
        )));
    }
    if s[1] < kernel {
        return Err(Error::Shape(format!(
            "sequence length {} shorter than kernel {kernel}",
            s[1]
        )));
    }
    Ok((s[0], s[1]))
}

/// Returns the output `[batch * len_out, out]` and the im2col matrix
/// `[batch * len_out, in * kernel]`.
#[allow(clippy::too_many_arguments)]
fn conv1d_batch(
    input: &[f64],
    batch: usize,
    len_in: usize,
    in_channels: usize,
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
    kernel: usize,
) -> (Vec<f64>, Vec<f64>) {
    let len_out = len_in - kernel + 1;
    let m = batch * len_out;
    let ck = in_channels * kernel;
    let mut cols = vec![0.0; m * ck];
    for b in 0..batch {
        for i in 0..len_out {
            let row = &mut cols[(b * len_out + i) * ck..(b * len_out + i + 1) * ck];
            for c in 0..in_channels {
                for j in 0..kernel {
                    row[c * kernel + j] = input[(b * len_in + i + j) * in_channels + c];
                }
            }
        }
    }
    let mut out = vec![0.0; m * out_channels];
    for row in out.chunks_exact_mut(out_channels) {
        row.copy_from_slice(bias);
    }
    gemm(m, ck, out_channels, &cols, false, weight, true, &mut out, true);
    (out, cols)
}

fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
}

fn dropout_scale(n: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect()
}

/// Single-sequence valid convolution: `input` is `[len, in]`, `weights` is
/// `[out, in, kernel]`, `bias` is `[out]`. Returns `[len - kernel + 1, out]`.
pub fn conv1d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, kernel: usize) -> Result<Tensor> {
    let (ws, is) = (weights.shape(), input.shape());
    if is.len() != 2 || ws.len() != 3 || ws[1] != is[1] || ws[2] != kernel || bias.len() != ws[0] {
        return Err(Error::Config(format!(
            "conv1d shapes disagree: input {is:?}, weights {ws:?}, bias {:?}, kernel {kernel}",
            bias.shape()
        )));
    }
    if kernel == 0 || is[0] < kernel {
        return Err(Error::Config(format!(
            "sequence length {} shorter than kernel {kernel}",
            is[0]
        )));
    }
    let (out, _) = conv1d_batch(input.data(), 1, is[0], is[1], weights.data(), bias.data(), ws[0], kernel);
    Tensor::from_vec(&[is[0] - kernel + 1, ws[0]], out)
}

/// Inverted dropout; identity when `training` is false.
pub fn dropout(input: &Tensor, rate: f64, rng: &mut Rng, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(input.clone());
    }
    let scale = dropout_scale(input.len(), rate, rng);
    let mut out = input.clone();
    for (v, s) in out.data_mut().iter_mut().zip(&scale) {
        *v *= s;
    }
    Ok(out)
}
