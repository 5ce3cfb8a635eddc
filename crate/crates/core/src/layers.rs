//! Layer parameter types and eager (single-sample) forward functions.
//!
//! The graph operators in [`crate::autodiff`] share these kernels, so the
//! eager functions here compute exactly what a training graph computes.

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// 2D convolution: `weights (D×D'×kh×kw)`, `bias (D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(Error::invalid(format!(
                "conv weights must be D×D'×kh×kw, got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(Error::invalid(format!(
                "conv bias {:?} does not match {} filters",
                bias.shape(),
                weights.shape()[0]
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        Ok(Self {
            weights,
            bias,
            stride,
            padding,
        })
    }

    /// He-uniform initialised layer with zero bias.
    pub fn init(
        rng: &mut impl Rng,
        filters: usize,
        in_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let weights = init_uniform(rng, &[filters, in_channels, kernel, kernel]);
        Self {
            weights,
            bias: Tensor::zeros([filters]),
            stride,
            padding,
        }
    }

    pub fn filters(&self) -> usize {
        self.weights.shape()[0]
    }
}

/// Fully connected layer: `weights (out×in)`, `bias (out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.rank() != 2 || bias.shape() != [weights.shape()[0]] {
            return Err(Error::invalid(format!(
                "dense weights {:?} / bias {:?} are inconsistent",
                weights.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weights, bias })
    }

    pub fn init(rng: &mut impl Rng, out: usize, inp: usize) -> Self {
        Self {
            weights: init_uniform(rng, &[out, inp]),
            bias: Tensor::zeros([out]),
        }
    }
}

/// Running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight kept by the running averages on each update.
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormStats {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }
}

/// Batch normalization: learnable scale/shift plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: BatchNormStats,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels], 1.0),
            beta: Tensor::zeros([channels]),
            stats: BatchNormStats::new(channels),
        }
    }
}

/// Uniform in `±sqrt(6 / fan_in)` where `fan_in` is the product of all but
/// the leading dimension.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let limit = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limits");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape of init tensor")
}

/// Linear activation `D×A×B` of one `D'×H×W` input.
pub fn conv2d(input: &Tensor, layer: &ConvLayer) -> Result<Tensor> {
    let (g, oh, ow) = conv_geometry(input, layer)?;
    let filters = layer.filters();
    let mut col = vec![0.0; g.patch_len() * oh * ow];
    let mut out = vec![0.0; filters * oh * ow];
    kernels::conv2d_sample(
        input.data(),
        layer.weights.data(),
        layer.bias.data(),
        &g,
        oh,
        ow,
        &mut col,
        &mut out,
    );
    Tensor::new([filters, oh, ow], out)
}

fn conv_geometry(input: &Tensor, layer: &ConvLayer) -> Result<(ConvGeometry, usize, usize)> {
    if input.rank() != 3 {
        return Err(Error::shape(
            "conv2d",
            format!("expected D'×H×W input, got {:?}", input.shape()),
        ));
    }
    let w = layer.weights.shape();
    if input.shape()[0] != w[1] {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input has {} channels, filters expect {}",
                input.shape()[0],
                w[1]
            ),
        ));
    }
    let g = ConvGeometry {
        in_channels: w[1],
        height: input.shape()[1],
        width: input.shape()[2],
        kernel_h: w[2],
        kernel_w: w[3],
        stride: layer.stride,
        padding: layer.padding,
    };
    match (g.out_height(), g.out_width()) {
        (Some(oh), Some(ow)) => Ok((g, oh, ow)),
        _ => Err(Error::shape(
            "conv2d",
            format!(
                "{}×{} input yields no receptive field for a {}×{} kernel",
                g.height, g.width, g.kernel_h, g.kernel_w
            ),
        )),
    }
}

pub fn dense(input: &Tensor, layer: &DenseLayer) -> Result<Tensor> {
    let (out, inp) = (layer.weights.shape()[0], layer.weights.shape()[1]);
    if input.len() != inp {
        return Err(Error::shape(
            "dense",
            format!("input length {} != {inp}", input.len()),
        ));
    }
    let y = (0..out)
        .map(|j| {
            let mut acc = 0.0;
            for (w, x) in layer.weights.data()[j * inp..(j + 1) * inp]
                .iter()
                .zip(input.data())
            {
                acc += w * x;
            }
            acc + layer.bias.data()[j]
        })
        .collect();
    Ok(Tensor::from_vec(y))
}

/// 2×2 / stride-2 max pooling of one `D×H×W` input.
pub fn maxpool2d(input: &Tensor) -> Result<Tensor> {
    let (out, _) = maxpool2d_with_argmax(input)?;
    Ok(out)
}

/// Pooling result and the flat input index routed to each output cell.
pub fn maxpool2d_with_argmax(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let [d, h, w] = *input.shape() else {
        return Err(Error::shape(
            "maxpool2d",
            format!("expected D×H×W input, got {:?}", input.shape()),
        ));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial dims {h}×{w} must be even"),
        ));
    }
    let n = d * (h / 2) * (w / 2);
    let mut out = vec![0.0; n];
    let mut argmax = vec![0; n];
    kernels::maxpool2_sample(input.data(), d, h, w, &mut out, &mut argmax);
    Ok((Tensor::new([d, h / 2, w / 2], out)?, argmax))
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// `p_l = exp(a_l - max) / Σ exp(a_m - max)`.
pub fn softmax_stable(input: &[f64]) -> Result<Vec<f64>> {
    if input.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut p = vec![0.0; input.len()];
    kernels::softmax_into(input, &mut p);
    Ok(p)
}

/// Inverted dropout: in training, zeroes each unit with probability `p` and
/// scales survivors by `1/(1-p)`; in inference, returns the input unchanged.
pub fn dropout(input: &Tensor, p: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "dropout probability {p} outside [0, 1)"
        )));
    }
    if !training || p == 0.0 {
        return Ok(input.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let data = input
        .data()
        .iter()
        .map(|&v| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                v * keep
            }
        })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Batch normalization over an `N×C` or `N×C×H×W` batch using the layer's
/// own scale and shift.
pub fn batchnorm(input: &Tensor, state: &mut BatchNormState, training: bool) -> Result<Tensor> {
    let gamma = state.gamma.data().to_vec();
    let beta = state.beta.data().to_vec();
    let (y, _, _) = batch_normalize(&mut state.stats, input, &gamma, &beta, training)?;
    Ok(y)
}

/// Shared batch-norm math. Returns the output, the normalized input and the
/// per-channel inverse standard deviation.
pub(crate) fn batch_normalize(
    stats: &mut BatchNormStats,
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    training: bool,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, spatial) = match *x.shape() {
        [n, c] => (n, c, 1),
        [n, c, h, w] => (n, c, h * w),
        _ => {
            return Err(Error::shape(
                "batchnorm",
                format!("expected N×C or N×C×H×W input, got {:?}", x.shape()),
            ))
        }
    };
    if gamma.len() != c || beta.len() != c || stats.running_mean.len() != c {
        return Err(Error::shape(
            "batchnorm",
            format!("parameters do not match channel count {c}"),
        ));
    }
    if training && n < 2 {
        return Err(Error::shape(
            "batchnorm",
            "training mode needs a batch of at least 2",
        ));
    }
    let count = (n * spatial) as f64;
    let channel = |s: usize, ch: usize| {
        let off = (s * c + ch) * spatial;
        &x.data()[off..off + spatial]
    };
    let (mean, var) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += channel(s, ch).iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for s in 0..n {
            for (ch, v) in var.iter_mut().enumerate() {
                *v += channel(s, ch)
                    .iter()
                    .map(|x| (x - mean[ch]) * (x - mean[ch]))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= count;
        }
        let unbias = count / (count - 1.0);
        let mom = stats.momentum;
        for ch in 0..c {
            stats.running_mean[ch] = mom * stats.running_mean[ch] + (1.0 - mom) * mean[ch];
            stats.running_var[ch] = mom * stats.running_var[ch] + (1.0 - mom) * var[ch] * unbias;
        }
        (mean, var)
    } else {
        (stats.running_mean.clone(), stats.running_var.clone())
    };
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + stats.epsilon).sqrt())
        .collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * spatial;
            for i in off..off + spatial {
                xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                y[i] = gamma[ch] * xhat[i] + beta[ch];
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, xhat, inv_std))
}

/// Mean over the batch of `-ln softmax(logits)[label]`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let [n, c] = *logits.shape() else {
        return Err(Error::shape(
            "cross_entropy",
            format!("expected N×C logits, got {:?}", logits.shape()),
        ));
    };
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks(c).zip(labels) {
        if label >= c {
            return Err(Error::invalid(format!("label {label} outside [0, {c})")));
        }
        total -= kernels::log_softmax_at(row, label);
    }
    Ok(total / n as f64)
}
