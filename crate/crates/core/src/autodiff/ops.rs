//! Forward and backward rules for every interior [`Op`].

use rand::Rng;

use super::{Evaluation, Graph, Mode, Op};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Per-node data retained between the forward and the backward pass.
#[derive(Debug)]
pub(crate) enum Cache {
    None,
    /// Dropout multipliers (0 or `1/(1-p)`).
    Mask(Vec<f64>),
    /// Flat input index selected by each max-pool output cell.
    Argmax(Vec<usize>),
    /// Softmax probabilities laid out like the input.
    Probs(Vec<f64>),
    BatchNorm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Correlation {
        centered: Vec<f64>,
        sq_norms: Vec<f64>,
        valid: Vec<bool>,
    },
}

type Grads = Vec<Option<Vec<f64>>>;

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("operator produced a consistent shape")
}

pub(crate) fn forward(
    graph: &mut Graph,
    id: usize,
    values: &[Tensor],
    mode: &mut Mode<'_>,
) -> Result<(Tensor, Cache)> {
    let node = &graph.nodes[id];
    let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i.0]).collect();
    let op = node.op.clone();
    let here = || graph.describe(id);
    let out = match op {
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    here(),
                    format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
                ));
            }
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (tensor(a.shape().to_vec(), data), Cache::None)
        }
        Op::Scale(c) => {
            let a = inputs[0];
            let data = a.data().iter().map(|v| v * c).collect();
            (tensor(a.shape().to_vec(), data), Cache::None)
        }
        Op::Sum => (Tensor::scalar(inputs[0].data().iter().sum()), Cache::None),
        Op::Mean => {
            let a = inputs[0];
            (
                Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64),
                Cache::None,
            )
        }
        Op::BatchMeanSum => {
            let a = inputs[0];
            let n = a.shape().first().copied().unwrap_or(1);
            (
                Tensor::scalar(a.data().iter().sum::<f64>() / n as f64),
                Cache::None,
            )
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape(
                    here(),
                    format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            kernels::gemm_nn(m, k, n, a.data(), b.data(), &mut c);
            (tensor(vec![m, n], c), Cache::None)
        }
        Op::Relu => {
            let a = inputs[0];
            let data = a
                .data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect();
            (tensor(a.shape().to_vec(), data), Cache::None)
        }
        Op::Softmax => {
            let a = inputs[0];
            let width = *a.shape().last().unwrap_or(&1);
            let mut p = vec![0.0; a.len()];
            for (src, dst) in a.data().chunks(width).zip(p.chunks_mut(width)) {
                kernels::softmax_into(src, dst);
            }
            (tensor(a.shape().to_vec(), p), Cache::None)
        }
        Op::SafeLog => {
            let a = inputs[0];
            let data = a.data().iter().map(|&v| kernels::safe_ln(v)).collect();
            (tensor(a.shape().to_vec(), data), Cache::None)
        }
        Op::Flatten => {
            let a = inputs[0];
            let n = a.shape().first().copied().unwrap_or(1);
            (tensor(vec![n, a.len() / n], a.data().to_vec()), Cache::None)
        }
        Op::Reshape(shape) => {
            let a = inputs[0];
            if shape.iter().product::<usize>() != a.len() {
                return Err(Error::shape(
                    here(),
                    format!("cannot reshape {:?} into {shape:?}", a.shape()),
                ));
            }
            (tensor(shape, a.data().to_vec()), Cache::None)
        }
        Op::Conv2d { stride, padding } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            let (g, oh, ow) = conv_geometry(&here, x, w, b, stride, padding)?;
            let n = x.shape()[0];
            let filters = w.shape()[0];
            let sample_in = g.in_channels * g.height * g.width;
            let sample_out = filters * oh * ow;
            let mut out = vec![0.0; n * sample_out];
            let mut col = vec![0.0; g.patch_len() * oh * ow];
            for s in 0..n {
                kernels::conv2d_sample(
                    &x.data()[s * sample_in..(s + 1) * sample_in],
                    w.data(),
                    b.data(),
                    &g,
                    oh,
                    ow,
                    &mut col,
                    &mut out[s * sample_out..(s + 1) * sample_out],
                );
            }
            (tensor(vec![n, filters, oh, ow], out), Cache::None)
        }
        Op::MaxPool2d => {
            let x = inputs[0];
            if x.rank() != 4 {
                return Err(Error::shape(
                    here(),
                    format!("expected N×D×H×W input, got {:?}", x.shape()),
                ));
            }
            let (n, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(
                    here(),
                    format!("2×2 pooling needs even spatial dims, got {h}×{w}"),
                ));
            }
            let (sin, sout) = (d * h * w, d * (h / 2) * (w / 2));
            let mut out = vec![0.0; n * sout];
            let mut argmax = vec![0usize; n * sout];
            for s in 0..n {
                kernels::maxpool2_sample(
                    &x.data()[s * sin..(s + 1) * sin],
                    d,
                    h,
                    w,
                    &mut out[s * sout..(s + 1) * sout],
                    &mut argmax[s * sout..(s + 1) * sout],
                );
                for a in &mut argmax[s * sout..(s + 1) * sout] {
                    *a += s * sin;
                }
            }
            (tensor(vec![n, d, h / 2, w / 2], out), Cache::Argmax(argmax))
        }
        Op::Dense => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            if x.rank() != 2 || w.rank() != 2 || b.rank() != 1 {
                return Err(Error::shape(
                    here(),
                    format!(
                        "dense expects x (N×in), w (out×in), b (out); got {:?}, {:?}, {:?}",
                        x.shape(),
                        w.shape(),
                        b.shape()
                    ),
                ));
            }
            let (n, inp) = (x.shape()[0], x.shape()[1]);
            let out = w.shape()[0];
            if w.shape()[1] != inp || b.shape()[0] != out {
                return Err(Error::shape(
                    here(),
                    format!(
                        "input width {inp} does not match weights {:?} / bias {:?}",
                        w.shape(),
                        b.shape()
                    ),
                ));
            }
            let mut y = vec![0.0; n * out];
            for s in 0..n {
                let xs = &x.data()[s * inp..(s + 1) * inp];
                for j in 0..out {
                    let wj = &w.data()[j * inp..(j + 1) * inp];
                    let mut acc = 0.0;
                    for (wv, xv) in wj.iter().zip(xs) {
                        acc += wv * xv;
                    }
                    y[s * out + j] = acc + b.data()[j];
                }
            }
            (tensor(vec![n, out], y), Cache::None)
        }
        Op::Dropout { p } => {
            let x = inputs[0];
            match mode {
                Mode::Training(rng) if p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                    (tensor(x.shape().to_vec(), data), Cache::Mask(mask))
                }
                _ => (x.clone(), Cache::None),
            }
        }
        Op::BatchNorm { state } => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let x = x.clone();
            let gamma = gamma.data().to_vec();
            let beta = beta.data().to_vec();
            let label = here();
            let training = mode.is_training();
            batchnorm_forward(graph, state, &label, &x, &gamma, &beta, training)?
        }
        Op::CrossEntropy => {
            let (logits, labels) = (inputs[0], inputs[1]);
            if logits.rank() != 2 || labels.len() != logits.shape()[0] {
                return Err(Error::shape(
                    here(),
                    format!(
                        "logits {:?} and labels {:?} disagree",
                        logits.shape(),
                        labels.shape()
                    ),
                ));
            }
            let (n, c) = (logits.shape()[0], logits.shape()[1]);
            let mut probs = vec![0.0; n * c];
            let mut total = 0.0;
            for s in 0..n {
                let label = class_index(&here, labels.data()[s], c)?;
                let row = &logits.data()[s * c..(s + 1) * c];
                total -= kernels::log_softmax_at(row, label);
                kernels::softmax_into(row, &mut probs[s * c..(s + 1) * c]);
            }
            (Tensor::scalar(total / n as f64), Cache::Probs(probs))
        }
        Op::RfavEntropy => {
            let x = inputs[0];
            let (n, d, positions, out_shape) = rfav_layout(&here, x)?;
            let mut probs = vec![0.0; x.len()];
            let mut out = vec![0.0; n * positions];
            let mut rfav = vec![0.0; d];
            let mut p = vec![0.0; d];
            for s in 0..n {
                let base = s * d * positions;
                for k in 0..positions {
                    for l in 0..d {
                        rfav[l] = x.data()[base + l * positions + k];
                    }
                    kernels::softmax_into(&rfav, &mut p);
                    out[s * positions + k] = kernels::entropy_of_probs(&p);
                    for l in 0..d {
                        probs[base + l * positions + k] = p[l];
                    }
                }
            }
            (tensor(out_shape, out), Cache::Probs(probs))
        }
        Op::FilterCorrelation => {
            let w = inputs[0];
            if w.rank() < 2 || w.shape()[0] < 2 {
                return Err(Error::shape(
                    here(),
                    format!("need at least two flattened filters, got {:?}", w.shape()),
                ));
            }
            let d = w.shape()[0];
            let m = w.len() / d;
            let corr = crate::regularizers::centered_correlation(w.data(), d, m);
            if !corr.degenerate.is_empty() {
                log::warn!(
                    "{}: filters {:?} have zero centred norm; their correlations are set to 0",
                    here(),
                    corr.degenerate
                );
            }
            let valid = (0..d).map(|i| !corr.degenerate.contains(&i)).collect();
            (
                tensor(vec![d, d], corr.matrix),
                Cache::Correlation {
                    centered: corr.centered,
                    sq_norms: corr.sq_norms,
                    valid,
                },
            )
        }
        Op::LowerTriangleSum { absolute } => {
            let c = inputs[0];
            if c.rank() != 2 || c.shape()[0] != c.shape()[1] {
                return Err(Error::shape(
                    here(),
                    format!("expected a square matrix, got {:?}", c.shape()),
                ));
            }
            let d = c.shape()[0];
            let mut total = 0.0;
            for i in 0..d {
                for j in i + 1..d {
                    let v = c.data()[i * d + j];
                    total += if absolute { v.abs() } else { v };
                }
            }
            (Tensor::scalar(total), Cache::None)
        }
        Op::Input(_) | Op::Param(_) | Op::Constant(_) => unreachable!("leaf handled by caller"),
    };
    if !out.0.all_finite() {
        return Err(Error::NonFinite {
            context: graph.describe(id),
        });
    }
    Ok(out)
}

fn class_index(here: &dyn Fn() -> String, label: f64, classes: usize) -> Result<usize> {
    if label < 0.0 || label.fract() != 0.0 || label as usize >= classes {
        return Err(Error::shape(
            here(),
            format!("label {label} outside [0, {classes})"),
        ));
    }
    Ok(label as usize)
}

fn conv_geometry(
    here: &dyn Fn() -> String,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(ConvGeometry, usize, usize)> {
    if x.rank() != 4 || w.rank() != 4 || b.rank() != 1 {
        return Err(Error::shape(
            here(),
            format!(
                "conv2d expects x (N×D'×H×W), w (D×D'×kh×kw), b (D); got {:?}, {:?}, {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    if w.shape()[1] != x.shape()[1] {
        return Err(Error::shape(
            here(),
            format!(
                "input has {} channels but filters expect {}",
                x.shape()[1],
                w.shape()[1]
            ),
        ));
    }
    if b.shape()[0] != w.shape()[0] {
        return Err(Error::shape(
            here(),
            format!(
                "bias length {} != filter count {}",
                b.shape()[0],
                w.shape()[0]
            ),
        ));
    }
    let g = ConvGeometry {
        in_channels: x.shape()[1],
        height: x.shape()[2],
        width: x.shape()[3],
        kernel_h: w.shape()[2],
        kernel_w: w.shape()[3],
        stride,
        padding,
    };
    match (g.out_height(), g.out_width()) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((g, oh, ow)),
        _ => Err(Error::shape(
            here(),
            format!(
                "{}×{} input too small for {}×{} kernel (stride {stride}, padding {padding})",
                g.height, g.width, g.kernel_h, g.kernel_w
            ),
        )),
    }
}

/// `(N, D, R, output shape)` for an entropy node input.
fn rfav_layout(here: &dyn Fn() -> String, x: &Tensor) -> Result<(usize, usize, usize, Vec<usize>)> {
    let (n, d, a, b) = match *x.shape() {
        [n, d] => (n, d, 1, 1),
        [n, d, a, b] => (n, d, a, b),
        _ => {
            return Err(Error::shape(
                here(),
                format!("expected N×D or N×D×A×B activations, got {:?}", x.shape()),
            ))
        }
    };
    if d < 2 {
        return Err(Error::shape(
            here(),
            "RFAV entropy needs at least two channels",
        ));
    }
    Ok((n, d, a * b, vec![n, a, b]))
}

fn batchnorm_forward(
    graph: &mut Graph,
    state: usize,
    label: &str,
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    training: bool,
) -> Result<(Tensor, Cache)> {
    let stats = &mut graph.batch_norms[state];
    let (y, xhat, inv_std) = crate::layers::batch_normalize(stats, x, gamma, beta, training)
        .map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape(label, detail),
            other => other,
        })?;
    Ok((
        y,
        Cache::BatchNorm {
            xhat,
            inv_std,
            batch_stats: training,
        },
    ))
}

pub(crate) fn backward(graph: &Graph, id: usize, eval: &Evaluation, g: &[f64]) -> Result<Grads> {
    let node = &graph.nodes[id];
    let input = |k: usize| &eval.values[node.inputs[k].0];
    let wants = |k: usize| graph.nodes[node.inputs[k].0].requires_grad;
    let out = &eval.values[id];
    let cache = &eval.caches[id];
    let grads: Grads = match &node.op {
        Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        Op::Mul => {
            let (a, b) = (input(0), input(1));
            vec![
                wants(0).then(|| g.iter().zip(b.data()).map(|(g, b)| g * b).collect()),
                wants(1).then(|| g.iter().zip(a.data()).map(|(g, a)| g * a).collect()),
            ]
        }
        Op::Scale(c) => vec![Some(g.iter().map(|v| v * c).collect())],
        Op::Sum => vec![Some(vec![g[0]; input(0).len()])],
        Op::Mean => {
            let n = input(0).len();
            vec![Some(vec![g[0] / n as f64; n])]
        }
        Op::BatchMeanSum => {
            let a = input(0);
            let n = a.shape().first().copied().unwrap_or(1);
            vec![Some(vec![g[0] / n as f64; a.len()])]
        }
        Op::MatMul => {
            let (a, b) = (input(0), input(1));
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let da = wants(0).then(|| {
                let mut da = vec![0.0; m * k];
                kernels::gemm_nt(m, n, k, g, b.data(), &mut da);
                da
            });
            let db = wants(1).then(|| {
                let mut db = vec![0.0; k * n];
                kernels::gemm_tn(k, m, n, a.data(), g, &mut db);
                db
            });
            vec![da, db]
        }
        Op::Relu => {
            let a = input(0);
            vec![Some(
                g.iter()
                    .zip(a.data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            )]
        }
        Op::Softmax => {
            let width = *out.shape().last().unwrap_or(&1);
            let mut dx = vec![0.0; out.len()];
            for ((p, gr), dst) in out
                .data()
                .chunks(width)
                .zip(g.chunks(width))
                .zip(dx.chunks_mut(width))
            {
                let dot: f64 = p.iter().zip(gr).map(|(p, g)| p * g).sum();
                for ((d, &pv), &gv) in dst.iter_mut().zip(p).zip(gr) {
                    *d = pv * (gv - dot);
                }
            }
            vec![Some(dx)]
        }
        Op::SafeLog => {
            let a = input(0);
            vec![Some(
                g.iter()
                    .zip(a.data())
                    .map(|(&g, &x)| if x > kernels::LOG_FLOOR { g / x } else { 0.0 })
                    .collect(),
            )]
        }
        Op::Flatten | Op::Reshape(_) => vec![Some(g.to_vec())],
        Op::Conv2d { stride, padding } => {
            let (x, w) = (input(0), input(1));
            let here = || graph.describe(id);
            let (geo, oh, ow) = conv_geometry(&here, x, w, input(2), *stride, *padding)?;
            let n = x.shape()[0];
            let filters = w.shape()[0];
            let positions = oh * ow;
            let k = geo.patch_len();
            let sample_in = geo.in_channels * geo.height * geo.width;
            let sample_out = filters * positions;
            let mut dx = wants(0).then(|| vec![0.0; x.len()]);
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; filters];
            let mut col = vec![0.0; k * positions];
            let mut dcol = vec![0.0; k * positions];
            for s in 0..n {
                let gs = &g[s * sample_out..(s + 1) * sample_out];
                kernels::im2col(
                    &x.data()[s * sample_in..(s + 1) * sample_in],
                    &geo,
                    oh,
                    ow,
                    &mut col,
                );
                kernels::gemm_nt(filters, positions, k, gs, &col, &mut dw);
                for (d, acc) in db.iter_mut().enumerate() {
                    *acc += gs[d * positions..(d + 1) * positions].iter().sum::<f64>();
                }
                if let Some(dx) = dx.as_mut() {
                    dcol.fill(0.0);
                    kernels::gemm_tn(k, filters, positions, w.data(), gs, &mut dcol);
                    kernels::col2im(
                        &dcol,
                        &geo,
                        oh,
                        ow,
                        &mut dx[s * sample_in..(s + 1) * sample_in],
                    );
                }
            }
            vec![dx, wants(1).then_some(dw), wants(2).then_some(db)]
        }
        Op::MaxPool2d => {
            let Cache::Argmax(argmax) = cache else {
                unreachable!("maxpool cache")
            };
            let mut dx = vec![0.0; input(0).len()];
            for (&idx, &gv) in argmax.iter().zip(g) {
                dx[idx] += gv;
            }
            vec![Some(dx)]
        }
        Op::Dense => {
            let (x, w) = (input(0), input(1));
            let (n, inp) = (x.shape()[0], x.shape()[1]);
            let out_w = w.shape()[0];
            let dx = wants(0).then(|| {
                let mut dx = vec![0.0; n * inp];
                kernels::gemm_nn(n, out_w, inp, g, w.data(), &mut dx);
                dx
            });
            let dw = wants(1).then(|| {
                let mut dw = vec![0.0; out_w * inp];
                kernels::gemm_tn(out_w, n, inp, g, x.data(), &mut dw);
                dw
            });
            let db = wants(2).then(|| {
                let mut db = vec![0.0; out_w];
                for row in g.chunks(out_w) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                db
            });
            vec![dx, dw, db]
        }
        Op::Dropout { .. } => match cache {
            Cache::Mask(mask) => vec![Some(g.iter().zip(mask).map(|(g, m)| g * m).collect())],
            _ => vec![Some(g.to_vec())],
        },
        Op::BatchNorm { .. } => {
            let Cache::BatchNorm {
                xhat,
                inv_std,
                batch_stats,
            } = cache
            else {
                unreachable!("batchnorm cache")
            };
            let x = input(0);
            let gamma = input(1).data();
            let c = gamma.len();
            let n = x.shape()[0];
            let spatial = x.len() / (n * c);
            let count = (n * spatial) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * spatial;
                    for i in off..off + spatial {
                        dbeta[ch] += g[i];
                        dgamma[ch] += g[i] * xhat[i];
                    }
                }
            }
            let mut dx = vec![0.0; x.len()];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * spatial;
                    let scale = gamma[ch] * inv_std[ch];
                    for i in off..off + spatial {
                        dx[i] = if *batch_stats {
                            scale / count * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                        } else {
                            scale * g[i]
                        };
                    }
                }
            }
            vec![
                Some(dx),
                wants(1).then_some(dgamma),
                wants(2).then_some(dbeta),
            ]
        }
        Op::CrossEntropy => {
            let Cache::Probs(probs) = cache else {
                unreachable!("cross-entropy cache")
            };
            let (logits, labels) = (input(0), input(1));
            let (n, c) = (logits.shape()[0], logits.shape()[1]);
            let scale = g[0] / n as f64;
            let mut dl = vec![0.0; n * c];
            for s in 0..n {
                let label = labels.data()[s] as usize;
                for j in 0..c {
                    let target = if j == label { 1.0 } else { 0.0 };
                    dl[s * c + j] = scale * (probs[s * c + j] - target);
                }
            }
            vec![Some(dl), None]
        }
        Op::RfavEntropy => {
            let Cache::Probs(probs) = cache else {
                unreachable!("entropy cache")
            };
            let x = input(0);
            let (n, d) = (x.shape()[0], x.shape()[1]);
            let positions = x.len() / (n * d);
            let mut dx = vec![0.0; x.len()];
            for s in 0..n {
                let base = s * d * positions;
                for k in 0..positions {
                    let h = out.data()[s * positions + k];
                    let gk = g[s * positions + k];
                    for l in 0..d {
                        let i = base + l * positions + k;
                        let p = probs[i];
                        dx[i] = -gk * p * (kernels::safe_ln(p) + h);
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::FilterCorrelation => {
            let Cache::Correlation {
                centered,
                sq_norms,
                valid,
            } = cache
            else {
                unreachable!("correlation cache")
            };
            let d = out.shape()[0];
            let m = centered.len() / d;
            let c = out.data();
            let norms: Vec<f64> = sq_norms.iter().map(|s| s.sqrt()).collect();
            // dL/dS for S = U·Uᵀ; the fixed diagonal contributes nothing.
            let mut ds = vec![0.0; d * d];
            for i in 0..d {
                if !valid[i] {
                    continue;
                }
                let mut diag = 0.0;
                for j in 0..d {
                    if j == i || !valid[j] {
                        continue;
                    }
                    ds[i * d + j] += g[i * d + j] / (norms[i] * norms[j]);
                    diag += g[i * d + j] * c[i * d + j] + g[j * d + i] * c[j * d + i];
                }
                ds[i * d + i] -= 0.5 * diag / sq_norms[i];
            }
            let mut sym = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    sym[i * d + j] = ds[i * d + j] + ds[j * d + i];
                }
            }
            let mut du = vec![0.0; d * m];
            kernels::gemm_nn(d, d, m, &sym, centered, &mut du);
            let mut mean = vec![0.0; m];
            for row in du.chunks(m) {
                for (acc, v) in mean.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for v in &mut mean {
                *v /= d as f64;
            }
            for row in du.chunks_mut(m) {
                for (v, mu) in row.iter_mut().zip(&mean) {
                    *v -= mu;
                }
            }
            vec![Some(du)]
        }
        Op::LowerTriangleSum { absolute } => {
            let c = input(0);
            let d = c.shape()[0];
            let mut dc = vec![0.0; d * d];
            for i in 0..d {
                for j in i + 1..d {
                    let v = c.data()[i * d + j];
                    dc[i * d + j] = if *absolute {
                        g[0] * if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    } else {
                        g[0]
                    };
                }
            }
            vec![Some(dc)]
        }
        Op::Input(_) | Op::Param(_) | Op::Constant(_) => unreachable!("leaf handled by caller"),
    };
    Ok(grads
        .into_iter()
        .enumerate()
        .map(|(k, gr)| gr.filter(|_| wants(k)))
        .collect())
}
