//! Reductions, batch normalization, activations, the dense layer, the
//! classification loss, and broadcasting multiply, together with their
//! backward formulas.

use super::{row_major_strides, Tensor};
use crate::error::{Error, Result};

/// Largest f32 strictly below 1; sigmoid output is clamped into
/// `[MIN_POSITIVE, SIGMOID_MAX]` so it stays strictly inside (0,1).
const SIGMOID_MAX: f32 = 1.0 - f32::EPSILON / 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Max,
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    if axes.is_empty() {
        return Err(Error::InvalidArgument("empty reduction axis set".into()));
    }
    let mut out = shape.to_vec();
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "axis {a} out of range for rank {}",
                shape.len()
            )));
        }
        out[a] = 1;
    }
    Ok(out)
}

/// Per-axis strides into the reduced tensor, zero along reduced axes.
fn collapse_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let out_strides = row_major_strides(out_shape);
    shape
        .iter()
        .zip(out_shape.iter().zip(&out_strides))
        .map(|(_, (&oe, &os))| if oe == 1 { 0 } else { os })
        .collect()
}

/// Mean or max over the given axes; reduced axes collapse to extent 1.
pub fn reduce(input: &Tensor, axes: &[usize], kind: Reduction) -> Result<Tensor> {
    match kind {
        Reduction::Mean => reduce_mean(input, axes),
        Reduction::Max => Ok(reduce_max_with_arg(input, axes)?.0),
    }
}

pub fn reduce_mean(input: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let shape = input.shape();
    let out_shape = reduced_shape(shape, axes)?;
    // count distinct reduced elements even if an axis is listed twice
    let count = {
        let mut seen = vec![false; shape.len()];
        let mut c = 1usize;
        for &a in axes {
            if !seen[a] {
                seen[a] = true;
                c *= shape[a];
            }
        }
        c
    };
    let strides = input.strides();
    let cstrides = collapse_strides(shape, &out_shape);
    let out_len: usize = out_shape.iter().product();
    let mut acc = vec![0.0f64; out_len];
    for flat in 0..input.len() {
        let mut rem = flat;
        let mut off = 0usize;
        for (s, cs) in strides.iter().zip(&cstrides) {
            let c = rem / s;
            rem %= s;
            off += c * cs;
        }
        acc[off] += input.data()[flat] as f64;
    }
    let inv = 1.0 / count as f64;
    Tensor::new(out_shape, acc.into_iter().map(|v| (v * inv) as f32).collect())
}

/// Max reduction returning, per output element, the flat input index of the
/// first maximal element in row-major order.
pub fn reduce_max_with_arg(input: &Tensor, axes: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let shape = input.shape();
    let out_shape = reduced_shape(shape, axes)?;
    let strides = input.strides();
    let cstrides = collapse_strides(shape, &out_shape);
    let out_len: usize = out_shape.iter().product();
    let mut best = vec![f32::NEG_INFINITY; out_len];
    let mut arg = vec![usize::MAX; out_len];
    for flat in 0..input.len() {
        let mut rem = flat;
        let mut off = 0usize;
        for (s, cs) in strides.iter().zip(&cstrides) {
            let c = rem / s;
            rem %= s;
            off += c * cs;
        }
        let v = input.data()[flat];
        if v > best[off] || arg[off] == usize::MAX {
            best[off] = v;
            arg[off] = flat;
        }
    }
    Ok((Tensor::new(out_shape, best)?, arg))
}

/// Gradient of `reduce`: mean spreads `grad/count`; max routes each output
/// gradient to its saved argmax position.
pub fn reduce_backward(
    grad_out: &Tensor,
    input_shape: &[usize],
    axes: &[usize],
    kind: Reduction,
    argmax: Option<&[usize]>,
) -> Result<Tensor> {
    let mut grad_in = Tensor::zeros(input_shape);
    match kind {
        Reduction::Mean => {
            let mut seen = vec![false; input_shape.len()];
            let mut count = 1usize;
            for &a in axes {
                if !seen[a] {
                    seen[a] = true;
                    count *= input_shape[a];
                }
            }
            let inv = 1.0 / count as f32;
            let strides = row_major_strides(input_shape);
            let cstrides = collapse_strides(input_shape, grad_out.shape());
            for flat in 0..grad_in.len() {
                let mut rem = flat;
                let mut off = 0usize;
                for (s, cs) in strides.iter().zip(&cstrides) {
                    let c = rem / s;
                    rem %= s;
                    off += c * cs;
                }
                grad_in.data_mut()[flat] = grad_out.data()[off] * inv;
            }
        }
        Reduction::Max => {
            let arg = argmax
                .ok_or_else(|| Error::InvalidArgument("max backward needs argmax".into()))?;
            for (o, &a) in arg.iter().enumerate() {
                grad_in.data_mut()[a] += grad_out.data()[o];
            }
        }
    }
    Ok(grad_in)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => input.map(|v| v.max(0.0)),
        Activation::Sigmoid => input.map(sigmoid_scalar),
    }
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    let v = 1.0 / (1.0 + (-x).exp());
    v.clamp(f32::MIN_POSITIVE, SIGMOID_MAX)
}

pub fn activation_backward(grad_out: &Tensor, input: &Tensor, output: &Tensor, kind: Activation) -> Tensor {
    let data = match kind {
        Activation::Relu => grad_out
            .data()
            .iter()
            .zip(input.data())
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect(),
        Activation::Sigmoid => grad_out
            .data()
            .iter()
            .zip(output.data())
            .map(|(&g, &y)| g * y * (1.0 - y))
            .collect(),
    };
    Tensor { shape: grad_out.shape().to_vec(), data }
}

/// Batch-normalization parameters plus running statistics.
#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f32,
    pub momentum: f32,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Statistics actually used to normalize (batch stats in train mode,
/// running stats in infer mode); saved for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub mode: BnMode,
}

/// Channel-wise batch normalization over `[N,C,...]`. In train mode the
/// batch statistics are used and the running statistics are updated by
/// exponential moving average in place.
pub fn batch_norm(
    input: &Tensor,
    params: &mut BatchNormParams,
    mode: BnMode,
) -> Result<(Tensor, BnSaved)> {
    let shape = input.shape();
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch("batch_norm input must be rank >=2".into()));
    }
    let c = shape[1];
    if params.gamma.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm channel mismatch: input C={} params C={:?}",
            c,
            params.gamma.shape()
        )));
    }
    let n = shape[0];
    let plane: usize = shape[2..].iter().product();
    let m = (n * plane) as f64;

    let (mean, var) = match mode {
        BnMode::Infer => (params.running_mean.data().to_vec(), params.running_var.data().to_vec()),
        BnMode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ci in 0..c {
                let mut s = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &input.data()[base..base + plane] {
                        s += v as f64;
                    }
                }
                mean[ci] = s / m;
                let mut sv = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for &v in &input.data()[base..base + plane] {
                        let d = v as f64 - mean[ci];
                        sv += d * d;
                    }
                }
                var[ci] = sv / m;
            }
            let mom = params.momentum as f64;
            for ci in 0..c {
                let rm = params.running_mean.data()[ci] as f64;
                let rv = params.running_var.data()[ci] as f64;
                params.running_mean.data_mut()[ci] = ((1.0 - mom) * rm + mom * mean[ci]) as f32;
                params.running_var.data_mut()[ci] = ((1.0 - mom) * rv + mom * var[ci]) as f32;
            }
            (mean.iter().map(|&v| v as f32).collect(), var.iter().map(|&v| v as f32).collect())
        }
    };

    let mut out = Tensor::zeros(shape);
    for ci in 0..c {
        let g = params.gamma.data()[ci];
        let b = params.beta.data()[ci];
        let mu = mean[ci];
        let inv_std = 1.0 / (var[ci] + params.epsilon).sqrt();
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            let src = &input.data()[base..base + plane];
            let dst = &mut out.data_mut()[base..base + plane];
            for i in 0..plane {
                dst[i] = g * (src[i] - mu) * inv_std + b;
            }
        }
    }
    Ok((out, BnSaved { mean, var, mode }))
}

/// Backward of `batch_norm`. In train mode this differentiates through the
/// batch statistics (full formula); in infer mode the statistics are
/// constants.
pub fn batch_norm_backward(
    grad_out: &Tensor,
    input: &Tensor,
    gamma: &Tensor,
    saved: &BnSaved,
    epsilon: f32,
) -> (Tensor, Tensor, Tensor) {
    let shape = input.shape();
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let m = (n * plane) as f64;

    let mut dx = Tensor::zeros(shape);
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];

    for ci in 0..c {
        let mu = saved.mean[ci] as f64;
        let inv_std = 1.0 / ((saved.var[ci] as f64) + epsilon as f64).sqrt();
        let g = gamma.data()[ci] as f64;

        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let dy = grad_out.data()[base + i] as f64;
                let xhat = (input.data()[base + i] as f64 - mu) * inv_std;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dgamma[ci] = sum_dy_xhat as f32;
        dbeta[ci] = sum_dy as f32;

        match saved.mode {
            BnMode::Infer => {
                let k = g * inv_std;
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        dx.data_mut()[base + i] = (grad_out.data()[base + i] as f64 * k) as f32;
                    }
                }
            }
            BnMode::Train => {
                for ni in 0..n {
                    let base = (ni * c + ci) * plane;
                    for i in 0..plane {
                        let dy = grad_out.data()[base + i] as f64;
                        let xhat = (input.data()[base + i] as f64 - mu) * inv_std;
                        let v = g * inv_std * (dy - sum_dy / m - xhat * sum_dy_xhat / m);
                        dx.data_mut()[base + i] = v as f32;
                    }
                }
            }
        }
    }
    (
        dx,
        Tensor { shape: vec![c], data: dgamma },
        Tensor { shape: vec![c], data: dbeta },
    )
}

/// Dense layer: `out[n,k] = bias[k] + sum_d input[n,d] * weight[k,d]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.len() != 2 || ws.len() != 2 || is[1] != ws[1] || bias.shape() != [ws[0]] {
        return Err(Error::ShapeMismatch(format!(
            "linear: input {is:?}, weight {ws:?}, bias {:?}",
            bias.shape()
        )));
    }
    let (n, d, k) = (is[0], is[1], ws[0]);
    let mut out = vec![0.0f32; n * k];
    for ni in 0..n {
        let row = &input.data()[ni * d..(ni + 1) * d];
        for ki in 0..k {
            let wrow = &weight.data()[ki * d..(ki + 1) * d];
            let mut acc = bias.data()[ki] as f64;
            for i in 0..d {
                acc += row[i] as f64 * wrow[i] as f64;
            }
            out[ni * k + ki] = acc as f32;
        }
    }
    Tensor::new(vec![n, k], out)
}

pub fn linear_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let k = weight.shape()[0];
    let mut din = vec![0.0f32; n * d];
    let mut dw = vec![0.0f32; k * d];
    let mut db = vec![0.0f32; k];
    for ni in 0..n {
        for ki in 0..k {
            let g = grad_out.data()[ni * k + ki];
            db[ki] += g;
            let wrow = &weight.data()[ki * d..(ki + 1) * d];
            let irow = &input.data()[ni * d..(ni + 1) * d];
            let drow = &mut din[ni * d..(ni + 1) * d];
            for i in 0..d {
                drow[i] += g * wrow[i];
            }
            let dwrow = &mut dw[ki * d..(ki + 1) * d];
            for i in 0..d {
                dwrow[i] += g * irow[i];
            }
        }
    }
    (
        Tensor { shape: vec![n, d], data: din },
        Tensor { shape: vec![k, d], data: dw },
        Tensor { shape: vec![k], data: db },
    )
}

/// Mean cross entropy with a numerically stable softmax. Returns the scalar
/// loss and the probability rows.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {s:?} vs {} labels",
            labels.len()
        )));
    }
    let (n, k) = (s[0], s[1]);
    for &l in labels {
        if l >= k {
            return Err(Error::LabelOutOfRange { label: l, classes: k });
        }
    }
    let mut probs = vec![0.0f32; n * k];
    let mut loss = 0.0f64;
    for ni in 0..n {
        let row = &logits.data()[ni * k..(ni + 1) * k];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut z = 0.0f64;
        for &v in row {
            z += ((v as f64) - mx).exp();
        }
        let log_z = z.ln() + mx;
        for (i, &v) in row.iter().enumerate() {
            probs[ni * k + i] = ((v as f64) - log_z).exp() as f32;
        }
        loss -= (row[labels[ni]] as f64) - log_z;
    }
    Ok(((loss / n as f64) as f32, Tensor { shape: vec![n, k], data: probs }))
}

/// `dlogits[n,k] = grad * (probs[n,k] - 1{k == label_n}) / N`
pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], grad: f32) -> Tensor {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = grad / n as f32;
    let mut d = probs.data().to_vec();
    for ni in 0..n {
        d[ni * k + labels[ni]] -= 1.0;
    }
    for v in &mut d {
        *v *= scale;
    }
    Tensor { shape: vec![n, k], data: d }
}

fn broadcast_out_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "broadcast requires equal rank: {a:?} vs {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(Error::ShapeMismatch(format!("incompatible extents {x} vs {y}")))
            }
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = row_major_strides(shape);
    shape
        .iter()
        .zip(strides.iter().zip(out_shape))
        .map(|(&e, (&s, &oe))| if e == 1 && oe > 1 { 0 } else { s })
        .collect()
}

/// Elementwise product with extent-1 axes replicated.
pub fn broadcast_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let out_shape = broadcast_out_shape(a.shape(), b.shape())?;
    let out_strides = row_major_strides(&out_shape);
    let astr = broadcast_strides(a.shape(), &out_shape);
    let bstr = broadcast_strides(b.shape(), &out_shape);
    let len: usize = out_shape.iter().product();
    let mut data = vec![0.0f32; len];
    for (flat, slot) in data.iter_mut().enumerate() {
        let mut rem = flat;
        let mut ao = 0usize;
        let mut bo = 0usize;
        for ((os, asx), bsx) in out_strides.iter().zip(&astr).zip(&bstr) {
            let c = rem / os;
            rem %= os;
            ao += c * asx;
            bo += c * bsx;
        }
        *slot = a.data()[ao] * b.data()[bo];
    }
    Tensor::new(out_shape, data)
}

/// Gradients of `broadcast_mul` for both operands: the counterpart factor
/// times the upstream gradient, summed over broadcast axes.
pub fn broadcast_mul_backward(grad_out: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let out_shape = grad_out.shape();
    let out_strides = row_major_strides(out_shape);
    let astr = broadcast_strides(a.shape(), out_shape);
    let bstr = broadcast_strides(b.shape(), out_shape);
    let mut da = vec![0.0f64; a.len()];
    let mut db = vec![0.0f64; b.len()];
    for flat in 0..grad_out.len() {
        let mut rem = flat;
        let mut ao = 0usize;
        let mut bo = 0usize;
        for ((os, asx), bsx) in out_strides.iter().zip(&astr).zip(&bstr) {
            let c = rem / os;
            rem %= os;
            ao += c * asx;
            bo += c * bsx;
        }
        let g = grad_out.data()[flat] as f64;
        da[ao] += g * b.data()[bo] as f64;
        db[bo] += g * a.data()[ao] as f64;
    }
    (
        Tensor { shape: a.shape().to_vec(), data: da.into_iter().map(|v| v as f32).collect() },
        Tensor { shape: b.shape().to_vec(), data: db.into_iter().map(|v| v as f32).collect() },
    )
}

/// Same-shape elementwise sum.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor { shape: a.shape().to_vec(), data })
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::InvalidArgument(format!("concat axis {axis} out of range")));
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
    for t in inputs {
        if t.rank() != rank
            || t.shape()
                .iter()
                .enumerate()
                .any(|(i, &e)| i != axis && e != first.shape()[i])
        {
            return Err(Error::ShapeMismatch("concat extents disagree off-axis".into()));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let e = t.shape()[axis];
            let base = o * e * inner;
            data.extend_from_slice(&t.data()[base..base + e * inner]);
        }
    }
    Tensor::new(out_shape, data)
}

/// Contiguous slice along `axis` (inverse of `concat` for the backward pass).
pub fn slice_axis(input: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let shape = input.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(Error::InvalidArgument(format!(
            "slice [{start}, {start}+{len}) out of range on axis {axis} of {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let e = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * e + start) * inner;
        data.extend_from_slice(&input.data()[base..base + len * inner]);
    }
    Tensor::new(out_shape, data)
}
