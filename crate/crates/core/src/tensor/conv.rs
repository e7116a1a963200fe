//! Direct 3D convolution and its gradients.
//!
//! Loops are arranged with the kernel position outermost and the innermost
//! loop running along the contiguous width axis, with a per-plane `f64`
//! accumulation buffer. Every output element is accumulated in a fixed
//! order by exactly one task, so results are bit-identical at any thread
//! count.

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};

/// Weights and geometry of one 3D convolution.
#[derive(Clone, Debug)]
pub struct ConvParams {
    /// `[C_out, C_in, k_t, k_h, k_w]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Option<Tensor>,
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

impl ConvParams {
    pub fn new(
        weight: Tensor,
        bias: Option<Tensor>,
        stride: (usize, usize, usize),
        padding: (usize, usize, usize),
    ) -> Result<Self> {
        if weight.rank() != 5 {
            return Err(Error::ShapeMismatch(format!(
                "conv weight must be rank 5, got {:?}",
                weight.shape()
            )));
        }
        if stride.0 == 0 || stride.1 == 0 || stride.2 == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::ShapeMismatch(format!(
                    "bias shape {:?} does not match C_out {}",
                    b.shape(),
                    weight.shape()[0]
                )));
            }
        }
        Ok(ConvParams { weight, bias, stride, padding })
    }

    /// "Same" padding: stride 1, p = (k-1)/2 per axis, odd kernels only.
    pub fn same(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let ks = weight.shape().to_vec();
        if ks.len() != 5 {
            return Err(Error::ShapeMismatch("conv weight must be rank 5".into()));
        }
        for &k in &ks[2..] {
            if k % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "same padding requires odd kernel extents, got {:?}",
                    &ks[2..]
                )));
            }
        }
        let padding = ((ks[2] - 1) / 2, (ks[3] - 1) / 2, (ks[4] - 1) / 2);
        ConvParams::new(weight, bias, (1, 1, 1), padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn out_extent(input: usize, k: usize, p: usize, s: usize) -> Result<usize> {
    let numer = input as i64 + 2 * p as i64 - k as i64;
    if numer < 0 {
        return Err(Error::ShapeMismatch(format!(
            "kernel {k} larger than padded input {input}+2*{p}"
        )));
    }
    let o = numer as usize / s + 1;
    if o == 0 {
        return Err(Error::ShapeMismatch("non-positive conv output extent".into()));
    }
    Ok(o)
}

/// Output shape of `conv3d` for a `[N,C_in,T,H,W]` input.
pub fn conv3d_out_shape(input_shape: &[usize], params: &ConvParams) -> Result<[usize; 5]> {
    if input_shape.len() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "conv3d input must be rank 5, got {input_shape:?}"
        )));
    }
    let w = params.weight.shape();
    if input_shape[1] != w[1] {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels but weight expects {}",
            input_shape[1], w[1]
        )));
    }
    Ok([
        input_shape[0],
        w[0],
        out_extent(input_shape[2], w[2], params.padding.0, params.stride.0)?,
        out_extent(input_shape[3], w[3], params.padding.1, params.stride.1)?,
        out_extent(input_shape[4], w[4], params.padding.2, params.stride.2)?,
    ])
}

/// Valid output index range along one axis for kernel offset `k`:
/// positions `o` with `0 <= o*s + k - p < input`.
fn valid_range(input: usize, out: usize, k: usize, p: usize, s: usize) -> (usize, usize) {
    let s = s as i64;
    let lo_num = p as i64 - k as i64;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
    let hi_num = input as i64 - 1 + p as i64 - k as i64;
    if hi_num < 0 {
        return (1, 0); // empty
    }
    let hi = (hi_num / s).min(out as i64 - 1);
    if lo > hi {
        (1, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

const PAR_WORK_THRESHOLD: usize = 1 << 20;

/// Zero-padded strided 3D convolution over `[N,C_in,T,H,W]`.
pub fn conv3d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let ishape = input.shape();
    let oshape = conv3d_out_shape(ishape, params)?;
    let [n_batch, c_out, ot, oh, ow] = oshape;
    let (c_in, t, h, w) = (ishape[1], ishape[2], ishape[3], ishape[4]);
    let ws = params.weight.shape();
    let (kt, kh, kw) = (ws[2], ws[3], ws[4]);
    let (st, sh, sw) = params.stride;
    let (pt, ph, pw) = params.padding;

    let in_plane = t * h * w;
    let out_plane = ot * oh * ow;
    let wvol = c_in * kt * kh * kw;
    let wdata = params.weight.data();
    let idata = input.data();

    let mut out = vec![0.0f32; n_batch * c_out * out_plane];
    let work = out.len() * wvol;

    let fill_plane = |plane_idx: usize, out_chunk: &mut [f32]| {
        let n = plane_idx / c_out;
        let co = plane_idx % c_out;
        let bias = params.bias.as_ref().map(|b| b.data()[co] as f64).unwrap_or(0.0);
        let mut acc = vec![bias; out_plane];
        let in_base = n * c_in * in_plane;
        let w_base = co * wvol;
        for ci in 0..c_in {
            let iplane = &idata[in_base + ci * in_plane..in_base + (ci + 1) * in_plane];
            for ikt in 0..kt {
                let (t_lo, t_hi) = valid_range(t, ot, ikt, pt, st);
                for ikh in 0..kh {
                    let (h_lo, h_hi) = valid_range(h, oh, ikh, ph, sh);
                    for ikw in 0..kw {
                        let (w_lo, w_hi) = valid_range(w, ow, ikw, pw, sw);
                        if t_lo > t_hi || h_lo > h_hi || w_lo > w_hi {
                            continue;
                        }
                        let wv =
                            wdata[w_base + ((ci * kt + ikt) * kh + ikh) * kw + ikw] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let nw = w_hi - w_lo + 1;
                        for to in t_lo..=t_hi {
                            let ti = to * st + ikt - pt;
                            for ho in h_lo..=h_hi {
                                let hi = ho * sh + ikh - ph;
                                let irow = ti * h * w + hi * w + (w_lo * sw + ikw - pw);
                                let orow = to * oh * ow + ho * ow + w_lo;
                                let a = &mut acc[orow..orow + nw];
                                if sw == 1 {
                                    let src = &iplane[irow..irow + nw];
                                    for i in 0..nw {
                                        a[i] += wv * src[i] as f64;
                                    }
                                } else {
                                    for i in 0..nw {
                                        a[i] += wv * iplane[irow + i * sw] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for (dst, &v) in out_chunk.iter_mut().zip(&acc) {
            *dst = v as f32;
        }
    };

    if work >= PAR_WORK_THRESHOLD {
        out.par_chunks_mut(out_plane).enumerate().for_each(|(i, chunk)| fill_plane(i, chunk));
    } else {
        for (i, chunk) in out.chunks_mut(out_plane).enumerate() {
            fill_plane(i, chunk);
        }
    }

    Tensor::new(oshape.to_vec(), out)
}

/// Gradient of `conv3d` with respect to its input.
pub fn conv3d_grad_input(
    grad_out: &Tensor,
    weight: &Tensor,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
    input_shape: &[usize],
) -> Result<Tensor> {
    let gshape = grad_out.shape();
    let [n_batch, c_in, t, h, w] =
        [input_shape[0], input_shape[1], input_shape[2], input_shape[3], input_shape[4]];
    let ws = weight.shape();
    let (c_out, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let (ot, oh, ow) = (gshape[2], gshape[3], gshape[4]);
    let (st, sh, sw) = stride;
    let (pt, ph, pw) = padding;

    let in_plane = t * h * w;
    let out_plane = ot * oh * ow;
    let wvol = c_in * kt * kh * kw;
    let wdata = weight.data();
    let gdata = grad_out.data();

    let mut grad_in = vec![0.0f32; n_batch * c_in * in_plane];
    let work = grad_in.len() * c_out * kt * kh * kw;

    let fill_plane = |plane_idx: usize, chunk: &mut [f32]| {
        let n = plane_idx / c_in;
        let ci = plane_idx % c_in;
        let mut acc = vec![0.0f64; in_plane];
        let g_base = n * c_out * out_plane;
        for co in 0..c_out {
            let gplane = &gdata[g_base + co * out_plane..g_base + (co + 1) * out_plane];
            let w_base = co * wvol + ci * kt * kh * kw;
            for ikt in 0..kt {
                let (t_lo, t_hi) = valid_range(t, ot, ikt, pt, st);
                for ikh in 0..kh {
                    let (h_lo, h_hi) = valid_range(h, oh, ikh, ph, sh);
                    for ikw in 0..kw {
                        let (w_lo, w_hi) = valid_range(w, ow, ikw, pw, sw);
                        if t_lo > t_hi || h_lo > h_hi || w_lo > w_hi {
                            continue;
                        }
                        let wv = wdata[w_base + (ikt * kh + ikh) * kw + ikw] as f64;
                        if wv == 0.0 {
                            continue;
                        }
                        let nw = w_hi - w_lo + 1;
                        for to in t_lo..=t_hi {
                            let ti = to * st + ikt - pt;
                            for ho in h_lo..=h_hi {
                                let hi = ho * sh + ikh - ph;
                                let irow = ti * h * w + hi * w + (w_lo * sw + ikw - pw);
                                let grow = to * oh * ow + ho * ow + w_lo;
                                let g = &gplane[grow..grow + nw];
                                if sw == 1 {
                                    let a = &mut acc[irow..irow + nw];
                                    for i in 0..nw {
                                        a[i] += wv * g[i] as f64;
                                    }
                                } else {
                                    for i in 0..nw {
                                        acc[irow + i * sw] += wv * g[i] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for (dst, &v) in chunk.iter_mut().zip(&acc) {
            *dst = v as f32;
        }
    };

    if work >= PAR_WORK_THRESHOLD {
        grad_in.par_chunks_mut(in_plane).enumerate().for_each(|(i, c)| fill_plane(i, c));
    } else {
        for (i, c) in grad_in.chunks_mut(in_plane).enumerate() {
            fill_plane(i, c);
        }
    }

    Tensor::new(input_shape.to_vec(), grad_in)
}

/// Gradient of `conv3d` with respect to its weight.
pub fn conv3d_grad_weight(
    input: &Tensor,
    grad_out: &Tensor,
    stride: (usize, usize, usize),
    padding: (usize, usize, usize),
    kernel: (usize, usize, usize),
) -> Result<Tensor> {
    let ishape = input.shape();
    let gshape = grad_out.shape();
    let (n_batch, c_in, t, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3], ishape[4]);
    let (c_out, ot, oh, ow) = (gshape[1], gshape[2], gshape[3], gshape[4]);
    let (kt, kh, kw) = kernel;
    let (st, sh, sw) = stride;
    let (pt, ph, pw) = padding;

    let in_plane = t * h * w;
    let out_plane = ot * oh * ow;
    let idata = input.data();
    let gdata = grad_out.data();

    let kvol = kt * kh * kw;
    let mut grad_w = vec![0.0f32; c_out * c_in * kvol];
    let work = grad_w.len() * n_batch * out_plane;

    let fill_pair = |pair_idx: usize, chunk: &mut [f32]| {
        let co = pair_idx / c_in;
        let ci = pair_idx % c_in;
        let mut acc = vec![0.0f64; kvol];
        for n in 0..n_batch {
            let iplane = &idata[(n * c_in + ci) * in_plane..(n * c_in + ci + 1) * in_plane];
            let gplane = &gdata[(n * c_out + co) * out_plane..(n * c_out + co + 1) * out_plane];
            for ikt in 0..kt {
                let (t_lo, t_hi) = valid_range(t, ot, ikt, pt, st);
                for ikh in 0..kh {
                    let (h_lo, h_hi) = valid_range(h, oh, ikh, ph, sh);
                    for ikw in 0..kw {
                        let (w_lo, w_hi) = valid_range(w, ow, ikw, pw, sw);
                        if t_lo > t_hi || h_lo > h_hi || w_lo > w_hi {
                            continue;
                        }
                        let nw = w_hi - w_lo + 1;
                        let mut sum = 0.0f64;
                        for to in t_lo..=t_hi {
                            let ti = to * st + ikt - pt;
                            for ho in h_lo..=h_hi {
                                let hi = ho * sh + ikh - ph;
                                let irow = ti * h * w + hi * w + (w_lo * sw + ikw - pw);
                                let grow = to * oh * ow + ho * ow + w_lo;
                                let g = &gplane[grow..grow + nw];
                                if sw == 1 {
                                    let src = &iplane[irow..irow + nw];
                                    for i in 0..nw {
                                        sum += g[i] as f64 * src[i] as f64;
                                    }
                                } else {
                                    for i in 0..nw {
                                        sum += g[i] as f64 * iplane[irow + i * sw] as f64;
                                    }
                                }
                            }
                        }
                        acc[(ikt * kh + ikh) * kw + ikw] += sum;
                    }
                }
            }
        }
        for (dst, &v) in chunk.iter_mut().zip(&acc) {
            *dst = v as f32;
        }
    };

    if work >= PAR_WORK_THRESHOLD {
        grad_w.par_chunks_mut(kvol).enumerate().for_each(|(i, c)| fill_pair(i, c));
    } else {
        for (i, c) in grad_w.chunks_mut(kvol).enumerate() {
            fill_pair(i, c);
        }
    }

    Tensor::new(vec![c_out, c_in, kt, kh, kw], grad_w)
}

/// Gradient of `conv3d` with respect to its bias: sum of `grad_out` over
/// everything but the channel axis.
pub fn conv3d_grad_bias(grad_out: &Tensor) -> Result<Tensor> {
    let s = grad_out.shape();
    let (n_batch, c_out) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let gdata = grad_out.data();
    let mut out = vec![0.0f32; c_out];
    for co in 0..c_out {
        let mut sum = 0.0f64;
        for n in 0..n_batch {
            let base = (n * c_out + co) * plane;
            for &g in &gdata[base..base + plane] {
                sum += g as f64;
            }
        }
        out[co] = sum as f32;
    }
    Tensor::new(vec![c_out], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Six-nested-loop direct convolution, independent of the kernel above.
    pub fn conv3d_oracle(input: &Tensor, p: &ConvParams) -> Tensor {
        let is = input.shape();
        let ws = p.weight.shape();
        let (n_b, c_in, t, h, w) = (is[0], is[1], is[2], is[3], is[4]);
        let (c_out, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        let (st, sh, sw) = p.stride;
        let (pt, ph, pw) = p.padding;
        let ot = (t + 2 * pt - kt) / st + 1;
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        let mut out = Tensor::zeros(&[n_b, c_out, ot, oh, ow]);
        for n in 0..n_b {
            for co in 0..c_out {
                for to in 0..ot {
                    for ho in 0..oh {
                        for wo in 0..ow {
                            let mut acc =
                                p.bias.as_ref().map(|b| b.data()[co] as f64).unwrap_or(0.0);
                            for ci in 0..c_in {
                                for i in 0..kt {
                                    for j in 0..kh {
                                        for k in 0..kw {
                                            let ti = (to * st + i) as i64 - pt as i64;
                                            let hi = (ho * sh + j) as i64 - ph as i64;
                                            let wi = (wo * sw + k) as i64 - pw as i64;
                                            if ti < 0
                                                || hi < 0
                                                || wi < 0
                                                || ti >= t as i64
                                                || hi >= h as i64
                                                || wi >= w as i64
                                            {
                                                continue;
                                            }
                                            let iv = input.at(&[
                                                n,
                                                ci,
                                                ti as usize,
                                                hi as usize,
                                                wi as usize,
                                            ]);
                                            let wv = p.weight.at(&[co, ci, i, j, k]);
                                            acc += iv as f64 * wv as f64;
                                        }
                                    }
                                }
                            }
                            out.set(&[n, co, to, ho, wo], acc as f32);
                        }
                    }
                }
            }
        }
        out
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f32 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
            .fold(0.0f32, f32::max)
    }

    #[test]
    fn identity_1x1x1_kernel() {
        let input = Tensor::new(vec![1, 1, 2, 3, 3], (0..18).map(|v| v as f32).collect()).unwrap();
        let p = ConvParams::new(
            Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).unwrap(),
            None,
            (1, 1, 1),
            (0, 0, 0),
        )
        .unwrap();
        let out = conv3d(&input, &p).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn centered_delta_kernel_same_padding() {
        let input = Tensor::new(vec![1, 1, 3, 4, 4], (0..48).map(|v| v as f32 - 10.0).collect())
            .unwrap();
        let mut w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        w.set(&[0, 0, 1, 1, 1], 1.0);
        let p = ConvParams::same(w, None).unwrap();
        let out = conv3d(&input, &p).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let input = Tensor::new(
            vec![1, 2, 4, 5, 5],
            (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let weight = Tensor::new(
            vec![3, 2, 3, 3, 3],
            (0..162).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let bias = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        for (stride, pad) in [((1, 1, 1), (1, 1, 1)), ((2, 2, 2), (1, 1, 1)), ((1, 2, 1), (0, 1, 1))]
        {
            let p = ConvParams::new(weight.clone(), Some(bias.clone()), stride, pad).unwrap();
            let got = conv3d(&input, &p).unwrap();
            let want = conv3d_oracle(&input, &p);
            assert_eq!(got.shape(), want.shape());
            assert!(rel_err(&got, &want) < 1e-5);
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_degenerate_output() {
        let input = Tensor::zeros(&[1, 2, 4, 4, 4]);
        let p = ConvParams::new(Tensor::zeros(&[1, 3, 1, 1, 1]), None, (1, 1, 1), (0, 0, 0))
            .unwrap();
        assert!(conv3d(&input, &p).is_err());
        let p = ConvParams::new(Tensor::zeros(&[1, 2, 5, 5, 5]), None, (1, 1, 1), (0, 0, 0))
            .unwrap();
        assert!(conv3d(&input, &p).is_err());
    }
}
