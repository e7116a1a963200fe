//! Channel and spatio-temporal attention blocks.
//!
//! The spatio-temporal map pools across channels (mean and max), stacks the
//! two descriptors, and pushes them through one cubic "same"-padded
//! convolution and a sigmoid. The channel map pools globally over the
//! spatio-temporal axes and feeds both descriptors through a shared
//! squeeze/excite sub-network, realized either as 1x1x1 convolutions (SCNN)
//! or as dense layers on the flattened descriptor (SMLP); the two are
//! algebraically identical for equal weight values.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_mul, ConvParams, Tensor};
use crate::training::xavier_uniform;

/// Spatio-temporal attention: one `2 -> 1` channel cubic convolution.
#[derive(Clone, Debug)]
pub struct STAttentionParams {
    pub conv: ConvParams,
}

impl STAttentionParams {
    pub fn new(conv: ConvParams) -> Result<Self> {
        let ws = conv.weight.shape();
        let k = ws[2];
        if ws[0] != 1 || ws[1] != 2 {
            return Err(Error::InvalidArgument(format!(
                "spatio-temporal attention conv must map 2 channels to 1, got {ws:?}"
            )));
        }
        if ws[3] != k || ws[4] != k || k % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "spatio-temporal attention kernel must be cubic and odd, got {ws:?}"
            )));
        }
        if conv.stride != (1, 1, 1) || conv.padding != ((k - 1) / 2, (k - 1) / 2, (k - 1) / 2) {
            return Err(Error::InvalidArgument(
                "spatio-temporal attention conv must be stride 1 with same padding".into(),
            ));
        }
        Ok(STAttentionParams { conv })
    }

    pub fn init(kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        let fan = 2 * kernel * kernel * kernel;
        let weight = xavier_uniform(&[1, 2, kernel, kernel, kernel], fan, kernel * kernel * kernel, rng);
        let bias = Tensor::zeros(&[1]);
        STAttentionParams::new(ConvParams::same(weight, Some(bias))?)
    }

    pub fn kernel_size(&self) -> usize {
        self.conv.weight.shape()[2]
    }
}

/// Shared sub-network realization for channel attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelVariant {
    Scnn,
    Smlp,
}

impl std::fmt::Display for ChannelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChannelVariant::Scnn => write!(f, "scnn"),
            ChannelVariant::Smlp => write!(f, "smlp"),
        }
    }
}

/// Number of bottleneck channels: `C / r`, clamped to 1 with an advisory
/// diagnostic when `C < r`.
pub fn squeeze_channels(channels: usize, reduction: usize) -> Result<usize> {
    if channels < reduction {
        log::warn!(
            "channel attention: {channels} channels < reduction ratio {reduction}; clamping squeeze extent to 1"
        );
        return Ok(1);
    }
    if channels % reduction != 0 {
        return Err(Error::InvalidArgument(format!(
            "channel count {channels} not divisible by reduction ratio {reduction}"
        )));
    }
    Ok(channels / reduction)
}

/// Squeeze/excite weights shared by the average- and max-pooled descriptors.
#[derive(Clone, Debug)]
pub struct ChannelAttentionParams {
    pub variant: ChannelVariant,
    /// SCNN: `[C/r, C, 1, 1, 1]`; SMLP: `[C/r, C]`
    pub squeeze_weight: Tensor,
    pub squeeze_bias: Tensor,
    /// SCNN: `[C, C/r, 1, 1, 1]`; SMLP: `[C, C/r]`
    pub excite_weight: Tensor,
    pub excite_bias: Tensor,
    pub reduction: usize,
}

impl ChannelAttentionParams {
    pub fn init(
        channels: usize,
        reduction: usize,
        variant: ChannelVariant,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mid = squeeze_channels(channels, reduction)?;
        let (s_shape, e_shape): (Vec<usize>, Vec<usize>) = match variant {
            ChannelVariant::Scnn => (vec![mid, channels, 1, 1, 1], vec![channels, mid, 1, 1, 1]),
            ChannelVariant::Smlp => (vec![mid, channels], vec![channels, mid]),
        };
        Ok(ChannelAttentionParams {
            variant,
            squeeze_weight: xavier_uniform(&s_shape, channels, mid, rng),
            squeeze_bias: Tensor::zeros(&[mid]),
            excite_weight: xavier_uniform(&e_shape, mid, channels, rng),
            excite_bias: Tensor::zeros(&[channels]),
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.excite_bias.shape()[0]
    }
}

/// Tape-level spatio-temporal attention map for `F [N,C,T,H,W]`:
/// `sigmoid(conv(concat(mean_c(F); max_c(F))))`, shape `[N,1,T,H,W]`.
pub fn st_attention_map_on(
    tape: &mut Tape,
    feature: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let ws = tape.value(weight).shape().to_vec();
    let k = ws[2];
    let pad = (k - 1) / 2;
    let avg = tape.reduce_mean(feature, &[1])?;
    let max = tape.reduce_max(feature, &[1])?;
    let stacked = tape.concat(&[avg, max], 1)?;
    let conv = tape.conv3d(stacked, weight, Some(bias), (1, 1, 1), (pad, pad, pad))?;
    Ok(tape.sigmoid(conv))
}

/// Tape-level channel attention map for `F' [N,C,T,H,W]`:
/// `sigmoid(excite(relu(squeeze(avg))) + excite(relu(squeeze(max))))`,
/// shape `[N,C,1,1,1]`, with the same squeeze/excite weights on both paths.
pub fn channel_attention_map_on(
    tape: &mut Tape,
    feature: Var,
    variant: ChannelVariant,
    squeeze_weight: Var,
    squeeze_bias: Var,
    excite_weight: Var,
    excite_bias: Var,
) -> Result<Var> {
    let shape = tape.value(feature).shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let avg = tape.reduce_mean(feature, &[2, 3, 4])?;
    let max = tape.reduce_max(feature, &[2, 3, 4])?;

    let shared = |tape: &mut Tape, descr: Var| -> Result<Var> {
        match variant {
            ChannelVariant::Scnn => {
                let s = tape.conv3d(descr, squeeze_weight, Some(squeeze_bias), (1, 1, 1), (0, 0, 0))?;
                let r = tape.relu(s);
                tape.conv3d(r, excite_weight, Some(excite_bias), (1, 1, 1), (0, 0, 0))
            }
            ChannelVariant::Smlp => {
                let flat = tape.reshape(descr, &[n, c])?;
                let s = tape.linear(flat, squeeze_weight, squeeze_bias)?;
                let r = tape.relu(s);
                let e = tape.linear(r, excite_weight, excite_bias)?;
                tape.reshape(e, &[n, c, 1, 1, 1])
            }
        }
    };

    let ea = shared(tape, avg)?;
    let em = shared(tape, max)?;
    let sum = tape.add(ea, em)?;
    Ok(tape.sigmoid(sum))
}

/// `F [N,C,T,H,W]` re-weighted per position by `A_st [N,1,T,H,W]`.
pub fn apply_spatiotemporal(feature: &Tensor, map: &Tensor) -> Result<Tensor> {
    let (fs, ms) = (feature.shape(), map.shape());
    if ms.len() != 5 || ms[1] != 1 || ms[0] != fs[0] || ms[2..] != fs[2..] {
        return Err(Error::ShapeMismatch(format!(
            "spatio-temporal map {ms:?} does not match feature {fs:?}"
        )));
    }
    broadcast_mul(feature, map)
}

/// `F' [N,C,T,H,W]` re-weighted per channel by `A_ch [N,C,1,1,1]`.
pub fn apply_channel(feature: &Tensor, map: &Tensor) -> Result<Tensor> {
    let (fs, ms) = (feature.shape(), map.shape());
    if ms.len() != 5 || ms[0] != fs[0] || ms[1] != fs[1] || ms[2..] != [1, 1, 1] {
        return Err(Error::ShapeMismatch(format!(
            "channel map {ms:?} does not match feature {fs:?}"
        )));
    }
    broadcast_mul(feature, map)
}

/// Standalone spatio-temporal attention map (runs a private tape).
pub fn st_attention_map(feature: &Tensor, params: &STAttentionParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.constant(feature.clone());
    let w = tape.constant(params.conv.weight.clone());
    let b = tape.constant(
        params.conv.bias.clone().unwrap_or_else(|| Tensor::zeros(&[1])),
    );
    let out = st_attention_map_on(&mut tape, f, w, b)?;
    Ok(tape.value(out).clone())
}

/// Standalone channel attention map (runs a private tape).
pub fn channel_attention_map(feature: &Tensor, params: &ChannelAttentionParams) -> Result<Tensor> {
    if feature.shape()[1] != params.channels() {
        return Err(Error::ShapeMismatch(format!(
            "feature has {} channels, params expect {}",
            feature.shape()[1],
            params.channels()
        )));
    }
    let mut tape = Tape::new();
    let f = tape.constant(feature.clone());
    let sw = tape.constant(params.squeeze_weight.clone());
    let sb = tape.constant(params.squeeze_bias.clone());
    let ew = tape.constant(params.excite_weight.clone());
    let eb = tape.constant(params.excite_bias.clone());
    let out = channel_attention_map_on(&mut tape, f, params.variant, sw, sb, ew, eb)?;
    Ok(tape.value(out).clone())
}
