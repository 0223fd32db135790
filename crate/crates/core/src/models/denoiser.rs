//! Noise-prediction UNet and the zero-convolution control branch.

use rand::Rng;

use super::spec::{ControlBranchSpec, DenoiserSpec};
use crate::error::Result;
use crate::nn::layers::{timestep_embedding, Conv2d, CrossAttention, GroupNorm, Linear, ResBlock};
use crate::nn::{Graph, ParamBuilder, Var};

pub const DENOISER_PREFIX: &str = "denoiser";
pub const ENCODER_PREFIX: &str = "denoiser.encoder";
pub const CONTROL_PREFIX: &str = "control";
pub const CONTROL_ENCODER_PREFIX: &str = "control.encoder";

#[derive(Debug, Clone)]
struct EncoderLevel {
    res: ResBlock,
    attn: Option<CrossAttention>,
    down: Option<Conv2d>,
}

/// Input convolution, time MLP, downsampling levels and the middle block.
#[derive(Debug, Clone)]
pub struct EncoderPath {
    temb_dim: usize,
    conv_in: Conv2d,
    time1: Linear,
    time2: Linear,
    levels: Vec<EncoderLevel>,
    mid: ResBlock,
    mid_attn: Option<CrossAttention>,
}

/// Encoder activations consumed by the decoder.
pub struct EncoderOutput {
    pub skips: Vec<Var>,
    pub mid: Var,
    pub temb: Var,
}

impl EncoderPath {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, spec: &DenoiserSpec) -> Result<Self> {
        let td = spec.timestep_embedding_dim;
        let conv_in = Conv2d::new(&mut b.pp("conv_in"), spec.in_channels, spec.channels(0), 3, 1)?;
        let time1 = Linear::new(&mut b.pp("time1"), td, td, true)?;
        let time2 = Linear::new(&mut b.pp("time2"), td, td, true)?;
        let mut levels = Vec::with_capacity(spec.depth);
        let mut prev = spec.channels(0);
        for i in 0..spec.depth {
            let ch = spec.channels(i);
            let mut lb = b.pp(format!("level{i}"));
            levels.push(EncoderLevel {
                res: ResBlock::new(&mut lb.pp("res"), prev, ch, Some(td))?,
                attn: if spec.has_attention(i) {
                    Some(CrossAttention::new(&mut lb.pp("attn"), ch, spec.context_dim)?)
                } else {
                    None
                },
                down: if i + 1 < spec.depth {
                    Some(Conv2d::new(&mut lb.pp("down"), ch, ch, 3, 2)?)
                } else {
                    None
                },
            });
            prev = ch;
        }
        let last = spec.depth - 1;
        Ok(Self {
            temb_dim: td,
            conv_in,
            time1,
            time2,
            levels,
            mid: ResBlock::new(&mut b.pp("mid"), prev, prev, Some(td))?,
            mid_attn: if spec.has_attention(last) {
                Some(CrossAttention::new(&mut b.pp("mid_attn"), prev, spec.context_dim)?)
            } else {
                None
            },
        })
    }

    /// `hint` is added after the input convolution.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        ts: &[usize],
        context: Option<Var>,
        hint: Option<Var>,
    ) -> Result<EncoderOutput> {
        let sin = g.constant(timestep_embedding(ts, self.temb_dim));
        let t = self.time1.forward(g, sin)?;
        let t = g.silu(t);
        let temb = self.time2.forward(g, t)?;
        let mut h = self.conv_in.forward(g, x)?;
        if let Some(hint) = hint {
            h = g.add(h, hint)?;
        }
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            h = level.res.forward(g, h, Some(temb))?;
            if let (Some(a), Some(c)) = (&level.attn, context) {
                h = a.forward(g, h, c)?;
            }
            skips.push(h);
            if let Some(d) = &level.down {
                h = d.forward(g, h)?;
            }
        }
        h = self.mid.forward(g, h, Some(temb))?;
        if let (Some(a), Some(c)) = (&self.mid_attn, context) {
            h = a.forward(g, h, c)?;
        }
        Ok(EncoderOutput { skips, mid: h, temb })
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    res: ResBlock,
    attn: Option<CrossAttention>,
    up: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct DecoderPath {
    levels: Vec<DecoderLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl DecoderPath {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, spec: &DenoiserSpec) -> Result<Self> {
        let td = spec.timestep_embedding_dim;
        let mut levels = Vec::with_capacity(spec.depth);
        let mut prev = spec.channels(spec.depth - 1);
        for i in (0..spec.depth).rev() {
            let ch = spec.channels(i);
            let mut lb = b.pp(format!("level{i}"));
            levels.push(DecoderLevel {
                res: ResBlock::new(&mut lb.pp("res"), prev + ch, ch, Some(td))?,
                attn: if spec.has_attention(i) {
                    Some(CrossAttention::new(&mut lb.pp("attn"), ch, spec.context_dim)?)
                } else {
                    None
                },
                up: if i > 0 {
                    Some(Conv2d::new(&mut lb.pp("up"), ch, spec.channels(i - 1), 3, 1)?)
                } else {
                    None
                },
            });
            prev = if i > 0 { spec.channels(i - 1) } else { ch };
        }
        Ok(Self {
            levels,
            norm_out: GroupNorm::new(&mut b.pp("norm_out"), spec.channels(0))?,
            conv_out: Conv2d::new(&mut b.pp("conv_out"), spec.channels(0), spec.in_channels, 3, 1)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, enc: &EncoderOutput, context: Option<Var>) -> Result<Var> {
        let mut h = enc.mid;
        for (level, &skip) in self.levels.iter().zip(enc.skips.iter().rev()) {
            h = g.concat(h, skip)?;
            h = level.res.forward(g, h, Some(enc.temb))?;
            if let (Some(a), Some(c)) = (&level.attn, context) {
                h = a.forward(g, h, c)?;
            }
            if let Some(up) = &level.up {
                h = g.upsample2(h)?;
                h = up.forward(g, h)?;
            }
        }
        let h = self.norm_out.forward(g, h)?;
        let h = g.silu(h);
        self.conv_out.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub encoder: EncoderPath,
    pub decoder: DecoderPath,
}

impl Denoiser {
    /// `b` should be rooted at [`DENOISER_PREFIX`].
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, spec: &DenoiserSpec) -> Result<Self> {
        Ok(Self {
            encoder: EncoderPath::new(&mut b.pp("encoder"), spec)?,
            decoder: DecoderPath::new(&mut b.pp("decoder"), spec)?,
        })
    }

    /// Predicts noise for `x[N, C, h, w]`. With `control`, the branch's
    /// residuals are added to every skip and to the middle activation.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        ts: &[usize],
        context: Option<Var>,
        control: Option<(&ControlBranch, Var)>,
    ) -> Result<Var> {
        let mut enc = self.encoder.forward(g, x, ts, context, None)?;
        if let Some((branch, cond)) = control {
            let (skips, mid) = branch.residuals(g, x, ts, context, cond)?;
            for (s, r) in enc.skips.iter_mut().zip(skips) {
                *s = g.add(*s, r)?;
            }
            enc.mid = g.add(enc.mid, mid)?;
        }
        self.decoder.forward(g, &enc, context)
    }
}

/// Trainable encoder copy fed by a rasterized label map through a small
/// convolutional stem; its outputs reach the base only via zero-initialized
/// 1x1 convolutions.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    pub encoder: EncoderPath,
    stem1: Conv2d,
    stem2: Conv2d,
    pub zero_convs: Vec<Conv2d>,
}

impl ControlBranch {
    /// `b` should be rooted at [`CONTROL_PREFIX`].
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, spec: &DenoiserSpec, cb: &ControlBranchSpec) -> Result<Self> {
        let encoder = EncoderPath::new(&mut b.pp("encoder"), spec)?;
        let stem1 = Conv2d::new(&mut b.pp("stem1"), cb.condition_channels, cb.stem_width, 3, 1)?;
        let stem2 = Conv2d::new(&mut b.pp("stem2"), cb.stem_width, spec.channels(0), 3, 1)?;
        let mut zero_convs = Vec::with_capacity(cb.zero_conv_count);
        zero_convs.push(Conv2d::zeros(&mut b.pp("zero.stem"), spec.channels(0), spec.channels(0))?);
        for i in 0..spec.depth {
            zero_convs.push(Conv2d::zeros(&mut b.pp(format!("zero.level{i}")), spec.channels(i), spec.channels(i))?);
        }
        let last = spec.channels(spec.depth - 1);
        zero_convs.push(Conv2d::zeros(&mut b.pp("zero.mid"), last, last)?);
        Ok(Self { encoder, stem1, stem2, zero_convs })
    }

    /// Per-level skip residuals and the middle residual.
    pub fn residuals(
        &self,
        g: &mut Graph,
        x: Var,
        ts: &[usize],
        context: Option<Var>,
        cond: Var,
    ) -> Result<(Vec<Var>, Var)> {
        let h = self.stem1.forward(g, cond)?;
        let h = g.silu(h);
        let h = self.stem2.forward(g, h)?;
        let hint = self.zero_convs[0].forward(g, h)?;
        let enc = self.encoder.forward(g, x, ts, context, Some(hint))?;
        let mut skips = Vec::with_capacity(enc.skips.len());
        for (s, zc) in enc.skips.iter().zip(&self.zero_convs[1..]) {
            skips.push(zc.forward(g, *s)?);
        }
        let mid = self.zero_convs.last().expect("mid zero conv").forward(g, enc.mid)?;
        Ok((skips, mid))
    }
}
