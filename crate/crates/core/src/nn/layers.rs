//! Building blocks shared by the denoiser, the codec and the downstream networks.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamBuilder, ParamId};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = b.uniform("weight", &[out, inp], bound)?;
        let bias = if bias { Some(b.uniform("bias", &[out], bound)?) } else { None };
        Ok(Self { weight, bias })
    }

    /// `x[M, in] -> [M, out]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul_t(x, w, false, true)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_channel(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        Ok(Self {
            weight: b.uniform("weight", &[cout, cin, k, k], bound)?,
            bias: b.uniform("bias", &[cout], bound)?,
            stride,
            pad: k / 2,
        })
    }

    /// 1x1 convolution with all-zero weight and bias.
    pub fn zeros<R: Rng>(b: &mut ParamBuilder<'_, R>, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: b.constant("weight", &[cout, cin, 1, 1], 0.0)?,
            bias: b.constant("bias", &[cout], 0.0)?,
            stride: 1,
            pad: 0,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Largest of 8, 4, 2, 1 that divides `channels`.
pub fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant("gamma", &[channels], 1.0)?,
            beta: b.constant("beta", &[channels], 0.0)?,
            groups: groups_for(channels),
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Pre-activation residual block with an optional additive time embedding.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<R: Rng>(
        b: &mut ParamBuilder<'_, R>,
        cin: usize,
        cout: usize,
        temb_dim: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut b.pp("norm1"), cin)?,
            conv1: Conv2d::new(&mut b.pp("conv1"), cin, cout, 3, 1)?,
            time_proj: match temb_dim {
                Some(d) => Some(Linear::new(&mut b.pp("time_proj"), d, cout, true)?),
                None => None,
            },
            norm2: GroupNorm::new(&mut b.pp("norm2"), cout)?,
            conv2: Conv2d::new(&mut b.pp("conv2"), cout, cout, 3, 1)?,
            shortcut: if cin != cout {
                Some(Conv2d::new(&mut b.pp("shortcut"), cin, cout, 1, 1)?)
            } else {
                None
            },
        })
    }

    /// `temb` is `[N, temb_dim]` and is required iff the block was built with one.
    pub fn forward(&self, g: &mut Graph, x: Var, temb: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h);
        let mut h = self.conv1.forward(g, h)?;
        if let (Some(proj), Some(t)) = (&self.time_proj, temb) {
            let t = g.silu(t);
            let e = proj.forward(g, t)?;
            h = g.add_channel(h, e)?;
        }
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

/// Single-head cross-attention from spatial tokens to a context sequence,
/// with a residual connection.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    dim: usize,
}

impl CrossAttention {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, channels: usize, context_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut b.pp("norm"), channels)?,
            to_q: Linear::new(&mut b.pp("to_q"), channels, channels, false)?,
            to_k: Linear::new(&mut b.pp("to_k"), context_dim, channels, false)?,
            to_v: Linear::new(&mut b.pp("to_v"), context_dim, channels, false)?,
            to_out: Linear::new(&mut b.pp("to_out"), channels, channels, true)?,
            dim: channels,
        })
    }

    /// `x[N, C, H, W]`, `context[N, L, D]`.
    pub fn forward(&self, g: &mut Graph, x: Var, context: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let normed = self.norm.forward(g, x)?;
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let xi = g.slice_batch(normed, i)?;
            let xi = g.reshape(xi, &[c, h * w])?;
            let tokens = g.transpose(xi)?;
            let ctx = g.slice_batch(context, i)?;
            let q = self.to_q.forward(g, tokens)?;
            let k = self.to_k.forward(g, ctx)?;
            let v = self.to_v.forward(g, ctx)?;
            let scores = g.matmul_t(q, k, false, true)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            let o = g.matmul(attn, v)?;
            let o = self.to_out.forward(g, o)?;
            let o = g.transpose(o)?;
            outs.push(g.reshape(o, &[c, h, w])?);
        }
        let out = g.stack_batch(&outs)?;
        g.add(x, out)
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Tensor::new(&[ts.len(), dim], data).expect("embedding shape")
}
