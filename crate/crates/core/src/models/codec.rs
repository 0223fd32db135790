//! Image codec. The identity codec has no parameters; the convolutional
//! codec halves resolution `log2(f)` times and carries a frozen latent scale.

use rand::Rng;

use super::spec::CodecSpec;
use crate::error::Result;
use crate::nn::layers::Conv2d;
use crate::nn::{Graph, ParamBuilder, ParamId, Var};

pub const CODEC_PREFIX: &str = "codec";

#[derive(Debug, Clone)]
pub struct ConvCodec {
    enc_in: Conv2d,
    enc_down: Vec<Conv2d>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
    /// Multiplies latents after encoding; set from data once the codec is fit.
    pub latent_scale: ParamId,
}

#[derive(Debug, Clone)]
pub enum Codec {
    Identity,
    Conv(ConvCodec),
}

impl Codec {
    pub fn new<R: Rng>(b: &mut ParamBuilder<'_, R>, spec: &CodecSpec) -> Result<Self> {
        if spec.is_identity() {
            return Ok(Codec::Identity);
        }
        let h = spec.hidden;
        let n = spec.downsample_factor.trailing_zeros() as usize;
        let mut enc_down = Vec::with_capacity(n);
        let mut dec_up = Vec::with_capacity(n);
        for i in 0..n {
            enc_down.push(Conv2d::new(&mut b.pp(format!("enc_down{i}")), h, h, 3, 2)?);
        }
        for i in 0..n {
            dec_up.push(Conv2d::new(&mut b.pp(format!("dec_up{i}")), h, h, 3, 1)?);
        }
        Ok(Codec::Conv(ConvCodec {
            enc_in: Conv2d::new(&mut b.pp("enc_in"), spec.image_channels, h, 3, 1)?,
            enc_down,
            enc_out: Conv2d::new(&mut b.pp("enc_out"), h, spec.latent_channels, 3, 1)?,
            dec_in: Conv2d::new(&mut b.pp("dec_in"), spec.latent_channels, h, 3, 1)?,
            dec_up,
            dec_out: Conv2d::new(&mut b.pp("dec_out"), h, spec.image_channels, 3, 1)?,
            latent_scale: b.constant("latent_scale", &[1], 1.0)?,
        }))
    }

    /// Unscaled encoder output.
    pub fn encode_raw(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Codec::Identity => Ok(x),
            Codec::Conv(c) => {
                let h = c.enc_in.forward(g, x)?;
                let mut h = g.silu(h);
                for d in &c.enc_down {
                    h = d.forward(g, h)?;
                    h = g.silu(h);
                }
                c.enc_out.forward(g, h)
            }
        }
    }

    /// Decodes an unscaled latent.
    pub fn decode_raw(&self, g: &mut Graph, z: Var) -> Result<Var> {
        match self {
            Codec::Identity => Ok(z),
            Codec::Conv(c) => {
                let h = c.dec_in.forward(g, z)?;
                let mut h = g.silu(h);
                for u in &c.dec_up {
                    h = g.upsample2(h)?;
                    h = u.forward(g, h)?;
                    h = g.silu(h);
                }
                c.dec_out.forward(g, h)
            }
        }
    }

    pub fn scale(&self, g: &Graph) -> f64 {
        match self {
            Codec::Identity => 1.0,
            Codec::Conv(c) => g.store().value(c.latent_scale).data()[0],
        }
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = self.encode_raw(g, x)?;
        Ok(match self {
            Codec::Identity => z,
            Codec::Conv(_) => {
                let s = self.scale(g);
                g.scale(z, s)
            }
        })
    }

    pub fn decode(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let z = match self {
            Codec::Identity => z,
            Codec::Conv(_) => {
                let s = self.scale(g);
                g.scale(z, 1.0 / s)
            }
        };
        self.decode_raw(g, z)
    }
}
