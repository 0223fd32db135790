use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::codec::{Codec, CODEC_PREFIX};
use super::denoiser::{
    ControlBranch, Denoiser, CONTROL_ENCODER_PREFIX, CONTROL_PREFIX, DENOISER_PREFIX, ENCODER_PREFIX,
};
use super::spec::{BundleSpec, ControlBranchSpec, GenerationMode};
use super::text::{TextEncoder, TEXT_PREFIX};
use crate::data::LabelMap;
use crate::diffusion::{ddpm_sample, fast_sample, FastSolver, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamBuilder, ParamStore, Var};
use crate::tensor::Tensor;

/// Denoiser, codec, optional text encoder and optional control branch,
/// sharing one parameter store and tagged with a generation mode.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    spec: BundleSpec,
    pub store: ParamStore,
    denoiser: Denoiser,
    codec: Codec,
    text: Option<TextEncoder>,
    control: Option<ControlBranch>,
}

impl ModelBundle {
    /// Randomly initialized bundle; rejects specs that break the mode rules.
    pub fn new(spec: BundleSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let denoiser = Denoiser::new(&mut ParamBuilder::new(&mut store, &mut rng, DENOISER_PREFIX), &spec.denoiser)?;
        let codec = Codec::new(&mut ParamBuilder::new(&mut store, &mut rng, CODEC_PREFIX), &spec.codec)?;
        let text = match &spec.text_encoder {
            Some(t) => Some(TextEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng, TEXT_PREFIX), t)?),
            None => None,
        };
        let control = match &spec.control {
            Some(c) => Some(ControlBranch::new(
                &mut ParamBuilder::new(&mut store, &mut rng, CONTROL_PREFIX),
                &spec.denoiser,
                c,
            )?),
            None => None,
        };
        let mut b = Self { spec, store, denoiser, codec, text, control };
        b.apply_freeze_policy();
        Ok(b)
    }

    /// Unconditional: all trainable. Text: codec frozen, text encoder per its
    /// flag. Text+seg: everything outside the control branch frozen.
    pub fn apply_freeze_policy(&mut self) {
        let s = &mut self.store;
        match self.spec.mode {
            GenerationMode::Unconditional => s.set_frozen_prefix("", false),
            GenerationMode::Text => {
                s.set_frozen_prefix("", false);
                s.set_frozen_prefix(CODEC_PREFIX, true);
                let trainable = self.spec.text_encoder.as_ref().is_some_and(|t| t.trainable);
                s.set_frozen_prefix(TEXT_PREFIX, !trainable);
            }
            GenerationMode::TextSeg => {
                s.set_frozen_prefix("", true);
                s.set_frozen_prefix(CONTROL_PREFIX, false);
            }
        }
    }

    pub fn spec(&self) -> &BundleSpec {
        &self.spec
    }

    pub fn mode(&self) -> GenerationMode {
        self.spec.mode
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn control(&self) -> Option<&ControlBranch> {
        self.control.as_ref()
    }

    /// `[N, C, h, w]` latent shape for a batch of `n`.
    pub fn latent_batch_shape(&self, n: usize) -> Vec<usize> {
        let [c, h, w] = self.spec.latent_shape();
        vec![n, c, h, w]
    }

    fn check_image(&self, x: &[usize]) -> Result<()> {
        let [h, w] = self.spec.image_size;
        match x {
            [_, c, xh, xw] if *c == self.spec.codec.image_channels && *xh == h && *xw == w => Ok(()),
            _ => Err(Error::shape(&[0, self.spec.codec.image_channels, h, w], x)),
        }
    }

    fn check_latent(&self, z: &[usize]) -> Result<()> {
        let [c, h, w] = self.spec.latent_shape();
        match z {
            [_, zc, zh, zw] if *zc == c && *zh == h && *zw == w => Ok(()),
            _ => Err(Error::shape(&[0, c, h, w], z)),
        }
    }

    /// Model-space images (`[N, C, H, W]`, values in `[-1, 1]`) to latents.
    pub fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        self.check_image(x.shape())?;
        if matches!(self.codec, Codec::Identity) {
            return Ok(x.clone());
        }
        let mut g = Graph::inference(&self.store);
        let xv = g.constant(x.clone());
        let z = self.codec.encode(&mut g, xv)?;
        Ok(g.value(z).clone())
    }

    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z.shape())?;
        if matches!(self.codec, Codec::Identity) {
            return Ok(z.clone());
        }
        let mut g = Graph::inference(&self.store);
        let zv = g.constant(z.clone());
        let x = self.codec.decode(&mut g, zv)?;
        Ok(g.value(x).clone())
    }

    pub fn text_encoder(&self) -> Result<&TextEncoder> {
        self.text
            .as_ref()
            .ok_or_else(|| Error::config(format!("{} bundle has no text encoder", self.spec.mode)))
    }

    /// Context `[1, L, D]`; an empty prompt yields the padding-only context.
    pub fn encode_text(&self, prompt: &str) -> Result<Tensor> {
        self.encode_texts(&[prompt])
    }

    pub fn encode_texts(&self, prompts: &[&str]) -> Result<Tensor> {
        let enc = self.text_encoder()?;
        let mut g = Graph::inference(&self.store);
        let c = enc.forward(&mut g, prompts)?;
        Ok(g.value(c).clone())
    }

    /// Graph-level noise prediction shared by inference and training.
    /// `hint` must be present exactly when the control branch is used.
    pub fn eps_graph(
        &self,
        g: &mut Graph,
        z_t: Var,
        ts: &[usize],
        context: Option<Var>,
        hint: Option<Var>,
    ) -> Result<Var> {
        if self.spec.mode.needs_text() != context.is_some() {
            return Err(Error::config(format!(
                "{} mode {} a text context",
                self.spec.mode,
                if context.is_some() { "takes no" } else { "requires" }
            )));
        }
        let control = match hint {
            Some(h) => {
                let branch = self
                    .control
                    .as_ref()
                    .ok_or_else(|| Error::config(format!("{} bundle has no control branch", self.spec.mode)))?;
                Some((branch, h))
            }
            None => None,
        };
        self.denoiser.forward(g, z_t, ts, context, control)
    }

    fn run_eps(&self, z_t: &Tensor, t: usize, context: Option<&Tensor>, map: Option<&Tensor>) -> Result<Tensor> {
        self.check_latent(z_t.shape())?;
        let n = z_t.shape()[0];
        let mut g = Graph::inference(&self.store);
        let z = g.constant(z_t.clone());
        let c = context.map(|c| g.constant(broadcast_batch(c, n)));
        let m = map.map(|m| g.constant(broadcast_batch(m, n)));
        let out = self.eps_graph(&mut g, z, &vec![t; n], c, m)?;
        let out = g.value(out).clone();
        if !out.all_finite() {
            return Err(Error::Numeric { message: "denoiser produced non-finite values".into(), timestep: Some(t) });
        }
        Ok(out)
    }

    /// Base noise prediction (the control branch, if any, is bypassed).
    pub fn denoise(&self, z_t: &Tensor, t: usize, context: Option<&Tensor>) -> Result<Tensor> {
        self.run_eps(z_t, t, context, None)
    }

    /// Noise prediction with the label-map condition `[N, 4, h, w]`.
    pub fn control_denoise(
        &self,
        z_t: &Tensor,
        t: usize,
        context: Option<&Tensor>,
        label_map: Option<&Tensor>,
    ) -> Result<Tensor> {
        if self.spec.mode != GenerationMode::TextSeg {
            return Err(Error::config(format!("control_denoise needs text_seg mode, bundle is {}", self.spec.mode)));
        }
        let map = label_map.ok_or_else(|| Error::config("control_denoise requires a label map"))?;
        let [_, h, w] = self.spec.latent_shape();
        let c = self.spec.control.as_ref().map_or(0, |c| c.condition_channels);
        match map.shape() {
            [_, mc, mh, mw] if *mc == c && *mh == h && *mw == w => {}
            s => return Err(Error::shape(&[0, c, h, w], s)),
        }
        self.run_eps(z_t, t, context, Some(map))
    }

    /// One-hot label map at the latent resolution, `[1, 4, h, w]`.
    pub fn rasterize(&self, map: &LabelMap) -> Tensor {
        let [_, h, w] = self.spec.latent_shape();
        map.one_hot(h, w)
    }

    /// Copies the text bundle into a text+seg bundle: the control encoder
    /// starts as an exact copy of the base encoder path, every zero
    /// convolution is zero, and the base is frozen.
    pub fn init_control_from_base(&self, seed: u64) -> Result<ModelBundle> {
        if self.spec.mode != GenerationMode::Text {
            return Err(Error::config(format!("control init needs a text bundle, got {}", self.spec.mode)));
        }
        let mut spec = self.spec.clone();
        spec.mode = GenerationMode::TextSeg;
        spec.control = Some(ControlBranchSpec::for_denoiser(&spec.denoiser));
        let mut out = ModelBundle::new(spec, seed)?;
        for (_, p) in self.store.iter() {
            let id = out.store.id(&p.name).ok_or_else(|| Error::Integrity(format!("missing {}", p.name)))?;
            *out.store.value_mut(id) = p.value.clone();
        }
        let copies: Vec<(String, Tensor)> = self
            .store
            .ids_with_prefix(ENCODER_PREFIX)
            .map(|id| {
                let p = self.store.get(id);
                (p.name.replacen(ENCODER_PREFIX, CONTROL_ENCODER_PREFIX, 1), p.value.clone())
            })
            .collect();
        for (name, value) in copies {
            let id = out.store.id(&name).ok_or_else(|| Error::Integrity(format!("control copy lacks {name}")))?;
            *out.store.value_mut(id) = value;
        }
        out.apply_freeze_policy();
        Ok(out)
    }

    /// Checksum over every frozen parameter.
    pub fn frozen_checksum(&self) -> String {
        self.store.frozen_checksum()
    }

    /// Checksum over the base model (everything except the control branch).
    pub fn base_checksum(&self) -> String {
        let mut h = sha2::Sha256::new();
        use sha2::Digest;
        for prefix in [DENOISER_PREFIX, CODEC_PREFIX, TEXT_PREFIX] {
            h.update(self.store.checksum(prefix).as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn conditioned(&self, cond: Conditioning) -> Result<ConditionedModel<'_>> {
        let needs_text = self.spec.mode.needs_text();
        if needs_text != cond.context.is_some() {
            return Err(Error::config(format!(
                "{} mode {} a text context",
                self.spec.mode,
                if needs_text { "requires" } else { "takes no" }
            )));
        }
        if (self.spec.mode == GenerationMode::TextSeg) != cond.label_map.is_some() {
            return Err(Error::config(format!(
                "{} mode {} a label map",
                self.spec.mode,
                if self.spec.mode == GenerationMode::TextSeg { "requires" } else { "takes no" }
            )));
        }
        let uncond = match cond.guidance_scale {
            Some(_) if !needs_text => return Err(Error::config("guidance needs a text context")),
            Some(_) => Some(self.encode_text("")?),
            None => None,
        };
        Ok(ConditionedModel { bundle: self, cond, uncond })
    }

    /// Samples `n` latents and decodes them to model-space images.
    /// `steps = None` runs the full reverse chain.
    pub fn sample(
        &self,
        n: usize,
        schedule: &NoiseSchedule,
        seed: u64,
        cond: Conditioning,
        steps: Option<(usize, FastSolver)>,
    ) -> Result<Tensor> {
        let model = self.conditioned(cond)?;
        let shape = self.latent_batch_shape(n);
        let z = match steps {
            None => ddpm_sample(&model, &shape, schedule, seed)?,
            Some((k, solver)) => fast_sample(&model, &shape, k, schedule, seed, solver)?,
        };
        self.decode_latent(&z)
    }
}

/// Repeats a unit-batch tensor `n` times; leaves full batches alone.
fn broadcast_batch(t: &Tensor, n: usize) -> Tensor {
    if t.shape()[0] == n {
        return t.clone();
    }
    let items: Vec<Tensor> = (0..n).map(|_| t.clone()).collect();
    Tensor::stack_batch(&items).expect("same shapes")
}

/// What a sampler conditions on. Contexts and maps may have batch 1 (shared)
/// or the sampling batch size.
#[derive(Debug, Clone, Default)]
pub struct Conditioning {
    pub context: Option<Tensor>,
    pub label_map: Option<Tensor>,
    /// Classifier-free guidance against the empty prompt; off when `None`.
    pub guidance_scale: Option<f64>,
}

pub struct ConditionedModel<'a> {
    bundle: &'a ModelBundle,
    cond: Conditioning,
    uncond: Option<Tensor>,
}

impl ConditionedModel<'_> {
    fn eps(&self, x: &Tensor, t: usize, context: Option<&Tensor>) -> Result<Tensor> {
        match self.bundle.mode() {
            GenerationMode::TextSeg => self.bundle.control_denoise(x, t, context, self.cond.label_map.as_ref()),
            _ => self.bundle.denoise(x, t, context),
        }
    }
}

impl NoisePredictor for ConditionedModel<'_> {
    fn predict_noise(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        let cond = self.eps(x, t, self.cond.context.as_ref())?;
        match (self.cond.guidance_scale, &self.uncond) {
            (Some(w), Some(u)) => {
                let un = self.eps(x, t, Some(u))?;
                un.lin_comb(1.0 - w, &cond, w)
            }
            _ => Ok(cond),
        }
    }
}
