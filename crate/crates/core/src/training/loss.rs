//! Noise-prediction objectives for the three generation modes.

use crate::data::{GrayImage, LabelMap, PatientRecord};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::models::{GenerationMode, ModelBundle};
use crate::nn::{Graph, Var};
use crate::prompt::Prompt;
use crate::tensor::Tensor;

/// One training example in model space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    /// `[1, C, H, W]` with intensities mapped to `[-1, 1]`.
    pub image: Tensor,
    pub prompt: Option<String>,
    pub label_map: Option<LabelMap>,
}

/// `[0, 1]` intensities to `[-1, 1]`.
pub fn to_model_space(img: &GrayImage) -> Tensor {
    img.to_tensor().map(|v| 2.0 * v - 1.0)
}

/// Inverse of [`to_model_space`] for one batch item, clamped to `[0, 1]`.
pub fn from_model_space(x: &Tensor) -> Result<GrayImage> {
    GrayImage::from_tensor(&x.map(|v| (v + 1.0) / 2.0))
}

impl TrainSample {
    pub fn from_record(rec: &PatientRecord, prompt: Option<&Prompt>, size: [usize; 2]) -> Self {
        Self {
            image: to_model_space(&rec.image.resize_area(size[0], size[1])),
            prompt: prompt.map(|p| p.text.clone()),
            label_map: rec.label_map.clone(),
        }
    }
}

/// Scalar loss node for a batch. `ts` and `eps` are per item.
pub fn loss_graph(
    bundle: &ModelBundle,
    g: &mut Graph,
    schedule: &NoiseSchedule,
    batch: &[&TrainSample],
    ts: &[usize],
    eps: &Tensor,
) -> Result<Var> {
    let mode = bundle.mode();
    let images: Vec<Tensor> = batch.iter().map(|s| s.image.clone()).collect();
    let x = Tensor::stack_batch(&images)?;
    let z0 = bundle.encode_image(&x)?;
    z0.ensure_same_shape(eps)?;
    let mut zt = Vec::with_capacity(batch.len());
    for (i, &t) in ts.iter().enumerate() {
        zt.push(schedule.q_sample(&z0.batch_item(i), t, &eps.batch_item(i))?);
    }
    let zt = g.constant(Tensor::stack_batch(&zt)?);
    let context = if mode.needs_text() {
        let prompts: Vec<&str> = batch
            .iter()
            .map(|s| s.prompt.as_deref().ok_or_else(|| Error::config(format!("{mode} training needs a prompt per record"))))
            .collect::<Result<_>>()?;
        Some(bundle.text_encoder()?.forward(g, &prompts)?)
    } else {
        None
    };
    let hint = if mode == GenerationMode::TextSeg {
        let maps: Vec<Tensor> = batch
            .iter()
            .map(|s| {
                s.label_map
                    .as_ref()
                    .map(|m| bundle.rasterize(m))
                    .ok_or_else(|| Error::config("text_seg training needs a label map per record"))
            })
            .collect::<Result<_>>()?;
        Some(g.constant(Tensor::stack_batch(&maps)?))
    } else {
        None
    };
    let pred = bundle.eps_graph(g, zt, ts, context, hint)?;
    let target = g.constant(eps.clone());
    g.mse(pred, target)
}

fn scalar(bundle: &ModelBundle, schedule: &NoiseSchedule, s: &TrainSample, t: usize, eps: &Tensor) -> Result<f64> {
    let mut g = Graph::inference(&bundle.store);
    let l = loss_graph(bundle, &mut g, schedule, &[s], &[t], eps)?;
    let v = g.value(l).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric { message: format!("loss is {v}"), timestep: Some(t) });
    }
    Ok(v)
}

/// Pixel-space objective `mean‖ε − ε_θ(x_t, t)‖²`.
pub fn ddpm_loss(bundle: &ModelBundle, schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<f64> {
    if bundle.mode() != GenerationMode::Unconditional {
        return Err(Error::config(format!("ddpm_loss needs an unconditional bundle, got {}", bundle.mode())));
    }
    let s = TrainSample { image: x0.clone(), prompt: None, label_map: None };
    scalar(bundle, schedule, &s, t, eps)
}

/// Latent objective with text (and, in text+seg mode, label-map)
/// conditioning.
pub fn ldm_loss(
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    x: &Tensor,
    prompt: &Prompt,
    label_map: Option<&LabelMap>,
    t: usize,
    eps: &Tensor,
) -> Result<f64> {
    if !bundle.mode().needs_text() {
        return Err(Error::config("ldm_loss needs a text or text_seg bundle"));
    }
    if bundle.mode() == GenerationMode::TextSeg && label_map.is_none() {
        return Err(Error::config("text_seg ldm_loss requires a label map"));
    }
    let s = TrainSample { image: x.clone(), prompt: Some(prompt.text.clone()), label_map: label_map.cloned() };
    scalar(bundle, schedule, &s, t, eps)
}
