//! Denoising diffusion pieces: the noise schedule, parameter storage and
//! selection, a small built-in backbone, and the capability seam for
//! plugging in external backbones.

pub mod adapter;
pub mod params;
pub mod schedule;
pub mod toy;

pub use params::{ParamKind, ParamSelector, ParamStore, TrainableSelection, WeightChange};
pub use schedule::NoiseSchedule;

use crate::attention::{aggregate_record_maps, AttentionLayerConfig, CapturedAttention};
use crate::tensor::Tensor;
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

/// Geometry of the latent the denoiser operates on. Feature maps are stored
/// as `[h * w, channels]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LatentSpec {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

impl LatentSpec {
    pub fn positions(&self) -> usize {
        self.h * self.w
    }
}

/// Result of one denoiser forward pass: the noise estimate and every
/// cross-attention layer's probabilities, still attached to the graph.
pub struct ForwardOutput {
    pub eps_hat: Tensor,
    pub captures: Vec<CapturedAttention>,
}

/// A denoising backbone the trainer can drive. Parameters are passed in as
/// graph bindings so the caller controls which ones are trainable.
pub trait Backbone {
    fn latent(&self) -> LatentSpec;
    fn attention_layers(&self) -> Vec<AttentionLayerConfig>;
    fn max_tokens(&self) -> usize;
    fn init_params(&self, vocab_size: usize, rng: &mut dyn rand::RngCore) -> ParamStore;
    fn encode_text(&self, params: &BTreeMap<String, Tensor>, ids: &[usize]) -> Tensor;
    fn denoise(
        &self,
        params: &BTreeMap<String, Tensor>,
        z_t: &Tensor,
        t: u32,
        text: &Tensor,
    ) -> ForwardOutput;
}

/// Standard normal array in the backbone's latent shape.
pub fn sample_noise(spec: &LatentSpec, rng: &mut dyn rand::RngCore) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[spec.positions(), spec.channels]), |_| {
        StandardNormal.sample(rng)
    })
}

/// Ancestral sampling from pure noise down to a clean latent.
pub fn generate_latent(
    backbone: &dyn Backbone,
    params: &BTreeMap<String, Tensor>,
    schedule: &NoiseSchedule,
    text: &Tensor,
    rng: &mut dyn rand::RngCore,
) -> Result<Array2<f64>> {
    let (latent, _) = generate_latent_probed(backbone, params, schedule, text, rng, None)?;
    Ok(latent)
}

/// Which attention to watch while sampling, and for which token.
#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub factors: Vec<u32>,
    pub token_index: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Aggregated attention map recorded over a full sampling trajectory.
pub struct ProbeResult {
    /// Aggregated map, additionally averaged over all timesteps.
    pub mean_map: Array2<f64>,
    pub layer_ids: Vec<String>,
    pub timestep_range: [u32; 2],
}

/// Ancestral sampling, optionally recording the probed token's aggregated
/// attention map at every timestep.
pub fn generate_latent_probed(
    backbone: &dyn Backbone,
    params: &BTreeMap<String, Tensor>,
    schedule: &NoiseSchedule,
    text: &Tensor,
    rng: &mut dyn rand::RngCore,
    probe: Option<&ProbeOptions>,
) -> Result<(Array2<f64>, Option<ProbeResult>)> {
    let spec = backbone.latent();
    let mut z = sample_noise(&spec, rng);
    let mut probe_acc: Option<(Array2<f64>, Vec<String>)> = None;
    let steps = schedule.steps();

    for t in (1..=steps).rev() {
        let out = backbone.denoise(params, &Tensor::constant(z.clone()), t as u32, text);
        if let Some(opts) = probe {
            let records: Vec<_> = out
                .captures
                .iter()
                .filter(|c| opts.factors.contains(&c.downsample_factor))
                .map(|c| c.to_record())
                .collect();
            if records.is_empty() {
                return Err(Error::capability(format!(
                    "no attention layers at factors {:?}",
                    opts.factors
                )));
            }
            let refs: Vec<&crate::attention::AttentionRecord> = records.iter().collect();
            let map = aggregate_record_maps(&refs, opts.token_index, opts.out_h, opts.out_w)?;
            match &mut probe_acc {
                Some((acc, _)) => *acc += &map,
                None => {
                    let ids = records.iter().map(|r| r.layer_id.clone()).collect();
                    probe_acc = Some((map, ids));
                }
            }
        }
        let eps = out.eps_hat.data();
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("noise estimate at t = {t}") });
        }
        let noise = if t > 1 { Some(sample_noise(&spec, rng)) } else { None };
        z = schedule.step(&z, eps, t, noise.as_ref());
    }

    let latent = z
        .into_dimensionality::<ndarray::Ix2>()
        .expect("latent is always [positions, channels]");
    let probe_result = probe_acc.map(|(acc, layer_ids)| ProbeResult {
        mean_map: acc / steps as f64,
        layer_ids,
        timestep_range: [1, steps as u32],
    });
    Ok((latent, probe_result))
}

/// Image (RGB, `[0, 255]`) to latent (`[h*w, channels]`, `[0, 1]`).
/// The built-in backbone works directly in pixel space, so this is a pure
/// layout change; external backbones bring their own encoders.
pub fn latent_from_image(img: &image::RgbImage, spec: &LatentSpec) -> Result<Array2<f64>> {
    if img.width() as usize != spec.w || img.height() as usize != spec.h {
        return Err(Error::validation(format!(
            "image is {}x{}, expected {}x{}",
            img.width(),
            img.height(),
            spec.w,
            spec.h
        )));
    }
    if spec.channels != 3 {
        return Err(Error::validation("pixel-space latents require 3 channels"));
    }
    let mut out = Array2::<f64>::zeros((spec.positions(), 3));
    for (x, y, px) in img.enumerate_pixels() {
        let pos = y as usize * spec.w + x as usize;
        for ch in 0..3 {
            out[[pos, ch]] = px.0[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Latent back to an 8-bit RGB image; values are clamped to `[0, 1]`.
pub fn image_from_latent(latent: &Array2<f64>, spec: &LatentSpec) -> Result<image::RgbImage> {
    if latent.dim() != (spec.positions(), 3) {
        return Err(Error::validation("latent shape does not match spec"));
    }
    let mut img = image::RgbImage::new(spec.w as u32, spec.h as u32);
    for pos in 0..spec.positions() {
        let (y, x) = (pos / spec.w, pos % spec.w);
        let mut px = [0u8; 3];
        for ch in 0..3 {
            let v = latent[[pos, ch]];
            if !v.is_finite() {
                return Err(Error::NonFinite { context: format!("latent value at ({y}, {x})") });
            }
            px[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        img.put_pixel(x as u32, y as u32, image::Rgb(px));
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_latent_round_trip() {
        let spec = LatentSpec { h: 4, w: 6, channels: 3 };
        let mut img = image::RgbImage::new(6, 4);
        for (i, px) in img.pixels_mut().enumerate() {
            *px = image::Rgb([(i * 7 % 256) as u8, (i * 13 % 256) as u8, (i * 29 % 256) as u8]);
        }
        let latent = latent_from_image(&img, &spec).unwrap();
        assert_eq!(latent.dim(), (24, 3));
        let back = image_from_latent(&latent, &spec).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn wrong_size_image_is_rejected() {
        let spec = LatentSpec { h: 4, w: 4, channels: 3 };
        let img = image::RgbImage::new(8, 8);
        assert!(matches!(latent_from_image(&img, &spec), Err(Error::Validation(_))));
    }

    #[test]
    fn out_of_range_latents_clamp() {
        let spec = LatentSpec { h: 1, w: 2, channels: 3 };
        let mut latent = Array2::<f64>::zeros((2, 3));
        latent[[0, 0]] = -0.5;
        latent[[1, 1]] = 1.5;
        let img = image_from_latent(&latent, &spec).unwrap();
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(1, 0).0[1], 255);
    }
}
