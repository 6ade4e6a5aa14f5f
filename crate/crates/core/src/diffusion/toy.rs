//! Built-in pixel-space denoiser, small enough to fine-tune on a CPU in
//! seconds yet shaped like the real thing: a U-Net with residual blocks,
//! timestep conditioning, and text cross-attention at three spatial
//! resolutions, paired with a token-embedding text encoder.
//!
//! It exists so the training loop, the guidance losses, and the attention
//! probes can be exercised end to end with exact gradients; quality of the
//! generations is whatever a 10k-parameter U-Net can deliver.

use super::{Backbone, ForwardOutput, LatentSpec, ParamKind, ParamStore};
use crate::attention::{cross_attention, AttentionLayerConfig, CapturedAttention};
use crate::tensor::Tensor;
use ndarray::{Array2, ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    pub latent: LatentSpec,
    pub channels: usize,
    pub heads: usize,
    pub text_width: usize,
    pub time_width: usize,
    pub max_tokens: usize,
}

impl Default for ToyBackbone {
    fn default() -> Self {
        ToyBackbone {
            latent: LatentSpec { h: 32, w: 32, channels: 3 },
            channels: 8,
            heads: 2,
            text_width: 16,
            time_width: 16,
            max_tokens: 16,
        }
    }
}

/// (site id, downsampling factor) of every cross-attention layer, in
/// forward-pass order.
const ATTN_SITES: [(&str, u32); 5] = [
    ("down.f2.attn", 2),
    ("down.f4.attn", 4),
    ("mid.f8.attn", 8),
    ("up.f4.attn", 4),
    ("up.f2.attn", 2),
];

const RES_SITES: [&str; 6] = ["down.f2", "down.f4", "mid.f8", "up.f4", "up.f2", "out"];

/// Sinusoidal position code for a timestep, `[1, dim]`.
pub fn timestep_embedding(t: u32, dim: usize) -> Array2<f64> {
    assert!(dim.is_multiple_of(2), "embedding width must be even");
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((1, dim));
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out[[0, i]] = arg.sin();
        out[[0, half + i]] = arg.cos();
    }
    out
}

impl ToyBackbone {
    fn normal(rng: &mut dyn rand::RngCore, shape: &[usize], std: f64) -> ArrayD<f64> {
        let dist = Normal::new(0.0, std).unwrap();
        ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
    }

    fn conv(
        params: &BTreeMap<String, Tensor>,
        prefix: &str,
        x: &Tensor,
        h: usize,
        w: usize,
    ) -> Tensor {
        x.im2col3(h, w)
            .matmul(&params[&format!("{prefix}.w")])
            .add_row(&params[&format!("{prefix}.b")])
    }

    /// Residual block: two 3x3 convs with the timestep projection added
    /// between them. Preserves channel count.
    fn resblock(
        params: &BTreeMap<String, Tensor>,
        site: &str,
        x: &Tensor,
        temb: &Tensor,
        h: usize,
        w: usize,
    ) -> Tensor {
        let p = |suffix: &str| &params[&format!("unet.{site}.res.{suffix}")];
        let tproj = temb.matmul(p("tproj"));
        let mid = x
            .im2col3(h, w)
            .matmul(p("w1"))
            .add_row(p("b1"))
            .add_row(&tproj)
            .silu();
        let out = mid.im2col3(h, w).matmul(p("w2")).add_row(p("b2"));
        x.add(&out)
    }

    #[allow(clippy::too_many_arguments)]
    fn attn_block(
        &self,
        params: &BTreeMap<String, Tensor>,
        site: &str,
        factor: u32,
        x: &Tensor,
        text: &Tensor,
        t: u32,
        h: usize,
        w: usize,
        captures: &mut Vec<CapturedAttention>,
    ) -> Tensor {
        let p = |suffix: &str| &params[&format!("unet.{site}.{suffix}")];
        let (attended, probs) = cross_attention(x, text, p("wq"), p("wk"), p("wv"), self.heads);
        captures.push(CapturedAttention {
            layer_id: site.to_string(),
            downsample_factor: factor,
            h,
            w,
            heads: probs,
            timestep: t,
        });
        x.add(&attended)
    }
}

impl Backbone for ToyBackbone {
    fn latent(&self) -> LatentSpec {
        self.latent
    }

    fn attention_layers(&self) -> Vec<AttentionLayerConfig> {
        ATTN_SITES
            .iter()
            .map(|(site, factor)| AttentionLayerConfig {
                layer_id: (*site).to_string(),
                downsample_factor: *factor,
                heads: self.heads,
                key_dim: self.channels / self.heads,
            })
            .collect()
    }

    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn init_params(&self, vocab_size: usize, rng: &mut dyn rand::RngCore) -> ParamStore {
        assert!(self.channels.is_multiple_of(self.heads), "heads must divide channels");
        let c = self.channels;
        let e = self.text_width;
        let mut store = ParamStore::new();
        let mut w = |name: String, kind: ParamKind, shape: &[usize]| {
            let fan_in = shape[..shape.len() - 1].iter().product::<usize>().max(1);
            let data = Self::normal(rng, shape, 1.0 / (fan_in as f64).sqrt());
            store.insert(name, kind, data);
        };

        w("unet.stem.w".into(), ParamKind::Backbone, &[9 * self.latent.channels, c]);
        for site in RES_SITES {
            w(format!("unet.{site}.res.w1"), ParamKind::Backbone, &[9 * c, c]);
            w(format!("unet.{site}.res.w2"), ParamKind::Backbone, &[9 * c, c]);
            w(format!("unet.{site}.res.tproj"), ParamKind::Backbone, &[self.time_width, c]);
        }
        for (site, _) in ATTN_SITES {
            w(format!("unet.{site}.wq"), ParamKind::AttnQ, &[c, c]);
            w(format!("unet.{site}.wk"), ParamKind::AttnK, &[e, c]);
            w(format!("unet.{site}.wv"), ParamKind::AttnV, &[e, c]);
        }
        w("unet.head.w".into(), ParamKind::Backbone, &[9 * c, self.latent.channels]);
        w("text.mix.w1".into(), ParamKind::TextEncoder, &[e, e]);
        w("text.mix.w2".into(), ParamKind::TextEncoder, &[e, e]);

        let embed = Self::normal(rng, &[vocab_size, e], 0.5);
        store.insert("text.embed", ParamKind::TextEncoder, embed);
        let pos = Self::normal(rng, &[self.max_tokens, e], 0.5);
        store.insert("text.pos", ParamKind::TextEncoder, pos);

        // Biases start at zero like any sane conv net.
        let zeros = |shape: &[usize]| ArrayD::<f64>::zeros(IxDyn(shape));
        store.insert("unet.stem.b", ParamKind::Backbone, zeros(&[1, c]));
        for site in RES_SITES {
            store.insert(format!("unet.{site}.res.b1"), ParamKind::Backbone, zeros(&[1, c]));
            store.insert(format!("unet.{site}.res.b2"), ParamKind::Backbone, zeros(&[1, c]));
        }
        store.insert("unet.head.b", ParamKind::Backbone, zeros(&[1, self.latent.channels]));
        store
    }

    fn encode_text(&self, params: &BTreeMap<String, Tensor>, ids: &[usize]) -> Tensor {
        assert!(!ids.is_empty(), "empty token sequence");
        assert!(ids.len() <= self.max_tokens, "token sequence exceeds max length");
        let embed = Tensor::gather_rows(&params["text.embed"], ids);
        let pos_ids: Vec<usize> = (0..ids.len()).collect();
        let pos = Tensor::gather_rows(&params["text.pos"], &pos_ids);
        let e = embed.add(&pos);
        // Every token sees the sequence mean, so identifiers can influence
        // their class noun and vice versa despite the lack of self-attention.
        let pooled = e.mean_axis0().matmul(&params["text.mix.w2"]);
        let mixed = e.matmul(&params["text.mix.w1"]).add_row(&pooled).silu();
        e.add(&mixed)
    }

    fn denoise(
        &self,
        params: &BTreeMap<String, Tensor>,
        z_t: &Tensor,
        t: u32,
        text: &Tensor,
    ) -> ForwardOutput {
        let (h, w) = (self.latent.h, self.latent.w);
        assert_eq!(z_t.shape(), &[h * w, self.latent.channels], "latent shape mismatch");
        let temb = Tensor::constant(timestep_embedding(t, self.time_width).into_dyn());
        let mut caps = Vec::with_capacity(ATTN_SITES.len());

        let s32 = Self::conv(params, "unet.stem", z_t, h, w).silu();

        let d16 = s32.avg_pool2(h, w);
        let d16 = Self::resblock(params, "down.f2", &d16, &temb, h / 2, w / 2);
        let d16 = self.attn_block(params, "down.f2.attn", 2, &d16, text, t, h / 2, w / 2, &mut caps);

        let d8 = d16.avg_pool2(h / 2, w / 2);
        let d8 = Self::resblock(params, "down.f4", &d8, &temb, h / 4, w / 4);
        let d8 = self.attn_block(params, "down.f4.attn", 4, &d8, text, t, h / 4, w / 4, &mut caps);

        let d4 = d8.avg_pool2(h / 4, w / 4);
        let d4 = Self::resblock(params, "mid.f8", &d4, &temb, h / 8, w / 8);
        let d4 = self.attn_block(params, "mid.f8.attn", 8, &d4, text, t, h / 8, w / 8, &mut caps);

        let u8_ = d4.upsample2(h / 8, w / 8).add(&d8);
        let u8_ = Self::resblock(params, "up.f4", &u8_, &temb, h / 4, w / 4);
        let u8_ = self.attn_block(params, "up.f4.attn", 4, &u8_, text, t, h / 4, w / 4, &mut caps);

        let u16 = u8_.upsample2(h / 4, w / 4).add(&d16);
        let u16 = Self::resblock(params, "up.f2", &u16, &temb, h / 2, w / 2);
        let u16 = self.attn_block(params, "up.f2.attn", 2, &u16, text, t, h / 2, w / 2, &mut caps);

        let u32_ = u16.upsample2(h / 2, w / 2).add(&s32);
        let u32_ = Self::resblock(params, "out", &u32_, &temb, h, w);
        let eps_hat = Self::conv(params, "unet.head", &u32_, h, w);

        ForwardOutput { eps_hat, captures: caps }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::TrainableSelection;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn forward_fixture() -> (ToyBackbone, ParamStore, ArrayD<f64>, Vec<usize>) {
        let bb = ToyBackbone::default();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let store = bb.init_params(64, &mut rng);
        let z = ToyBackbone::normal(&mut rng, &[bb.latent.positions(), 3], 1.0);
        (bb, store, z, vec![3, 17, 5, 9])
    }

    #[test]
    fn forward_shapes_and_captures() {
        let (bb, store, z, ids) = forward_fixture();
        let bound = store.bind(&TrainableSelection::default());
        let text = bb.encode_text(&bound, &ids);
        assert_eq!(text.shape(), &[4, 16]);
        let out = bb.denoise(&bound, &Tensor::constant(z), 13, &text);
        assert_eq!(out.eps_hat.shape(), &[1024, 3]);
        assert!(out.eps_hat.data().iter().all(|v| v.is_finite()));

        assert_eq!(out.captures.len(), 5);
        let configs = bb.attention_layers();
        for (cap, cfg) in out.captures.iter().zip(&configs) {
            assert_eq!(cap.layer_id, cfg.layer_id);
            assert_eq!(cap.downsample_factor, cfg.downsample_factor);
            assert_eq!(cap.h, bb.latent.h / cfg.downsample_factor as usize);
            assert_eq!(cap.tokens(), 4);
            assert_eq!(cap.timestep, 13);
        }
    }

    #[test]
    fn layer_ids_unique_and_factors_cover_2_4_8() {
        let bb = ToyBackbone::default();
        let layers = bb.attention_layers();
        let mut ids: Vec<&str> = layers.iter().map(|l| l.layer_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), layers.len());
        for f in [2u32, 4, 8] {
            assert!(layers.iter().any(|l| l.downsample_factor == f), "missing factor {f}");
        }
        for l in &layers {
            assert_eq!(l.heads * l.key_dim, bb.channels);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let (bb, store, z, ids) = forward_fixture();
        let run = || {
            let bound = store.bind(&TrainableSelection::default());
            let text = bb.encode_text(&bound, &ids);
            let out = bb.denoise(&bound, &Tensor::constant(z.clone()), 5, &text);
            out.eps_hat.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let (bb, store, z, ids) = forward_fixture();
        let target = ToyBackbone::normal(&mut ChaCha8Rng::seed_from_u64(41), &[1024, 3], 1.0);

        let loss_for = |wk_override: Option<&ArrayD<f64>>| -> (f64, Option<ArrayD<f64>>) {
            let mut bound = store.bind(&TrainableSelection::default());
            let leaf = match wk_override {
                Some(v) => Tensor::leaf(v.clone()),
                None => Tensor::leaf(store.get("unet.mid.f8.attn.wk").unwrap().data.clone()),
            };
            bound.insert("unet.mid.f8.attn.wk".into(), leaf.clone());
            let text = bb.encode_text(&bound, &ids);
            let out = bb.denoise(&bound, &Tensor::constant(z.clone()), 3, &text);
            let diff = out.eps_hat.sub(&Tensor::constant(target.clone()));
            let mse = diff.mul(&diff).mean_all();
            let map = crate::attention::token_map(&out.captures[2], 1);
            let attn_term = map.mul(&map).mean_all();
            let loss = mse.add(&attn_term);
            if wk_override.is_none() {
                loss.backward();
                (loss.item(), Some(leaf.grad().unwrap()))
            } else {
                (loss.item(), None)
            }
        };

        let (_, analytic) = loss_for(None);
        let analytic = analytic.unwrap();
        let wk0 = store.get("unet.mid.f8.attn.wk").unwrap().data.clone();
        // Spot-check a scattered subset of coordinates; full finite
        // differencing over the whole matrix is needlessly slow here.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        use rand::Rng;
        for _ in 0..10 {
            let idx = rng.random_range(0..wk0.len());
            let mut probe = wk0.clone();
            let h = 1e-5;
            probe.as_slice_mut().unwrap()[idx] += h;
            let (fp, _) = loss_for(Some(&probe));
            probe.as_slice_mut().unwrap()[idx] -= 2.0 * h;
            let (fm, _) = loss_for(Some(&probe));
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-5, "coordinate {idx}: analytic {a}, numeric {numeric}");
        }
    }

    #[test]
    fn text_encoder_gradients_flow_to_used_rows_only() {
        let (bb, store, _, ids) = forward_fixture();
        let bound = store.bind(&TrainableSelection::default());
        let text = bb.encode_text(&bound, &ids);
        text.mul(&text).mean_all().backward();
        let g = bound["text.embed"].grad().unwrap();
        let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        for row in 0..64 {
            let norm: f64 = g2.row(row).iter().map(|v| v * v).sum();
            if ids.contains(&row) {
                assert!(norm > 0.0, "used row {row} has zero gradient");
            } else {
                assert_eq!(norm, 0.0, "unused row {row} has gradient");
            }
        }
    }

    #[test]
    fn timestep_embedding_is_bounded_and_distinct() {
        let a = timestep_embedding(1, 16);
        let b = timestep_embedding(2, 16);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-3));
    }
}
