//! Cross-attention between spatial features and text embeddings, plus the
//! machinery for turning captured attention weights into per-token spatial
//! maps.
//!
//! A captured layer keeps its per-head probability tensors alive in the
//! autodiff graph, so a loss on an aggregated token map backpropagates into
//! the projection matrices. Detached snapshots ([`AttentionRecord`]) are used
//! for serialization and probes.

use crate::tensor::{average, Tensor};
use crate::{Error, Result};
use ndarray::{Array2, Array3, Ix2};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Static description of one cross-attention site in a backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionLayerConfig {
    /// Stable identifier, unique within a backbone (e.g. `"down.f2.xattn0"`).
    pub layer_id: String,
    /// Spatial reduction relative to the latent: the layer attends over a
    /// `(latent_h / factor) x (latent_w / factor)` grid.
    pub downsample_factor: u32,
    pub heads: usize,
    /// Per-head query/key width; logits are scaled by `1/sqrt(key_dim)`.
    pub key_dim: usize,
}

/// Attention probabilities of one layer for one forward pass, still attached
/// to the autodiff graph.
pub struct CapturedAttention {
    pub layer_id: String,
    pub downsample_factor: u32,
    /// Query grid size; `heads[i]` has shape `[h * w, tokens]`.
    pub h: usize,
    pub w: usize,
    pub heads: Vec<Tensor>,
    pub timestep: u32,
}

/// Detached attention weights, `[heads, query_positions, tokens]`.
/// Every `[head, query]` row is a probability distribution over tokens.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer_id: String,
    pub downsample_factor: u32,
    pub h: usize,
    pub w: usize,
    pub timestep: u32,
    pub weights: Array3<f64>,
}

impl CapturedAttention {
    pub fn tokens(&self) -> usize {
        self.heads[0].shape()[1]
    }

    pub fn to_record(&self) -> AttentionRecord {
        let q = self.h * self.w;
        let tokens = self.tokens();
        let mut weights = Array3::<f64>::zeros((self.heads.len(), q, tokens));
        for (hi, head) in self.heads.iter().enumerate() {
            let view = head.data().view().into_dimensionality::<Ix2>().unwrap();
            weights.index_axis_mut(ndarray::Axis(0), hi).assign(&view);
        }
        AttentionRecord {
            layer_id: self.layer_id.clone(),
            downsample_factor: self.downsample_factor,
            h: self.h,
            w: self.w,
            timestep: self.timestep,
            weights,
        }
    }
}

/// Multi-head cross-attention.
///
/// * `x`: spatial features `[positions, c_in]`
/// * `text`: token embeddings `[tokens, e]`
/// * `w_q`: `[c_in, heads * key_dim]`, `w_k`/`w_v`: `[e, heads * key_dim]`
///
/// Returns the attended features `[positions, heads * key_dim]` and the
/// per-head probability matrices `[positions, tokens]`, still in the graph.
pub fn cross_attention(
    x: &Tensor,
    text: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    heads: usize,
) -> (Tensor, Vec<Tensor>) {
    let total = w_q.shape()[1];
    assert!(heads > 0 && total.is_multiple_of(heads), "head count must divide projection width");
    let key_dim = total / heads;
    let scale = 1.0 / (key_dim as f64).sqrt();

    let q = x.matmul(w_q);
    let k = text.matmul(w_k);
    let v = text.matmul(w_v);

    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for hi in 0..heads {
        let qh = q.slice_cols(hi * key_dim, key_dim);
        let kh = k.slice_cols(hi * key_dim, key_dim);
        let vh = v.slice_cols(hi * key_dim, key_dim);
        let logits = qh.matmul(&kh.transpose()).scale(scale);
        let p = logits.softmax_rows();
        outs.push(p.matmul(&vh));
        probs.push(p);
    }
    (Tensor::concat_cols(&outs), probs)
}

/// Spatial map of one token's attention in one captured layer, averaged over
/// heads. Stays in the graph; shape `[h, w]`.
pub fn token_map(cap: &CapturedAttention, token_index: usize) -> Tensor {
    assert!(token_index < cap.tokens(), "token index out of range");
    let cols: Vec<Tensor> = cap.heads.iter().map(|h| h.index_column(token_index)).collect();
    average(&cols).reshape(&[cap.h, cap.w])
}

/// Aggregate one token's maps across layers: resize each to `out_h x out_w`
/// with bilinear interpolation, then average. Values stay in `[0, 1]`
/// because every step is a convex combination of probabilities.
pub fn aggregate_token_map(
    caps: &[&CapturedAttention],
    token_index: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    assert!(!caps.is_empty(), "no captured layers to aggregate");
    let resized: Vec<Tensor> = caps
        .iter()
        .map(|c| token_map(c, token_index).bilinear_resize(out_h, out_w))
        .collect();
    average(&resized)
}

/// Detached variant for probing: aggregates records instead of graph nodes.
pub fn aggregate_record_maps(
    records: &[&AttentionRecord],
    token_index: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Array2<f64>> {
    if records.is_empty() {
        return Err(Error::validation("no attention records to aggregate"));
    }
    let mut acc = Array2::<f64>::zeros((out_h, out_w));
    for rec in records {
        if token_index >= rec.weights.shape()[2] {
            return Err(Error::validation(format!(
                "token index {token_index} out of range for layer {}",
                rec.layer_id
            )));
        }
        let heads = rec.weights.shape()[0];
        let mut map = Array2::<f64>::zeros((rec.h, rec.w));
        for hi in 0..heads {
            for qi in 0..rec.h * rec.w {
                map[[qi / rec.w, qi % rec.w]] += rec.weights[[hi, qi, token_index]];
            }
        }
        map /= heads as f64;
        let up = Tensor::constant(map.into_dyn()).bilinear_resize(out_h, out_w);
        acc += &up.data().view().into_dimensionality::<Ix2>().unwrap();
    }
    acc /= records.len() as f64;
    Ok(acc)
}

/// Metadata written next to each probe image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSidecar {
    pub layer_ids: Vec<String>,
    pub token_index: usize,
    /// Inclusive `[first, last]` timesteps the probe covers.
    pub timestep_range: [u32; 2],
}

/// Write a `[h, w]` map in `[0, 1]` as an 8-bit grayscale PNG; each pixel is
/// `round(255 * value)`.
pub fn write_map_png(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in map.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { context: format!("probe map pixel ({y}, {x})") });
        }
        let clamped = v.clamp(0.0, 1.0);
        img.put_pixel(x as u32, y as u32, image::Luma([(clamped * 255.0).round() as u8]));
    }
    img.save(path)?;
    Ok(())
}

pub fn write_probe_sidecar(sidecar: &ProbeSidecar, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(path, json)?;
    Ok(())
}
