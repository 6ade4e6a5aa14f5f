//! Guidance losses that tie attention maps to segmentation masks, plus the
//! composite training objective.
//!
//! Hard guidance penalizes the full squared difference between a token's
//! aggregated attention map and its segmentation mask. Soft guidance only
//! penalizes attention that leaks outside the masked region, leaving the
//! distribution inside the region free.

use crate::tensor::{average, Tensor};
use crate::{Error, Result};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Per-concept segmentation mask with values in `[0, 1]`. Construction
/// validates the range and requires at least one strictly positive value;
/// an empty mask would silence the guidance loss for that concept.
#[derive(Debug, Clone)]
pub struct SegMask {
    data: Array2<f64>,
}

impl SegMask {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::validation("segmentation mask is empty"));
        }
        for ((y, x), &v) in data.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: format!("mask value at ({y}, {x})") });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!(
                    "mask value {v} at ({y}, {x}) outside [0, 1]"
                )));
            }
        }
        if !data.iter().any(|&v| v > 0.0) {
            return Err(Error::validation("segmentation mask has no positive values"));
        }
        Ok(SegMask { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    /// Binary complement of the mask support: 1 where the mask is exactly
    /// zero, 0 wherever it is positive.
    pub fn inverse(&self) -> Array2<f64> {
        self.data.mapv(|v| if v == 0.0 { 1.0 } else { 0.0 })
    }

    /// Fraction of pixels with positive mask value.
    pub fn coverage(&self) -> f64 {
        let positive = self.data.iter().filter(|&&v| v > 0.0).count();
        positive as f64 / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    #[default]
    Hard,
    Soft,
}

/// Mean squared error over all elements; the building block for the noise
/// and prior terms.
pub fn mse(a: &Tensor, b: &Tensor) -> Tensor {
    let d = a.sub(b);
    d.mul(&d).mean_all()
}

/// Full-map squared error against the mask, normalized by pixel count.
pub fn hard_attn_loss(map: &Tensor, seg: &SegMask) -> Tensor {
    assert_eq!(map.shape(), [seg.dim().0, seg.dim().1], "map/mask size mismatch");
    let target = Tensor::constant(seg.data().clone().into_dyn());
    mse(map, &target)
}

/// Squared error restricted to pixels outside the mask support, normalized
/// by the full pixel count. Inside the region the attention pattern is
/// unconstrained.
pub fn soft_attn_loss(map: &Tensor, seg: &SegMask) -> Tensor {
    assert_eq!(map.shape(), [seg.dim().0, seg.dim().1], "map/mask size mismatch");
    let keep = Tensor::constant(seg.inverse().into_dyn());
    let target = Tensor::constant(seg.data().clone().into_dyn());
    let d = map.sub(&target).mul(&keep);
    d.mul(&d).mean_all()
}

pub fn attn_loss(map: &Tensor, seg: &SegMask, mode: GuidanceMode) -> Tensor {
    match mode {
        GuidanceMode::Hard => hard_attn_loss(map, seg),
        GuidanceMode::Soft => soft_attn_loss(map, seg),
    }
}

/// Mean of the per-concept guidance losses for one training example.
pub fn multi_concept_attn_loss(pairs: &[(Tensor, &SegMask)], mode: GuidanceMode) -> Tensor {
    assert!(!pairs.is_empty(), "no concepts to guide");
    let losses: Vec<Tensor> = pairs.iter().map(|(m, s)| attn_loss(m, s, mode)).collect();
    average(&losses)
}

/// One training step's loss components. `total` is always
/// `l_denoise + lambda * l_prior + delta * l_attn`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_denoise: f64,
    pub l_prior: f64,
    pub l_attn: f64,
    pub lambda: f64,
    pub delta: f64,
    pub total: f64,
}

/// Combine the three loss terms into the training objective, in the graph
/// and as a detached breakdown. Rejects non-finite components so a diverged
/// run fails loudly instead of training on NaNs.
pub fn combine_losses(
    l_denoise: &Tensor,
    l_prior: &Tensor,
    l_attn: &Tensor,
    lambda: f64,
    delta: f64,
) -> Result<(Tensor, LossBreakdown)> {
    let breakdown = total_loss(l_denoise.item(), l_prior.item(), l_attn.item(), lambda, delta)?;
    let total = l_denoise.add(&l_prior.scale(lambda)).add(&l_attn.scale(delta));
    Ok((total, breakdown))
}

pub fn total_loss(
    l_denoise: f64,
    l_prior: f64,
    l_attn: f64,
    lambda: f64,
    delta: f64,
) -> Result<LossBreakdown> {
    let total = l_denoise + lambda * l_prior + delta * l_attn;
    for (name, v) in [
        ("l_denoise", l_denoise),
        ("l_prior", l_prior),
        ("l_attn", l_attn),
        ("total", total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { context: format!("loss component {name}") });
        }
    }
    Ok(LossBreakdown { l_denoise, l_prior, l_attn, lambda, delta, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn seg_2x2() -> SegMask {
        SegMask::new(arr2(&[[1.0, 0.0], [0.0, 0.0]])).unwrap()
    }

    fn map_2x2() -> Tensor {
        Tensor::constant(arr2(&[[0.5, 0.2], [0.1, 0.0]]).into_dyn())
    }

    #[test]
    fn hard_loss_matches_hand_computation() {
        // ((0.5-1)^2 + 0.2^2 + 0.1^2 + 0) / 4 = 0.075
        let loss = hard_attn_loss(&map_2x2(), &seg_2x2());
        assert!((loss.item() - 0.075).abs() < 1e-12);
    }

    #[test]
    fn soft_loss_only_counts_leakage() {
        // masked cell (0,0) is ignored: (0.2^2 + 0.1^2 + 0) / 4 = 0.0125
        let loss = soft_attn_loss(&map_2x2(), &seg_2x2());
        assert!((loss.item() - 0.0125).abs() < 1e-12);
    }

    #[test]
    fn inverse_mask_flags_exact_zeros_only() {
        let seg = SegMask::new(arr2(&[[1.0, 0.0], [0.3, 0.0]])).unwrap();
        let inv = seg.inverse();
        assert_eq!(inv, arr2(&[[0.0, 1.0], [0.0, 1.0]]));
    }

    #[test]
    fn mask_validation() {
        assert!(SegMask::new(arr2(&[[0.5, 1.5]])).is_err());
        assert!(SegMask::new(arr2(&[[-0.1, 0.5]])).is_err());
        assert!(SegMask::new(arr2(&[[0.0, 0.0]])).is_err());
        assert!(SegMask::new(arr2(&[[f64::NAN, 0.5]])).is_err());
        assert!(SegMask::new(arr2(&[[0.0, 0.7]])).is_ok());
    }

    #[test]
    fn mse_oracle() {
        let a = Tensor::constant(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = Tensor::constant(arr2(&[[0.0, 0.0]]).into_dyn());
        assert!((mse(&a, &b).item() - 2.5).abs() < 1e-12);
    }

    #[test]
    fn multi_concept_is_mean_of_concept_losses() {
        let seg_a = seg_2x2();
        let seg_b = SegMask::new(arr2(&[[0.0, 1.0], [0.0, 0.0]])).unwrap();
        let map = map_2x2();
        let la = hard_attn_loss(&map, &seg_a).item();
        let lb = hard_attn_loss(&map, &seg_b).item();
        let combined =
            multi_concept_attn_loss(&[(map.clone(), &seg_a), (map, &seg_b)], GuidanceMode::Hard);
        assert!((combined.item() - 0.5 * (la + lb)).abs() < 1e-12);
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let b = total_loss(0.5, 0.25, 0.1, 1.0, 1.0).unwrap();
        assert_eq!(b.total, 0.5 + 0.25 + 0.1);
        let b = total_loss(0.5, 0.25, 0.1, 0.0, 2.0).unwrap();
        assert_eq!(b.total, 0.5 + 2.0 * 0.1);
    }

    #[test]
    fn non_finite_components_are_rejected() {
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, 1.0, 1.0),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            total_loss(f64::MAX, f64::MAX, 0.0, 1.0, 1.0),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn gradient_of_hard_loss_is_correct() {
        use crate::tensor::{max_relative_error, numeric_gradient};
        use ndarray::{ArrayD, IxDyn};
        let seg = seg_2x2();
        let x0 = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.5, 0.2, 0.1, 0.0]).unwrap();
        let leaf = Tensor::leaf(x0.clone());
        hard_attn_loss(&leaf, &seg).backward();
        let analytic = leaf.grad().unwrap();
        let numeric = numeric_gradient(
            |v| {
                let t = Tensor::leaf(v.clone());
                hard_attn_loss(&t, &seg_2x2()).item()
            },
            &x0,
            1e-6,
        );
        assert!(max_relative_error(&analytic, &numeric, 1e-8) < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn losses_nonnegative_and_soft_bounded_by_hard(
            vals in proptest::collection::vec(0.0f64..1.0, 16),
            mask_bits in proptest::collection::vec(any::<bool>(), 16),
        ) {
            prop_assume!(mask_bits.iter().any(|&b| b));
            let map = Tensor::constant(
                ndarray::Array2::from_shape_vec((4, 4), vals).unwrap().into_dyn(),
            );
            let seg_data = ndarray::Array2::from_shape_vec(
                (4, 4),
                mask_bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            ).unwrap();
            let seg = SegMask::new(seg_data).unwrap();
            let hard = hard_attn_loss(&map, &seg).item();
            let soft = soft_attn_loss(&map, &seg).item();
            prop_assert!(hard >= 0.0 && soft >= 0.0);
            prop_assert!(soft <= hard + 1e-12);
        }

        #[test]
        fn hard_loss_zero_iff_map_equals_mask(
            mask_bits in proptest::collection::vec(any::<bool>(), 9),
        ) {
            prop_assume!(mask_bits.iter().any(|&b| b));
            let seg_data = ndarray::Array2::from_shape_vec(
                (3, 3),
                mask_bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            ).unwrap();
            let seg = SegMask::new(seg_data.clone()).unwrap();
            let exact = Tensor::constant(seg_data.into_dyn());
            prop_assert!(hard_attn_loss(&exact, &seg).item() == 0.0);
        }
    }
}
