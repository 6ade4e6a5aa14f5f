//! AdamW with decoupled weight decay and bias correction.

use ndarray::ArrayD;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
struct MomentState {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, MomentState>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, state: BTreeMap::new() }
    }

    /// Update one named parameter in place. Decay is decoupled: it scales
    /// the parameter directly instead of being folded into the gradient.
    pub fn step(&mut self, name: &str, param: &mut ArrayD<f64>, grad: &ArrayD<f64>) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch for {name}");
        let entry = self.state.entry(name.to_string()).or_insert_with(|| MomentState {
            m: ArrayD::zeros(param.raw_dim()),
            v: ArrayD::zeros(param.raw_dim()),
            step: 0,
        });
        entry.step += 1;
        let t = entry.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        ndarray::Zip::from(param)
            .and(&mut entry.m)
            .and(&mut entry.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *p -= self.lr * self.weight_decay * *p;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, IxDyn};

    #[test]
    fn first_step_matches_hand_computation() {
        // with g = 1: m_hat = 1, v_hat = 1, so the Adam part moves by
        // lr / (1 + eps); decay shrinks the parameter by lr * wd first
        let mut opt = AdamW::new(0.1);
        let mut p = arr1(&[1.0]).into_dyn();
        let g = arr1(&[1.0]).into_dyn();
        opt.step("p", &mut p, &g);
        let decayed = 1.0 - 0.1 * 0.01;
        let expect = decayed - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[[0]] - expect).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut opt = AdamW::new(0.05);
        opt.weight_decay = 0.0;
        let mut p = arr1(&[-4.0]).into_dyn();
        for _ in 0..2000 {
            let g = arr1(&[2.0 * (p[[0]] - 3.0)]).into_dyn();
            opt.step("x", &mut p, &g);
        }
        assert!((p[[0]] - 3.0).abs() < 1e-3, "ended at {}", p[[0]]);
    }

    #[test]
    fn zero_gradient_still_decays() {
        let mut opt = AdamW::new(0.1);
        let mut p = arr1(&[2.0]).into_dyn();
        let g = ArrayD::zeros(IxDyn(&[1]));
        for _ in 0..10 {
            opt.step("p", &mut p, &g);
        }
        assert!(p[[0]] < 2.0 && p[[0]] > 2.0 * (1.0_f64 - 0.1 * 0.01).powi(10) - 1e-12);
    }

    #[test]
    fn state_is_per_parameter() {
        let mut opt = AdamW::new(0.1);
        let mut a = arr1(&[1.0]).into_dyn();
        let mut b = arr1(&[1.0]).into_dyn();
        let g = arr1(&[1.0]).into_dyn();
        opt.step("a", &mut a, &g);
        opt.step("a", &mut a, &g);
        opt.step("b", &mut b, &g);
        // b took one fresh step, a took two; they must differ
        assert!((a[[0]] - b[[0]]).abs() > 1e-6);
    }
}
