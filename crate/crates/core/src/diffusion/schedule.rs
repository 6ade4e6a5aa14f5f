//! Variance schedule and the forward/reverse diffusion transitions.
//!
//! Timesteps are 1-based: `t` in `[1, steps]` indexes a noising step, and
//! `alpha_bar(0) == 1` denotes the clean signal. The reverse transition is
//! ancestral sampling with the posterior variance.

use crate::tensor::Tensor;
use crate::{Error, Result};
use ndarray::{Array1, ArrayD};

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Array1<f64>,
    /// `alpha_bars[t]` is the cumulative product of `1 - beta` over the
    /// first `t` steps; index 0 is exactly 1.
    alpha_bars: Array1<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `1e-4` to `0.02` over `steps` steps.
    pub fn linear(steps: usize) -> Self {
        assert!(steps >= 1, "schedule needs at least one step");
        let betas = if steps == 1 {
            Array1::from_elem(1, 1e-4)
        } else {
            Array1::linspace(1e-4, 0.02, steps)
        };
        NoiseSchedule::from_betas(betas).expect("linear ramp is always valid")
    }

    pub fn from_betas(betas: Array1<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::validation("empty beta schedule"));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !b.is_finite() || !(0.0..1.0).contains(&b) || b == 0.0 {
                return Err(Error::validation(format!("beta[{i}] = {b} outside (0, 1)")));
            }
        }
        let mut alpha_bars = Array1::<f64>::zeros(betas.len() + 1);
        alpha_bars[0] = 1.0;
        for (i, &b) in betas.iter().enumerate() {
            alpha_bars[i + 1] = alpha_bars[i] * (1.0 - b);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `t` in `[1, steps]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `t` in `[0, steps]`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Forward process: `z_t = sqrt(alpha_bar) z_0 + sqrt(1 - alpha_bar) eps`.
    pub fn add_noise(&self, z0: &ArrayD<f64>, eps: &ArrayD<f64>, t: usize) -> ArrayD<f64> {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} out of range");
        let ab = self.alpha_bar(t);
        z0 * ab.sqrt() + eps * (1.0 - ab).sqrt()
    }

    /// Forward process inside the autodiff graph.
    pub fn add_noise_graph(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Tensor {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} out of range");
        let ab = self.alpha_bar(t);
        z0.scale(ab.sqrt()).add(&eps.scale((1.0 - ab).sqrt()))
    }

    /// One ancestral reverse step from `z_t` to `z_{t-1}` given the noise
    /// estimate. `noise` must be `None` at `t == 1` (the final step is
    /// deterministic) and fresh standard normal otherwise.
    pub fn step(
        &self,
        z_t: &ArrayD<f64>,
        eps_hat: &ArrayD<f64>,
        t: usize,
        noise: Option<&ArrayD<f64>>,
    ) -> ArrayD<f64> {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} out of range");
        let beta = self.beta(t);
        let alpha = 1.0 - beta;
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let mean = (z_t - &(eps_hat * (beta / (1.0 - ab_t).sqrt()))) / alpha.sqrt();
        if t == 1 {
            assert!(noise.is_none(), "no noise is added on the final step");
            mean
        } else {
            let var = (1.0 - ab_prev) / (1.0 - ab_t) * beta;
            let n = noise.expect("reverse step at t > 1 needs noise");
            mean + n * var.sqrt()
        }
    }
}
