use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Linear-β DDPM noise schedule. Steps are 1-based: `beta(t)` for
/// `t ∈ 1..=steps`, and `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let ok = if steps == 1 {
            beta_min > 0.0 && beta_min < 1.0
        } else {
            0.0 < beta_min && beta_min < beta_max && beta_max < 1.0
        };
        if !ok {
            return Err(Error::Config(format!(
                "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_min]
        } else {
            (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    /// Build from an explicit strictly increasing β sequence in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty()
            || betas.iter().any(|&b| !(b > 0.0 && b < 1.0))
            || betas.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config("betas must be strictly increasing in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(DiffusionSchedule { betas, alphas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Variance of the reverse-step posterior, `(1 - ᾱ_{t-1}) / (1 - ᾱ_t) · β_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::Config(format!("step {t} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t · z_0 + √(1 - ᾱ_t) · ε`.
    pub fn q_sample(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0.zip_map(eps, |z, e| a * z + b * e)
    }

    /// Forward noising on the cells where `target` is 1; other cells keep `z_0`.
    pub fn q_sample_masked(&self, z0: &Tensor, t: usize, eps: &Tensor, target: &Tensor) -> Result<Tensor> {
        let noised = self.q_sample(z0, t, eps)?;
        let mut out = z0.clone();
        if target.shape() != z0.shape() {
            return Err(Error::shape("q_sample", format!("mask {:?} for {:?}", target.shape(), z0.shape())));
        }
        for ((o, &n), &m) in out.data_mut().iter_mut().zip(noised.data()).zip(target.data()) {
            if m != 0.0 {
                *o = n;
            }
        }
        Ok(out)
    }

    /// Posterior mean `(1/√α_t)(z_t − β_t/√(1−ᾱ_t) · ε̂)`.
    pub fn posterior_mean(&self, z_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        if t == 0 {
            return Err(Error::Config("reverse step needs t >= 1".into()));
        }
        self.check_step(t)?;
        let coef = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        let inv = 1.0 / self.alpha(t).sqrt();
        z_t.zip_map(eps_hat, |z, e| inv * (z - coef * e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = DiffusionSchedule::from_betas(vec![0.5]).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
        assert_eq!(DiffusionSchedule::linear(1, 0.5, 0.9).unwrap().alpha_bars(), &[0.5]);
    }

    #[test]
    fn cumulative_product_identity() {
        let s = DiffusionSchedule::linear(50, 1e-4, 0.5).unwrap();
        for t in 1..=50 {
            let ratio = s.alpha_bar(t) / s.alpha_bar(t - 1);
            assert!((ratio - s.alpha(t)).abs() < 1e-12);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn log_domain_oracle() {
        let s = DiffusionSchedule::linear(50, 1e-4, 0.1).unwrap();
        let log_sum: f64 = (0..50)
            .map(|i| (1.0 - (1e-4 + (0.1 - 1e-4) * i as f64 / 49.0)).ln())
            .sum();
        assert!((s.alpha_bar(50) - log_sum.exp()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_ranges() {
        for (t, a, b) in [(0, 1e-4, 0.1), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)] {
            assert!(matches!(DiffusionSchedule::linear(t, a, b), Err(Error::Config(_))));
        }
    }

    #[test]
    fn q_sample_closed_forms() {
        let s = DiffusionSchedule::from_betas(vec![0.25]).unwrap();
        let z0 = Tensor::vector(vec![0.0, 0.0]);
        let eps = Tensor::vector(vec![1.0, -2.0]);
        assert_eq!(s.q_sample(&z0, 1, &eps).unwrap().data(), &[0.5, -1.0]);
        let z0 = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(s.q_sample(&z0, 0, &eps).unwrap(), z0);
        assert!(s.q_sample(&z0, 2, &eps).is_err());
    }

    #[test]
    fn masked_noising_keeps_other_cells() {
        let s = DiffusionSchedule::linear(10, 1e-3, 0.2).unwrap();
        let z0 = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let eps = Tensor::vector(vec![5.0, 5.0, 5.0]);
        let mask = Tensor::vector(vec![0.0, 1.0, 0.0]);
        let z = s.q_sample_masked(&z0, 7, &eps, &mask).unwrap();
        assert_eq!(z.data()[0], 1.0);
        assert_eq!(z.data()[2], 3.0);
        assert_ne!(z.data()[1], 2.0);
    }

    #[test]
    fn one_step_inversion_with_true_noise() {
        let s = DiffusionSchedule::from_betas(vec![0.3]).unwrap();
        let z0 = Tensor::vector(vec![0.7, -1.2, 2.5]);
        let eps = Tensor::vector(vec![0.1, 1.9, -0.4]);
        let z1 = s.q_sample(&z0, 1, &eps).unwrap();
        let back = s.posterior_mean(&z1, 1, &eps).unwrap();
        for (a, b) in back.data().iter().zip(z0.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
