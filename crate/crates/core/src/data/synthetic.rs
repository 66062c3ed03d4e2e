//! Coupled multimodal time series with known ground truth.
//!
//! Modality 0 is a class-conditioned sum of sinusoids. Every other modality
//! is a fixed lag, scale and pointwise nonlinearity of modality 0's clean
//! signal, so values missing from one modality are recoverable from the
//! others.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sample::MultimodalSample;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub modalities: usize,
    pub l_ts: usize,
    pub l_f: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    /// Shift of the modality-0 mean between consecutive classes.
    pub class_offset: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 1000,
            modalities: 3,
            l_ts: 24,
            l_f: 1,
            classes: 2,
            noise_sigma: 0.1,
            class_offset: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    SignedSquare,
    Sine,
}

impl Nonlinearity {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::SignedSquare => 0.5 * v * v.abs(),
            Nonlinearity::Sine => v.sin(),
        }
    }
}

/// Deterministic map from modality 0 to modality `m > 0`:
/// `y[t, f] = nl(scale · x[(t - lag) mod L, f])`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingTransform {
    pub lag: usize,
    pub scale: f64,
    pub nonlinearity: Nonlinearity,
}

impl CouplingTransform {
    pub fn for_modality(m: usize, l_ts: usize) -> Self {
        assert!(m > 0, "modality 0 is the source");
        let nonlinearity = match (m - 1) % 3 {
            0 => Nonlinearity::Tanh,
            1 => Nonlinearity::SignedSquare,
            _ => Nonlinearity::Sine,
        };
        CouplingTransform {
            lag: (m * (l_ts / 8).max(1)) % l_ts.max(1),
            scale: 1.5 / (1.0 + 0.25 * m as f64),
            nonlinearity,
        }
    }

    pub fn apply(&self, source: &Tensor) -> Tensor {
        let (l, f) = (source.rows(), source.cols());
        let mut out = vec![0.0; l * f];
        for t in 0..l {
            let s = (t + l - self.lag % l) % l;
            for c in 0..f {
                out[t * f + c] = self.nonlinearity.apply(self.scale * source.get2(s, c));
            }
        }
        Tensor::matrix(l, f, out).expect("shape")
    }
}

/// Generate `cfg.n` fully observed samples.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<MultimodalSample>> {
    if cfg.modalities < 2 {
        return Err(Error::Config("synthetic data needs at least 2 modalities".into()));
    }
    if cfg.classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if cfg.l_ts < 4 || cfg.l_f == 0 || cfg.n == 0 {
        return Err(Error::Config(format!(
            "degenerate synthetic shape n={} l_ts={} l_f={}",
            cfg.n, cfg.l_ts, cfg.l_f
        )));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
    }
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma checked");
    let transforms: Vec<CouplingTransform> = (1..cfg.modalities)
        .map(|m| CouplingTransform::for_modality(m, cfg.l_ts))
        .collect();
    let (l, f) = (cfg.l_ts, cfg.l_f);
    // Whole cycles over the window, so the time mean of each sinusoid is zero.
    let max_cycles = (l / 2 - 1).max(1);

    let mut rng = rng::seeded(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let label = rng.random_range(0..cfg.classes);
        let base_cycles = 1 + label % max_cycles;
        let mut clean = vec![0.0; l * f];
        for c in 0..f {
            let amp = rng.random_range(0.8..1.2);
            let phase = rng.random_range(0.0..2.0 * PI);
            let phase2 = rng.random_range(0.0..2.0 * PI);
            let k2 = (base_cycles + 1 + c) % max_cycles + 1;
            for t in 0..l {
                let tt = t as f64 / l as f64;
                clean[t * f + c] = cfg.class_offset * label as f64
                    + amp * (2.0 * PI * base_cycles as f64 * tt + phase).sin()
                    + 0.4 * amp * (2.0 * PI * k2 as f64 * tt + phase2).sin();
            }
        }
        let clean = Tensor::matrix(l, f, clean).expect("shape");
        let mut mods = Vec::with_capacity(cfg.modalities);
        mods.push(add_noise(&clean, &noise, &mut rng));
        for tr in &transforms {
            mods.push(add_noise(&tr.apply(&clean), &noise, &mut rng));
        }
        out.push(MultimodalSample::fully_observed(i as u64, mods, label));
    }
    Ok(out)
}

fn add_noise(x: &Tensor, noise: &Normal<f64>, rng: &mut rng::Rng) -> Tensor {
    if noise.std_dev() == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        *v += noise.sample(rng);
    }
    out
}
