//! Test-set evaluation and the zero-fill versus imputation feature analysis.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{apply_missingness, split_features, MissingnessConfig, MultimodalSample};
use crate::diffusion::{impute_all, ConditionalDenoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::task::{inference_inputs, predict, Prediction};

use super::metrics::{compute_metrics, ClassificationMetrics};

/// A trained bundle plus the settings used to run inference with it.
pub struct Evaluator<'a> {
    pub bundle: &'a ModelBundle,
    pub schedule: &'a DiffusionSchedule,
    pub n_realizations: usize,
    pub no_cond: bool,
    pub seed: u64,
    pub parallel: bool,
}

impl Evaluator<'_> {
    fn check_trained(&self) -> Result<()> {
        if !self.bundle.trained {
            return Err(Error::State("evaluation needs a trained model".into()));
        }
        if !self.bundle.params.is_finite() {
            return Err(Error::NumericOverflow { op: "evaluate" });
        }
        Ok(())
    }

    /// Reconstructed `x̂` for every sample.
    pub fn impute(&self, samples: &[MultimodalSample]) -> Result<Vec<Tensor>> {
        self.check_trained()?;
        let model = ConditionalDenoiser {
            config: &self.bundle.config,
            no_cond: self.no_cond,
        };
        impute_all(
            &model,
            &self.bundle.params,
            self.schedule,
            samples,
            self.n_realizations,
            self.seed,
            self.parallel,
        )
    }

    /// Predictions from `x̂` when `imputed` is given, else from zero-filled
    /// observations.
    pub fn predict_all(&self, samples: &[MultimodalSample], imputed: Option<&[Tensor]>) -> Result<Vec<Prediction>> {
        self.check_trained()?;
        if let Some(xs) = imputed {
            if xs.len() != samples.len() {
                return Err(Error::shape("predict_all", format!("{} imputations for {} samples", xs.len(), samples.len())));
            }
        }
        let one = |i: usize| {
            let s = &samples[i];
            let (x, m) = inference_inputs(s, imputed.map(|xs| &xs[i]));
            predict(&self.bundle.params, &self.bundle.config, &x, &m, &s.present, self.no_cond)
        };
        if self.parallel {
            (0..samples.len()).into_par_iter().map(one).collect()
        } else {
            (0..samples.len()).map(one).collect()
        }
    }

    pub fn metrics(&self, samples: &[MultimodalSample], imputed: Option<&[Tensor]>) -> Result<ClassificationMetrics> {
        let preds = self.predict_all(samples, imputed)?;
        let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let probs: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probs).collect();
        compute_metrics(&classes, &labels, &probs, self.bundle.config.classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDistanceRecord {
    pub sample_id: u64,
    pub d_zero_l2: f64,
    pub d_imp_l2: f64,
    pub d_zero_cos: f64,
    pub d_imp_cos: f64,
    /// A zero vector took part in a cosine distance, which was then set to 1.
    #[serde(default)]
    pub degenerate: bool,
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `1 − cos(a, b)`, clamped to `[0, 2]`. Returns `(1, true)` when either
/// vector is zero.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> (f64, bool) {
    let na2: f64 = a.iter().map(|v| v * v).sum();
    let nb2: f64 = b.iter().map(|v| v * v).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return (1.0, true);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    // sqrt(s · s) == s exactly, so a vector against itself gives exactly 0.
    ((1.0 - dot / (na2 * nb2).sqrt()).clamp(0.0, 2.0), false)
}

/// Fractions of records where imputation is strictly closer to the clean
/// features than zero-fill, by L2 and by cosine distance.
pub fn improvement_fractions(records: &[FeatureDistanceRecord]) -> (f64, f64) {
    if records.is_empty() {
        return (0.0, 0.0);
    }
    let n = records.len() as f64;
    let l2 = records.iter().filter(|r| r.d_imp_l2 < r.d_zero_l2).count() as f64 / n;
    let cos = records.iter().filter(|r| r.d_imp_cos < r.d_zero_cos).count() as f64 / n;
    (l2, cos)
}

/// `sample` with its ground truth restored and every cell observed.
pub fn clean_copy(sample: &MultimodalSample) -> MultimodalSample {
    let clean = split_features(&sample.clean_concat(), &sample.feature_widths());
    MultimodalSample::fully_observed(sample.id, clean, sample.label)
}

/// Mask every clean test sample with `mask`, then compare the classifier
/// input built from zero-filled and from imputed data against the one built
/// from the clean data.
pub fn feature_reconstruction_analysis(
    ev: &Evaluator<'_>,
    test: &[MultimodalSample],
    mask: &MissingnessConfig,
) -> Result<Vec<FeatureDistanceRecord>> {
    ev.check_trained()?;
    let clean: Vec<MultimodalSample> = test.iter().map(clean_copy).collect();
    let mut masked = clean.clone();
    apply_missingness(&mut masked, mask)?;
    let imputed = ev.impute(&masked)?;
    let f_clean = ev.predict_all(&clean, None)?;
    let f_zero = ev.predict_all(&masked, None)?;
    let f_imp = ev.predict_all(&masked, Some(&imputed))?;
    Ok(clean
        .iter()
        .zip(f_clean.iter().zip(f_zero.iter().zip(&f_imp)))
        .map(|(s, (c, (z, i)))| {
            let (c, z, i) = (c.fused.as_slice(), z.fused.as_slice(), i.fused.as_slice());
            let (d_zero_cos, dz) = cosine_distance(z, c);
            let (d_imp_cos, di) = cosine_distance(i, c);
            FeatureDistanceRecord {
                sample_id: s.id,
                d_zero_l2: l2_distance(z, c),
                d_imp_l2: l2_distance(i, c),
                d_zero_cos,
                d_imp_cos,
                degenerate: dz || di,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, MaskMode, SyntheticConfig};
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            modalities: 2,
            features: 1,
            l_ts: 8,
            embed_dim: 4,
            context_dim: 4,
            expert_hidden: 4,
            denoiser_hidden: 8,
            denoiser_blocks: 1,
            time_embed_dim: 4,
            encoder_width: 4,
            classifier_hidden: 4,
            ..Default::default()
        }
    }

    fn data() -> Vec<MultimodalSample> {
        generate_synthetic(&SyntheticConfig {
            n: 8,
            modalities: 2,
            l_ts: 8,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn cosine_guards_and_extremes() {
        let a = [1.0, -2.0, 0.5];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_eq!(cosine_distance(&a, &a).0, 0.0);
        assert_eq!(cosine_distance(&a, &neg).0, 2.0);
        assert_eq!(cosine_distance(&a, &[0.0; 3]), (1.0, true));
        assert_eq!(l2_distance(&a, &a), 0.0);
    }

    #[test]
    fn untrained_bundle_is_an_error() {
        let b = ModelBundle::init(cfg(), 0).unwrap();
        let sched = DiffusionSchedule::linear(3, 1e-4, 0.2).unwrap();
        let ev = Evaluator {
            bundle: &b,
            schedule: &sched,
            n_realizations: 1,
            no_cond: false,
            seed: 0,
            parallel: false,
        };
        let mask = MissingnessConfig { p_s: 1.0, p_w: 0.2, seed: 0, mode: MaskMode::Timestep };
        assert!(matches!(feature_reconstruction_analysis(&ev, &data(), &mask), Err(Error::State(_))));
    }

    #[test]
    fn no_masking_means_no_distance() {
        let mut b = ModelBundle::init(cfg(), 0).unwrap();
        b.trained = true;
        let sched = DiffusionSchedule::linear(3, 1e-4, 0.2).unwrap();
        let ev = Evaluator {
            bundle: &b,
            schedule: &sched,
            n_realizations: 1,
            no_cond: false,
            seed: 0,
            parallel: false,
        };
        let mask = MissingnessConfig {
            p_s: 0.0,
            p_w: 0.2,
            seed: 1,
            mode: MaskMode::Timestep,
        };
        for r in feature_reconstruction_analysis(&ev, &data(), &mask).unwrap() {
            assert_eq!((r.d_zero_l2, r.d_imp_l2, r.d_zero_cos, r.d_imp_cos), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn analysis_is_reproducible() {
        let mut b = ModelBundle::init(cfg(), 1).unwrap();
        b.trained = true;
        let sched = DiffusionSchedule::linear(3, 1e-4, 0.2).unwrap();
        let run = |parallel| {
            let ev = Evaluator {
                bundle: &b,
                schedule: &sched,
                n_realizations: 1,
                no_cond: false,
                seed: 4,
                parallel,
            };
            let mask = MissingnessConfig {
                p_s: 1.0,
                p_w: 0.2,
                seed: 2,
                mode: MaskMode::Timestep,
            };
            feature_reconstruction_analysis(&ev, &data(), &mask).unwrap()
        };
        let a = run(false);
        assert_eq!(a, run(true));
        assert_eq!(improvement_fractions(&a), improvement_fractions(&run(false)));
    }
}
