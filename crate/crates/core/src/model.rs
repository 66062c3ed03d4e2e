//! Architecture hyperparameters and the aggregatable parameter bundle.

use serde::{Deserialize, Serialize};

use crate::autodiff::{init, ParamMap, Tensor};
use crate::diffusion::DiffusionSchedule;
use crate::embedding::{CondEmbedding, ModEmbedding, W_COND, W_MOD};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub modalities: usize,
    /// Features per modality.
    pub features: usize,
    pub l_ts: usize,
    pub classes: usize,
    /// Prompt embedding width `D`.
    pub embed_dim: usize,
    /// Width of the observed-context features from the mixture-of-experts encoder.
    pub context_dim: usize,
    pub experts: usize,
    pub top_k: usize,
    pub expert_hidden: usize,
    pub denoiser_hidden: usize,
    pub denoiser_blocks: usize,
    pub denoiser_kernel: usize,
    pub time_embed_dim: usize,
    pub encoder_width: usize,
    pub encoder_kernel: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            modalities: 3,
            features: 1,
            l_ts: 24,
            classes: 2,
            embed_dim: 16,
            context_dim: 16,
            experts: 4,
            top_k: 2,
            expert_hidden: 32,
            denoiser_hidden: 64,
            denoiser_blocks: 4,
            denoiser_kernel: 3,
            time_embed_dim: 32,
            encoder_width: 64,
            encoder_kernel: 5,
            classifier_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Width of the concatenated multimodal feature axis, `M · L_f`.
    pub fn total_features(&self) -> usize {
        self.modalities * self.features
    }

    /// Length of the fused classifier input, `3 · D · M`.
    pub fn fused_dim(&self) -> usize {
        3 * self.embed_dim * self.modalities
    }

    pub fn feature_widths(&self) -> Vec<usize> {
        vec![self.features; self.modalities]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("modalities", self.modalities),
            ("features", self.features),
            ("l_ts", self.l_ts),
            ("embed_dim", self.embed_dim),
            ("context_dim", self.context_dim),
            ("experts", self.experts),
            ("top_k", self.top_k),
            ("expert_hidden", self.expert_hidden),
            ("denoiser_hidden", self.denoiser_hidden),
            ("time_embed_dim", self.time_embed_dim),
            ("encoder_width", self.encoder_width),
            ("classifier_hidden", self.classifier_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be > 0")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("model.classes must be >= 2".into()));
        }
        if self.top_k > self.experts {
            return Err(Error::Config("model.top_k cannot exceed model.experts".into()));
        }
        if self.denoiser_kernel.is_multiple_of(2) || self.encoder_kernel.is_multiple_of(2) {
            return Err(Error::Config("convolution kernels must be odd".into()));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("model.time_embed_dim must be even".into()));
        }
        Ok(())
    }
}

/// Parameter names of the mixture-of-experts context encoder.
pub mod names {
    pub const GATE_W: &str = "moe.gate.w";
    pub const GATE_B: &str = "moe.gate.b";

    pub fn expert(e: usize, part: &str) -> String {
        format!("moe.expert{e}.{part}")
    }

    pub fn block(b: usize, part: &str) -> String {
        format!("den.block{b}.{part}")
    }

    pub fn head(m: usize, part: &str) -> String {
        format!("ins.head{m}.{part}")
    }
}

/// All trainable state of one model: denoiser, context encoder, instance
/// encoder, classifier and prompt embeddings, as one flat parameter map.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamMap,
    /// Set once the bundle has been through at least one training round.
    pub trained: bool,
}

impl ModelBundle {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut p = ParamMap::new();
        let c = &config;
        let f = c.total_features();
        let dense = |p: &mut ParamMap, rng: &mut rng::Rng, w: String, b: String, fan_in: usize, fan_out: usize| {
            p.insert(w, init::xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out));
            p.insert(b, Tensor::zeros(&[fan_out]));
        };

        // Context encoder: per-time-step input is [values ⊙ mask, mask].
        dense(&mut p, &mut rng, names::GATE_W.into(), names::GATE_B.into(), 2 * f, c.experts);
        for e in 0..c.experts {
            dense(&mut p, &mut rng, names::expert(e, "fc1.w"), names::expert(e, "fc1.b"), 2 * f, c.expert_hidden);
            dense(&mut p, &mut rng, names::expert(e, "fc2.w"), names::expert(e, "fc2.b"), c.expert_hidden, c.context_dim);
        }

        // Denoiser.
        let h = c.denoiser_hidden;
        let den_in = 3 * f + c.context_dim + c.modalities * c.embed_dim;
        dense(&mut p, &mut rng, "den.in.w".into(), "den.in.b".into(), den_in, h);
        dense(&mut p, &mut rng, "den.temb.w".into(), "den.temb.b".into(), c.time_embed_dim, h);
        let k = c.denoiser_kernel;
        for b in 0..c.denoiser_blocks {
            p.insert(names::block(b, "ln.g"), Tensor::ones(&[h]));
            p.insert(names::block(b, "ln.b"), Tensor::zeros(&[h]));
            for conv in ["conv1", "conv2"] {
                p.insert(
                    names::block(b, &format!("{conv}.w")),
                    init::xavier_uniform(&mut rng, &[k, h, h], k * h, k * h),
                );
                p.insert(names::block(b, &format!("{conv}.b")), Tensor::zeros(&[h]));
            }
            dense(&mut p, &mut rng, names::block(b, "t.w"), names::block(b, "t.b"), h, h);
        }
        dense(&mut p, &mut rng, "den.out.w".into(), "den.out.b".into(), h, f);

        // Instance encoder: shared conv backbone, one head per modality.
        let (ke, we) = (c.encoder_kernel, c.encoder_width);
        p.insert("ins.conv.w", init::xavier_uniform(&mut rng, &[ke, 2 * f, we], ke * 2 * f, ke * we));
        p.insert("ins.conv.b", Tensor::zeros(&[we]));
        for m in 0..c.modalities {
            dense(&mut p, &mut rng, names::head(m, "w"), names::head(m, "b"), we, c.embed_dim);
        }

        // Classifier.
        dense(&mut p, &mut rng, "cls.fc1.w".into(), "cls.fc1.b".into(), c.fused_dim(), c.classifier_hidden);
        dense(&mut p, &mut rng, "cls.fc2.w".into(), "cls.fc2.b".into(), c.classifier_hidden, c.classes);

        p.insert(W_COND, CondEmbedding::init(c.modalities, c.embed_dim, &mut rng).into_tensor());
        p.insert(W_MOD, ModEmbedding::init(c.modalities, c.embed_dim, &mut rng).into_tensor());

        Ok(ModelBundle {
            config,
            params: p,
            trained: false,
        })
    }

    /// Restore from a serialized parameter map; the result counts as trained.
    pub fn from_params(config: ModelConfig, params: ParamMap) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        if !reference.params.same_schema(&params) {
            return Err(Error::Protocol(
                "parameter map does not match the model configuration".into(),
            ));
        }
        Ok(ModelBundle {
            config,
            params,
            trained: true,
        })
    }
}

/// Everything needed to run the diffusion side of a model.
#[derive(Clone, Debug)]
pub struct DiffusionContext<'a> {
    pub config: &'a ModelConfig,
    pub schedule: &'a DiffusionSchedule,
    pub mask_ratio: (f64, f64),
    pub no_cond: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_named() {
        let a = ModelBundle::init(ModelConfig::default(), 4).unwrap();
        let b = ModelBundle::init(ModelConfig::default(), 4).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert!(a.params.get(W_COND).unwrap().shape() == [3, 3, 16]);
        assert!(a.params.get(W_MOD).unwrap().shape() == [3, 16]);
        assert!(a.params.names().all(|n| n.contains('.')));
    }

    #[test]
    fn biases_start_at_zero() {
        let a = ModelBundle::init(ModelConfig::default(), 1).unwrap();
        for (name, e) in a.params.iter() {
            if name.ends_with(".b") && !name.ends_with("ln.b") {
                assert!(e.value.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let a = ModelBundle::init(ModelConfig::default(), 1).unwrap();
        let other = ModelConfig {
            embed_dim: 8,
            ..Default::default()
        };
        assert!(ModelBundle::from_params(other, a.params).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ModelConfig {
            top_k: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            denoiser_kernel: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
