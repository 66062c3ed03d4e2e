//! Experiment configuration, loaded from TOML. Unknown keys are rejected and
//! every numeric range is checked at load time.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{MaskMode, MissingnessConfig};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::federation::LocalTraining;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// CSV file with `sample_id,time,m<i>_f<j>...,label` columns.
    pub csv_path: Option<PathBuf>,
    pub n: usize,
    pub modalities: usize,
    pub l_ts: usize,
    pub l_f: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub class_offset: f64,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            csv_path: None,
            n: 1000,
            modalities: 3,
            l_ts: 24,
            l_f: 1,
            classes: 2,
            noise_sigma: 0.1,
            class_offset: 0.5,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissingnessSection {
    pub p_s: f64,
    pub p_w: f64,
    pub mode: MaskMode,
}

impl Default for MissingnessSection {
    fn default() -> Self {
        MissingnessSection {
            p_s: 0.2,
            p_w: 0.2,
            mode: MaskMode::Cell,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub overlap_ratio: f64,
    pub dirichlet_alpha: f64,
    /// Write `ckpt/round_<t>.bin` every this many rounds (and after the last).
    pub checkpoint_every: usize,
    /// Train the selected clients of a round concurrently.
    pub parallel: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            clients: 6,
            participation: 0.5,
            rounds: 30,
            overlap_ratio: 0.0,
            dirichlet_alpha: 1.0,
            checkpoint_every: 10,
            parallel: false,
        }
    }
}

/// Architecture widths; sizes tied to the data come from the data section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
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

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            embed_dim: m.embed_dim,
            context_dim: m.context_dim,
            experts: m.experts,
            top_k: m.top_k,
            expert_hidden: m.expert_hidden,
            denoiser_hidden: m.denoiser_hidden,
            denoiser_blocks: m.denoiser_blocks,
            denoiser_kernel: m.denoiser_kernel,
            time_embed_dim: m.time_embed_dim,
            encoder_width: m.encoder_width,
            encoder_kernel: m.encoder_kernel,
            classifier_hidden: m.classifier_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub mask_ratio: [f64; 2],
    pub n_realizations: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.5,
            mask_ratio: [0.1, 0.9],
            n_realizations: 1,
        }
    }
}

impl DiffusionSection {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_min, self.beta_max)
    }

    pub fn mask_ratio(&self) -> (f64, f64) {
        (self.mask_ratio[0], self.mask_ratio[1])
    }
}

/// Masking used by the zero-fill versus imputation feature analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub enabled: bool,
    pub p_s: f64,
    pub p_w: f64,
    pub mode: MaskMode,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            enabled: true,
            p_s: 1.0,
            p_w: 0.2,
            mode: MaskMode::Timestep,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Classify zero-filled observations instead of imputed data at inference.
    pub no_imputation: bool,
    /// Replace every routed condition with a zero vector.
    pub no_cond: bool,
}

impl AblationFlags {
    pub fn name(&self) -> &'static str {
        match (self.no_imputation, self.no_cond) {
            (false, false) => "full",
            (true, false) => "no_imputation",
            (false, true) => "no_cond",
            (true, true) => "no_imputation+no_cond",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub missingness: MissingnessSection,
    pub federation: FederationSection,
    pub training: LocalTraining,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub analysis: AnalysisSection,
    pub ablation: AblationFlags,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataSection::default(),
            missingness: MissingnessSection::default(),
            federation: FederationSection::default(),
            training: LocalTraining::default(),
            model: ModelSection::default(),
            diffusion: DiffusionSection::default(),
            analysis: AnalysisSection::default(),
            ablation: AblationFlags::default(),
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        let (d, m) = (&self.data, &self.model);
        ModelConfig {
            modalities: d.modalities,
            features: d.l_f,
            l_ts: d.l_ts,
            classes: d.classes,
            embed_dim: m.embed_dim,
            context_dim: m.context_dim,
            experts: m.experts,
            top_k: m.top_k,
            expert_hidden: m.expert_hidden,
            denoiser_hidden: m.denoiser_hidden,
            denoiser_blocks: m.denoiser_blocks,
            denoiser_kernel: m.denoiser_kernel,
            time_embed_dim: m.time_embed_dim,
            encoder_width: m.encoder_width,
            encoder_kernel: m.encoder_kernel,
            classifier_hidden: m.classifier_hidden,
        }
    }

    /// Missingness applied to the training and test splits.
    pub fn missingness_config(&self, seed: u64) -> MissingnessConfig {
        MissingnessConfig {
            p_s: self.missingness.p_s,
            p_w: self.missingness.p_w,
            seed,
            mode: self.missingness.mode,
        }
    }

    pub fn analysis_mask(&self, seed: u64) -> MissingnessConfig {
        MissingnessConfig {
            p_s: self.analysis.p_s,
            p_w: self.analysis.p_w,
            seed,
            mode: self.analysis.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.source == DataSource::Csv && d.csv_path.is_none() {
            return Err(Error::Config("data.source = \"csv\" needs data.csv_path".into()));
        }
        if d.n == 0 || d.modalities < 2 || d.l_ts < 2 || d.l_f == 0 || d.classes < 2 {
            return Err(Error::Config(
                "data needs n >= 1, modalities >= 2, l_ts >= 2, l_f >= 1, classes >= 2".into(),
            ));
        }
        if !d.noise_sigma.is_finite() || d.noise_sigma < 0.0 {
            return Err(Error::Config("data.noise_sigma must be >= 0".into()));
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::Config("data.test_fraction must lie in (0, 1)".into()));
        }
        unit("missingness.p_s", self.missingness.p_s)?;
        unit("missingness.p_w", self.missingness.p_w)?;
        unit("analysis.p_s", self.analysis.p_s)?;
        unit("analysis.p_w", self.analysis.p_w)?;

        let f = &self.federation;
        if f.clients == 0 || f.rounds == 0 {
            return Err(Error::Config("federation needs clients >= 1 and rounds >= 1".into()));
        }
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return Err(Error::Config("federation.participation must lie in (0, 1]".into()));
        }
        if (f.participation * f.clients as f64).round() < 1.0 {
            return Err(Error::Config("federation.participation selects no client".into()));
        }
        unit("federation.overlap_ratio", f.overlap_ratio)?;
        if !f.dirichlet_alpha.is_finite() || f.dirichlet_alpha <= 0.0 {
            return Err(Error::Config("federation.dirichlet_alpha must be > 0".into()));
        }
        if f.checkpoint_every == 0 {
            return Err(Error::Config("federation.checkpoint_every must be >= 1".into()));
        }

        self.training.validate()?;
        self.model_config().validate()?;

        let df = &self.diffusion;
        self.diffusion.schedule()?;
        let [lo, hi] = df.mask_ratio;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("diffusion.mask_ratio [{lo}, {hi}] is not an interval in [0, 1]")));
        }
        if df.n_realizations == 0 {
            return Err(Error::Config("diffusion.n_realizations must be >= 1".into()));
        }
        Ok(())
    }
}
