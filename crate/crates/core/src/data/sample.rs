use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// One multimodal record: `M` modality matrices of shape `[L_ts, L_f]`, a
/// per-modality presence indicator and per-cell observation masks.
///
/// Missing cells hold `0.0` in `modalities`. When missingness was simulated,
/// the clean values are kept in `ground_truth`; only evaluation code reads it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub id: u64,
    pub modalities: Vec<Tensor>,
    pub label: usize,
    pub present: Vec<bool>,
    pub masks: Vec<Tensor>,
    pub ground_truth: Option<Vec<Tensor>>,
}

impl MultimodalSample {
    pub fn fully_observed(id: u64, modalities: Vec<Tensor>, label: usize) -> Self {
        let masks = modalities.iter().map(|x| Tensor::ones(x.shape())).collect();
        let present = vec![true; modalities.len()];
        MultimodalSample {
            id,
            modalities,
            label,
            present,
            masks,
            ground_truth: None,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn len_ts(&self) -> usize {
        self.modalities.first().map_or(0, |x| x.rows())
    }

    pub fn feature_widths(&self) -> Vec<usize> {
        self.modalities.iter().map(|x| x.cols()).collect()
    }

    /// Indices of modalities with `present[m]`.
    pub fn observed_modalities(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&m| self.present[m]).collect()
    }

    /// `x^O`: masked values of every modality concatenated along features.
    pub fn observed_concat(&self) -> Tensor {
        let masked: Vec<Tensor> = self
            .modalities
            .iter()
            .zip(&self.masks)
            .map(|(x, r)| x.zip_map(r, |v, m| v * m).expect("mask shape"))
            .collect();
        concat_features(&masked)
    }

    /// Observation masks concatenated along features.
    pub fn mask_concat(&self) -> Tensor {
        concat_features(&self.masks)
    }

    /// Complete values: ground truth when retained, otherwise the stored values.
    pub fn clean_concat(&self) -> Tensor {
        concat_features(self.ground_truth.as_ref().unwrap_or(&self.modalities))
    }

    /// `x^U`: values on unobserved cells (needs retained ground truth to be non-zero).
    pub fn unobserved_concat(&self) -> Tensor {
        let clean = self.clean_concat();
        clean
            .zip_map(&self.mask_concat(), |v, m| v * (1.0 - m))
            .expect("mask shape")
    }

    pub fn missing_cells(&self) -> usize {
        self.masks
            .iter()
            .map(|r| r.data().iter().filter(|&&v| v == 0.0).count())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modalities.len();
        if self.masks.len() != m || self.present.len() != m {
            return Err(Error::shape(
                "sample",
                format!("sample {}: {m} modalities, {} masks, {} indicators", self.id, self.masks.len(), self.present.len()),
            ));
        }
        let l = self.len_ts();
        for (k, (x, r)) in self.modalities.iter().zip(&self.masks).enumerate() {
            if x.rank() != 2 || x.rows() != l || x.shape() != r.shape() {
                return Err(Error::shape(
                    "sample",
                    format!("sample {} modality {k}: values {:?}, mask {:?}", self.id, x.shape(), r.shape()),
                ));
            }
            if !self.present[k] && r.data().iter().any(|&v| v != 0.0) {
                return Err(Error::State(format!(
                    "sample {}: modality {k} is marked absent but has observed cells",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Concatenate `[L, f_i]` matrices into `[L, Σ f_i]`.
pub fn concat_features(parts: &[Tensor]) -> Tensor {
    let rows = parts.first().map_or(0, |p| p.rows());
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::matrix(rows, total, out).expect("consistent rows")
}

/// Inverse of [`concat_features`].
pub fn split_features(x: &Tensor, widths: &[usize]) -> Vec<Tensor> {
    let rows = x.rows();
    let mut out: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
    for r in 0..rows {
        let row = x.row(r);
        let mut off = 0;
        for (o, &w) in out.iter_mut().zip(widths) {
            o.extend_from_slice(&row[off..off + w]);
            off += w;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(d, &w)| Tensor::matrix(rows, w, d).expect("widths"))
        .collect()
}
