use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::sample::MultimodalSample;
use crate::error::{Error, Result};
use crate::rng;

/// Granularity of within-modality dropout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Every cell of the affected modality is dropped independently.
    #[default]
    Cell,
    /// Whole time steps (rows) of the affected modality are dropped.
    Timestep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingnessConfig {
    /// Fraction of samples that get an affected modality.
    pub p_s: f64,
    /// Drop probability inside the affected modality.
    pub p_w: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: MaskMode,
}

impl MissingnessConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p_s", self.p_s), ("p_w", self.p_w)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Which modality of which sample (by dataset position) was affected.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AffectedModality {
    pub index: usize,
    pub modality: usize,
}

/// Simulate missingness in place.
///
/// `round(p_s · n)` samples are picked uniformly without replacement. Each
/// picked sample gets exactly one uniformly chosen affected modality, whose
/// cells (or rows, in [`MaskMode::Timestep`]) are dropped independently with
/// probability `p_w`. A modality with every cell dropped is marked absent.
/// Clean values move to `ground_truth` and dropped cells are zeroed.
pub fn apply_missingness(
    dataset: &mut [MultimodalSample],
    cfg: &MissingnessConfig,
) -> Result<Vec<AffectedModality>> {
    cfg.validate()?;
    let n = dataset.len();
    let count = (cfg.p_s * n as f64).round() as usize;
    if count == 0 {
        return Ok(Vec::new());
    }
    if let Some(s) = dataset.iter().find(|s| s.num_modalities() < 2) {
        return Err(Error::Unsatisfiable(format!(
            "sample {} has {} modality; an affected sample needs another fully observed one",
            s.id,
            s.num_modalities()
        )));
    }
    let mut rng = rng::seeded(cfg.seed);
    let mut picked = index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();

    let mut affected = Vec::with_capacity(count);
    for i in picked {
        let sample = &mut dataset[i];
        let m = rng.random_range(0..sample.num_modalities());
        if sample.ground_truth.is_none() {
            sample.ground_truth = Some(sample.modalities.clone());
        }
        let (rows, cols) = (sample.masks[m].rows(), sample.masks[m].cols());
        let mask = &mut sample.masks[m];
        match cfg.mode {
            MaskMode::Cell => {
                for v in mask.data_mut() {
                    if rng.random_bool(cfg.p_w) {
                        *v = 0.0;
                    }
                }
            }
            MaskMode::Timestep => {
                for r in 0..rows {
                    if rng.random_bool(cfg.p_w) {
                        for c in 0..cols {
                            mask.set2(r, c, 0.0);
                        }
                    }
                }
            }
        }
        let x = &mut sample.modalities[m];
        for (v, &keep) in x.data_mut().iter_mut().zip(sample.masks[m].data()) {
            if keep == 0.0 {
                *v = 0.0;
            }
        }
        if sample.masks[m].data().iter().all(|&v| v == 0.0) {
            sample.present[m] = false;
        }
        affected.push(AffectedModality { index: i, modality: m });
    }
    Ok(affected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn dataset(n: usize, m: usize, l: usize, f: usize) -> Vec<MultimodalSample> {
        (0..n)
            .map(|i| {
                let mods = (0..m)
                    .map(|k| Tensor::full(&[l, f], 1.0 + k as f64 + i as f64))
                    .collect();
                MultimodalSample::fully_observed(i as u64, mods, i % 2)
            })
            .collect()
    }

    fn cfg(p_s: f64, p_w: f64) -> MissingnessConfig {
        MissingnessConfig {
            p_s,
            p_w,
            seed: 11,
            mode: MaskMode::Cell,
        }
    }

    #[test]
    fn zero_ratio_touches_nothing() {
        let mut d = dataset(50, 3, 4, 2);
        let before = d.clone();
        assert!(apply_missingness(&mut d, &cfg(0.0, 0.8)).unwrap().is_empty());
        assert_eq!(d, before);
    }

    #[test]
    fn full_drop_removes_exactly_one_modality() {
        let mut d = dataset(40, 2, 5, 3);
        apply_missingness(&mut d, &cfg(1.0, 1.0)).unwrap();
        for s in &d {
            let absent: Vec<usize> = (0..2).filter(|&m| !s.present[m]).collect();
            assert_eq!(absent.len(), 1);
            let m = absent[0];
            assert!(s.masks[m].data().iter().all(|&v| v == 0.0));
            assert!(s.masks[1 - m].data().iter().all(|&v| v == 1.0));
            s.validate().unwrap();
        }
    }

    #[test]
    fn single_modality_is_unsatisfiable() {
        let mut d = dataset(4, 1, 3, 1);
        assert!(matches!(
            apply_missingness(&mut d, &cfg(1.0, 0.5)),
            Err(Error::Unsatisfiable(_))
        ));
    }

    #[test]
    fn dropped_cells_are_zeroed_and_truth_kept() {
        let mut d = dataset(10, 3, 6, 2);
        let clean = d.clone();
        apply_missingness(&mut d, &cfg(1.0, 0.5)).unwrap();
        for (s, c) in d.iter().zip(&clean) {
            assert_eq!(s.ground_truth.as_ref().unwrap(), &c.modalities);
            assert!(s.mask_concat().data().iter().all(|&m| m == 0.0 || m == 1.0));
            // Observed/unobserved partition of the clean values.
            let recomposed = s
                .observed_concat()
                .zip_map(&s.unobserved_concat(), |a, b| a + b)
                .unwrap();
            assert_eq!(recomposed, c.clean_concat());
        }
    }

    #[test]
    fn timestep_mode_drops_whole_rows() {
        let mut d = dataset(30, 2, 8, 3);
        let cfg = MissingnessConfig {
            mode: MaskMode::Timestep,
            ..cfg(1.0, 0.5)
        };
        apply_missingness(&mut d, &cfg).unwrap();
        for s in &d {
            for r in &s.masks {
                for row in r.data().chunks(3) {
                    assert!(row.iter().all(|&v| v == row[0]));
                }
            }
        }
    }

    #[test]
    fn rejects_out_of_range_ratios() {
        let mut d = dataset(3, 2, 2, 1);
        assert!(apply_missingness(&mut d, &cfg(1.2, 0.1)).is_err());
        assert!(apply_missingness(&mut d, &cfg(0.1, -0.1)).is_err());
    }
}
