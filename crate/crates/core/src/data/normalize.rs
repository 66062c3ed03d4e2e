use serde::{Deserialize, Serialize};

use super::sample::{concat_features, split_features, MultimodalSample};
use crate::error::{Error, Result};

const SIGMA_FLOOR: f64 = 1e-8;

/// Per-feature z-score statistics over observed cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Fit on the observed cells of `samples` (typically the training split).
    pub fn fit(samples: &[MultimodalSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Config("cannot fit statistics on no samples".into()))?;
        let width: usize = first.feature_widths().iter().sum();
        let mut sum = vec![0.0; width];
        let mut count = vec![0usize; width];
        for s in samples {
            let x = s.observed_concat();
            let r = s.mask_concat();
            if x.cols() != width {
                return Err(Error::shape("normalize", format!("sample {} has {} features", s.id, x.cols())));
            }
            for (row, mrow) in x.data().chunks(width).zip(r.data().chunks(width)) {
                for j in 0..width {
                    if mrow[j] != 0.0 {
                        sum[j] += row[j];
                        count[j] += 1;
                    }
                }
            }
        }
        let mean: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        let mut sq = vec![0.0; width];
        for s in samples {
            let x = s.observed_concat();
            let r = s.mask_concat();
            for (row, mrow) in x.data().chunks(width).zip(r.data().chunks(width)) {
                for j in 0..width {
                    if mrow[j] != 0.0 {
                        sq[j] += (row[j] - mean[j]).powi(2);
                    }
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(q, &c)| if c > 0 { (q / c as f64).sqrt() } else { 0.0 })
            .collect();
        Ok(FeatureStats { mean, std })
    }

    /// Standardize observed cells (and retained ground truth). Missing cells
    /// stay at zero. Features with `std <= 1e-8` map to zero.
    pub fn apply(&self, samples: &mut [MultimodalSample]) {
        let z = |v: f64, j: usize| {
            if self.std[j] <= SIGMA_FLOOR {
                0.0
            } else {
                (v - self.mean[j]) / self.std[j]
            }
        };
        for s in samples {
            let widths = s.feature_widths();
            let r = s.mask_concat();
            let mut x = concat_features(&s.modalities);
            let w = x.cols();
            for (i, v) in x.data_mut().iter_mut().enumerate() {
                *v = if r.data()[i] != 0.0 { z(*v, i % w) } else { 0.0 };
            }
            s.modalities = split_features(&x, &widths);
            if let Some(gt) = &s.ground_truth {
                let mut g = concat_features(gt);
                for (i, v) in g.data_mut().iter_mut().enumerate() {
                    *v = z(*v, i % w);
                }
                s.ground_truth = Some(split_features(&g, &widths));
            }
        }
    }
}
