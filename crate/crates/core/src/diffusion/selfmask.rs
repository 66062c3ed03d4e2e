//! Self-supervised target masks over observed cells.

use rand::seq::index;
use rand::Rng as _;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Split of the observed cells into pseudo-imputation targets and the
/// remaining conditioning cells.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfMaskPlan {
    pub target_mask: Tensor,
    pub conditioning_mask: Tensor,
}

impl SelfMaskPlan {
    pub fn target_count(&self) -> usize {
        self.target_mask.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// Pick `round(u · n_obs)` observed cells as targets with
/// `u ~ Uniform(ratio_range)`, keeping at least one cell on each side.
pub fn make_self_mask(observed: &Tensor, ratio_range: (f64, f64), seed: u64) -> Result<SelfMaskPlan> {
    let (lo, hi) = ratio_range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::Config(format!("mask ratio range [{lo}, {hi}] is not inside [0, 1]")));
    }
    let cells: Vec<usize> = observed
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect();
    let n_obs = cells.len();
    if n_obs < 2 {
        return Err(Error::Unsatisfiable(format!(
            "self-masking needs at least 2 observed cells, found {n_obs}"
        )));
    }
    let mut r = rng::seeded(seed);
    let u = if lo == hi { lo } else { r.random_range(lo..hi) };
    let count = ((u * n_obs as f64).round() as usize).clamp(1, n_obs - 1);

    let mut target = Tensor::zeros(observed.shape());
    for i in index::sample(&mut r, n_obs, count) {
        target.data_mut()[cells[i]] = 1.0;
    }
    let conditioning = observed.zip_map(&target, |o, t| if o != 0.0 && t == 0.0 { 1.0 } else { 0.0 })?;
    Ok(SelfMaskPlan {
        target_mask: target,
        conditioning_mask: conditioning,
    })
}
