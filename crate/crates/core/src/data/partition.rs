use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::sample::MultimodalSample;
use crate::error::{Error, Result};
use crate::rng;

const MAX_REDRAWS: usize = 100;

/// Sample ids held by each client. Ids may appear on more than one client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FederatedPartition {
    pub assignments: Vec<Vec<u64>>,
}

impl FederatedPartition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn n_k(&self, k: usize) -> usize {
        self.assignments[k].len()
    }

    pub fn total_assignments(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub clients: usize,
    pub dirichlet_alpha: f64,
    pub overlap_ratio: f64,
    pub seed: u64,
}

/// Split `dataset` across clients with Dirichlet label skew, then give an
/// `overlap_ratio` fraction of samples a second, different client.
pub fn partition(dataset: &[MultimodalSample], cfg: &PartitionConfig) -> Result<FederatedPartition> {
    let k = cfg.clients;
    if k == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(cfg.dirichlet_alpha > 0.0 && cfg.dirichlet_alpha.is_finite()) {
        return Err(Error::Config("dirichlet_alpha must be > 0".into()));
    }
    if !(0.0..=1.0).contains(&cfg.overlap_ratio) {
        return Err(Error::Config("overlap_ratio must lie in [0, 1]".into()));
    }
    if dataset.len() < k {
        return Err(Error::Config(format!(
            "{} samples cannot fill {k} clients",
            dataset.len()
        )));
    }
    let classes = dataset.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut by_class: Vec<Vec<u64>> = vec![Vec::new(); classes];
    for s in dataset {
        by_class[s.label].push(s.id);
    }

    let mut rng = rng::seeded(cfg.seed);
    let gamma = Gamma::new(cfg.dirichlet_alpha, 1.0).expect("alpha checked");
    for _ in 0..MAX_REDRAWS {
        let mut assignments: Vec<Vec<u64>> = vec![Vec::new(); k];
        for ids in &by_class {
            let mut ids = ids.clone();
            ids.shuffle(&mut rng);
            let props = dirichlet(&gamma, k, &mut rng);
            let mut cum = 0.0;
            let mut start = 0;
            for (client, p) in props.iter().enumerate() {
                cum += p;
                let end = if client + 1 == k {
                    ids.len()
                } else {
                    ((cum * ids.len() as f64).round() as usize).min(ids.len())
                };
                assignments[client].extend_from_slice(&ids[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if assignments.iter().any(Vec::is_empty) {
            continue;
        }
        if k > 1 && cfg.overlap_ratio > 0.0 {
            let owner: std::collections::HashMap<u64, usize> = assignments
                .iter()
                .enumerate()
                .flat_map(|(c, ids)| ids.iter().map(move |&id| (id, c)))
                .collect();
            let n_extra = (cfg.overlap_ratio * dataset.len() as f64).round() as usize;
            let mut picked = index::sample(&mut rng, dataset.len(), n_extra).into_vec();
            picked.sort_unstable();
            for i in picked {
                let id = dataset[i].id;
                let first = owner[&id];
                let mut second = rng.random_range(0..k - 1);
                if second >= first {
                    second += 1;
                }
                assignments[second].push(id);
            }
        }
        for a in &mut assignments {
            a.sort_unstable();
        }
        return Ok(FederatedPartition { assignments });
    }
    Err(Error::Unsatisfiable(format!(
        "could not give all {k} clients a sample in {MAX_REDRAWS} draws"
    )))
}

fn dirichlet(gamma: &Gamma<f64>, k: usize, rng: &mut rng::Rng) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn dataset(n: usize, classes: usize) -> Vec<MultimodalSample> {
        (0..n)
            .map(|i| {
                MultimodalSample::fully_observed(i as u64, vec![Tensor::zeros(&[2, 1]); 2], i % classes)
            })
            .collect()
    }

    fn cfg(clients: usize, alpha: f64, overlap: f64) -> PartitionConfig {
        PartitionConfig {
            clients,
            dirichlet_alpha: alpha,
            overlap_ratio: overlap,
            seed: 3,
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let d = dataset(37, 3);
        let p = partition(&d, &cfg(1, 0.5, 0.3)).unwrap();
        assert_eq!(p.n_k(0), 37);
    }

    #[test]
    fn no_overlap_is_a_true_partition() {
        let d = dataset(120, 4);
        let p = partition(&d, &cfg(6, 0.5, 0.0)).unwrap();
        assert_eq!(p.total_assignments(), 120);
        let mut all: Vec<u64> = p.assignments.concat();
        all.sort_unstable();
        assert_eq!(all, (0..120).collect::<Vec<_>>());
    }

    #[test]
    fn overlap_adds_second_copies() {
        let d = dataset(100, 2);
        let p = partition(&d, &cfg(4, 1.0, 0.2)).unwrap();
        assert_eq!(p.total_assignments(), 120);
        for ids in &p.assignments {
            let mut v = ids.clone();
            v.dedup();
            assert_eq!(v.len(), ids.len(), "a client holds a sample twice");
        }
    }

    fn max_skew(d: &[MultimodalSample], p: &FederatedPartition, classes: usize) -> f64 {
        let global = 1.0 / classes as f64;
        let mut worst: f64 = 0.0;
        for ids in &p.assignments {
            for c in 0..classes {
                let frac = ids.iter().filter(|&&id| d[id as usize].label == c).count() as f64
                    / ids.len() as f64;
                worst = worst.max((frac - global).abs());
            }
        }
        worst
    }

    #[test]
    fn smaller_alpha_means_more_skew() {
        let d = dataset(600, 4);
        let skewed = partition(&d, &cfg(6, 0.1, 0.0)).unwrap();
        let flat = partition(&d, &cfg(6, 100.0, 0.0)).unwrap();
        assert!(max_skew(&d, &skewed, 4) > max_skew(&d, &flat, 4));
    }

    #[test]
    fn too_few_samples_is_rejected() {
        let d = dataset(3, 2);
        assert!(partition(&d, &cfg(5, 0.5, 0.0)).is_err());
    }
}
