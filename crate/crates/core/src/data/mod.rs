//! Multimodal samples, missingness simulation, synthetic data, CSV I/O and
//! client partitioning.

mod csv_io;
mod missingness;
mod normalize;
mod partition;
mod resample;
mod sample;
mod synthetic;

pub use csv_io::{load_csv, read_csv, write_csv, CsvSchema};
pub use missingness::{apply_missingness, AffectedModality, MaskMode, MissingnessConfig};
pub use normalize::FeatureStats;
pub use partition::{partition, FederatedPartition, PartitionConfig};
pub use resample::resample_to_length;
pub use sample::{concat_features, split_features, MultimodalSample};
pub use synthetic::{generate_synthetic, CouplingTransform, Nonlinearity, SyntheticConfig};

use rand::seq::SliceRandom;

use crate::rng;

/// Stratified split into `(train, test)` with `round(test_fraction · n_c)`
/// test samples per class.
pub fn stratified_split(
    dataset: Vec<MultimodalSample>,
    test_fraction: f64,
    seed: u64,
) -> (Vec<MultimodalSample>, Vec<MultimodalSample>) {
    let classes = dataset.iter().map(|s| s.label).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<MultimodalSample>> = vec![Vec::new(); classes];
    for s in dataset {
        by_class[s.label].push(s);
    }
    let mut rng = rng::seeded(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut group in by_class {
        group.shuffle(&mut rng);
        let n_test = (test_fraction * group.len() as f64).round() as usize;
        let rest = group.split_off(n_test.min(group.len()));
        test.extend(group);
        train.extend(rest);
    }
    train.sort_by_key(|s| s.id);
    test.sort_by_key(|s| s.id);
    (train, test)
}
