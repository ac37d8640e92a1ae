use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DomainDataset;
use crate::error::{Error, Result};

/// Draws `n` distinct labeled samples: a seeded Fisher–Yates shuffle of the
/// labeled samples (in dataset order), truncated to its first `n` entries.
pub fn sample_labeled_subset(ds: &DomainDataset, n: usize, seed: u64) -> Result<DomainDataset> {
    let mut labeled = ds.labeled_ids();
    if n > labeled.len() {
        return Err(Error::Capacity {
            requested: n,
            available: labeled.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..labeled.len()).rev() {
        let j = rng.random_range(0..=i);
        labeled.swap(i, j);
    }
    labeled.truncate(n);
    ds.select(&labeled)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::data::{DomainTag, ImageSample, Mask, RgbImage, Split};

    fn dataset(labeled: usize, unlabeled: usize) -> DomainDataset {
        let samples = (0..labeled + unlabeled)
            .map(|i| {
                ImageSample::new(
                    format!("s{i:03}"),
                    RgbImage::filled(8, 8, 0.0),
                    (i < labeled).then(|| Mask::filled(8, 8, 0)),
                    DomainTag::Target,
                )
                .unwrap()
            })
            .collect();
        DomainDataset::new(samples, 2, Split::Train).unwrap()
    }

    fn id_set(ds: &DomainDataset) -> HashSet<String> {
        ds.ids().into_iter().map(String::from).collect()
    }

    /// Reference shuffle: draws a uniform index from the unshuffled prefix
    /// and moves it to the end of that prefix.
    fn oracle(ids: &[&str], n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pool: Vec<String> = ids.iter().map(|s| s.to_string()).collect();
        let mut end = pool.len();
        while end > 1 {
            let pick = rng.random_range(0..end);
            pool.swap(end - 1, pick);
            end -= 1;
        }
        pool.truncate(n);
        pool
    }

    #[test]
    fn full_request_returns_whole_labeled_set() {
        let ds = dataset(10, 5);
        let expected: HashSet<String> = ds.labeled_ids().into_iter().map(String::from).collect();
        for seed in [0, 1, 99] {
            assert_eq!(id_set(&sample_labeled_subset(&ds, 10, seed).unwrap()), expected);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = dataset(40, 0);
        let a = sample_labeled_subset(&ds, 20, 7).unwrap();
        let b = sample_labeled_subset(&ds, 20, 7).unwrap();
        assert_eq!(a.ids(), b.ids());
        let c = sample_labeled_subset(&ds, 20, 8).unwrap();
        assert_ne!(a.ids(), c.ids());
    }

    #[test]
    fn matches_reference_shuffle() {
        let ds = dataset(100, 0);
        let subset = sample_labeled_subset(&ds, 50, 1234).unwrap();
        assert_eq!(id_set(&subset).len(), 50);
        let expected = oracle(&ds.labeled_ids(), 50, 1234);
        assert_eq!(subset.ids(), expected.iter().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn over_request_is_a_capacity_error() {
        let ds = dataset(3, 4);
        assert!(matches!(
            sample_labeled_subset(&ds, 4, 0),
            Err(Error::Capacity {
                requested: 4,
                available: 3
            })
        ));
    }
}
