//! Two-level batch sampling: pick a dataset uniformly, then a batch from it.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// A batch drawn from one dataset of a registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledBatch {
    pub dataset: usize,
    pub indices: Vec<usize>,
}

/// `sizes[i]` is the number of items in dataset `i`. Datasets smaller than
/// `batch_size` are drawn with replacement so the batch size is exact.
pub fn hierarchical_sample<R: Rng + ?Sized>(
    sizes: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<SampledBatch> {
    if sizes.is_empty() {
        return Err(Error::EmptyDataset("no datasets registered".into()));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let dataset = rng.random_range(0..sizes.len());
    let n = sizes[dataset];
    if n == 0 {
        return Err(Error::EmptyDataset(format!("dataset {dataset} is empty")));
    }
    let indices = if n >= batch_size {
        sample(rng, n, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.random_range(0..n)).collect()
    };
    Ok(SampledBatch { dataset, indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_over_datasets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            let b = hierarchical_sample(&[10, 500, 64], 8, &mut rng).unwrap();
            counts[b.dataset] += 1;
        }
        for c in counts {
            assert!((835..=1165).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn small_dataset_uses_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = hierarchical_sample(&[3], 10, &mut rng).unwrap();
        assert_eq!(b.indices.len(), 10);
        assert!(b.indices.iter().all(|&i| i < 3));
    }

    #[test]
    fn large_dataset_has_distinct_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = hierarchical_sample(&[100], 20, &mut rng).unwrap();
        let mut v = b.indices.clone();
        v.sort_unstable();
        v.dedup();
        assert_eq!(v.len(), 20);
    }

    #[test]
    fn empty_registry_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(hierarchical_sample(&[], 4, &mut rng).is_err());
    }
}
