//! Deterministic dataset splits: seeded shuffle, then contiguous partition.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_dataset(count: usize, sizes: (usize, usize, usize), seed: u64) -> Result<Split> {
    let (tr, va, te) = sizes;
    if tr + va + te > count {
        return Err(Error::Config(format!(
            "split sizes {tr}+{va}+{te} exceed dataset size {count}"
        )));
    }
    let mut indices: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let val_end = tr + va;
    Ok(Split {
        train: indices[..tr].to_vec(),
        val: indices[tr..val_end].to_vec(),
        test: indices[val_end..val_end + te].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn deterministic_given_seed() {
        let a = split_dataset(10, (6, 2, 2), 7).unwrap();
        let b = split_dataset(10, (6, 2, 2), 7).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(10, (6, 2, 2), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn disjoint_and_covering() {
        let s = split_dataset(10, (6, 2, 2), 7).unwrap();
        let all: BTreeSet<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        assert_eq!(all.len(), 10);
        assert_eq!(s.train.len(), 6);
        assert_eq!(s.val.len(), 2);
        assert_eq!(s.test.len(), 2);
    }

    #[test]
    fn oversubscribed_sizes_error() {
        assert!(split_dataset(10, (9, 2, 2), 7).is_err());
    }
}
