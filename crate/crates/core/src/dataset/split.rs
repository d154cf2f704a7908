use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shuffles a copy of `items` with a seeded ChaCha8 Fisher-Yates pass and
/// cuts it into `round(n * train_fraction)` training items and the rest.
pub fn split_dataset<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Validation("cannot split an empty item list".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Validation(format!("train fraction {train_fraction} must lie strictly between 0 and 1")));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (items.len() as f64 * train_fraction).round() as usize;
    let (train, test) = order.split_at(n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect();
    Ok((pick(train), pick(test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn drone_dataset_sizes() {
        let items: Vec<usize> = (0..2664).collect();
        let (train, test) = split_dataset(&items, 0.9, 1).unwrap();
        assert_eq!((train.len(), test.len()), (2398, 266));
    }

    #[test]
    fn deterministic_and_half() {
        let items: Vec<usize> = (0..10).collect();
        assert_eq!(split_dataset(&items, 0.5, 3).unwrap(), split_dataset(&items, 0.5, 3).unwrap());
        let (a, b) = split_dataset(&items, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        assert!(a.iter().all(|x| !b.contains(x)));
    }

    #[test]
    fn bad_inputs() {
        assert!(matches!(split_dataset::<u8>(&[], 0.5, 0), Err(Error::Validation(_))));
        assert!(split_dataset(&[1, 2], 1.0, 0).is_err());
        assert!(split_dataset(&[1, 2], 0.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn exhaustive_disjoint_partition(n in 1usize..200, frac in 0.01..0.99f64, seed in any::<u64>()) {
            let items: Vec<usize> = (0..n).collect();
            let (train, test) = split_dataset(&items, frac, seed).unwrap();
            prop_assert_eq!(train.len(), (n as f64 * frac).round() as usize);
            let a: HashSet<_> = train.iter().copied().collect();
            let b: HashSet<_> = test.iter().copied().collect();
            prop_assert!(a.is_disjoint(&b));
            prop_assert_eq!(a.len() + b.len(), n);
        }
    }
}
