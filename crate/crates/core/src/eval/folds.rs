use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const FOLDS: usize = 5;
/// Share of each training portion held out for model selection.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Five-fold split of task indices with a validation subset carved from
/// each fold's training portion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub seed: u64,
    pub folds: Vec<Vec<usize>>,
    pub validation: Vec<Vec<usize>>,
}

impl FoldSplit {
    pub fn test(&self, k: usize) -> &[usize] {
        &self.folds[k]
    }

    pub fn validation(&self, k: usize) -> &[usize] {
        &self.validation[k]
    }

    /// Training tasks of fold `k`, validation excluded.
    pub fn train(&self, k: usize) -> Vec<usize> {
        self.training_portion(k).into_iter().filter(|t| !self.validation[k].contains(t)).collect()
    }

    /// Every task outside the test fold, validation included.
    pub fn training_portion(&self, k: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.folds.len()).filter(|&j| j != k).flat_map(|j| self.folds[j].iter().copied()).collect();
        v.sort_unstable();
        v
    }
}

pub fn make_folds(ds: &Dataset, seed: u64) -> Result<FoldSplit> {
    make_folds_n(ds.tasks().len(), seed)
}

pub fn make_folds_n(n: usize, seed: u64) -> Result<FoldSplit> {
    if n < FOLDS {
        return Err(Error::TooFewTasks { needed: FOLDS, found: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let folds: Vec<Vec<usize>> = (0..FOLDS)
        .map(|k| {
            let mut f = order[k * n / FOLDS..(k + 1) * n / FOLDS].to_vec();
            f.sort_unstable();
            f
        })
        .collect();
    let mut split = FoldSplit {
        seed,
        folds,
        validation: Vec::new(),
    };
    for k in 0..FOLDS {
        let mut pool = split.training_portion(k);
        pool.shuffle(&mut rng);
        let take = ((pool.len() as f64 * VALIDATION_FRACTION).round() as usize).max(1).min(pool.len() - 1);
        let mut v = pool[..take].to_vec();
        v.sort_unstable();
        split.validation.push(v);
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ten_tasks_give_folds_of_two() {
        let s = make_folds_n(10, 3).unwrap();
        assert!(s.folds.iter().all(|f| f.len() == 2));
        assert_eq!(s, make_folds_n(10, 3).unwrap());
        assert!(matches!(make_folds_n(4, 0), Err(Error::TooFewTasks { needed: 5, found: 4 })));
    }

    proptest! {
        #[test]
        fn folds_partition_tasks(n in 5usize..300, seed in any::<u64>()) {
            let s = make_folds_n(n, seed).unwrap();
            let mut all: Vec<usize> = s.folds.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for k in 0..FOLDS {
                let portion = s.training_portion(k);
                prop_assert!(s.validation(k).iter().all(|t| portion.contains(t)));
                prop_assert!(s.test(k).iter().all(|t| !portion.contains(t)));
                prop_assert!(!s.train(k).is_empty());
                prop_assert_eq!(s.train(k).len() + s.validation(k).len(), portion.len());
            }
        }
    }
}
