use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// How timepoints are partitioned into cross-validation folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldScheme {
    /// Random splits; breaks temporal contiguity and leaks through
    /// autocorrelation.
    Shuffled,
    /// Non-overlapping time blocks.
    Contiguous,
    /// Time blocks with training samples near each test block removed.
    ContiguousTrimmed,
}

impl FoldScheme {
    pub const ALL: [FoldScheme; 3] = [
        FoldScheme::Shuffled,
        FoldScheme::Contiguous,
        FoldScheme::ContiguousTrimmed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FoldScheme::Shuffled => "shuffled",
            FoldScheme::Contiguous => "contiguous",
            FoldScheme::ContiguousTrimmed => "contiguous_trimmed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub scheme: FoldScheme,
    pub n: usize,
    pub k_folds: usize,
    pub trim_trs: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Sizes of `k` consecutive blocks over `n` items, earlier blocks larger.
fn block_sizes(n: usize, k: usize) -> impl Iterator<Item = usize> {
    let (base, rem) = (n / k, n % k);
    (0..k).map(move |i| base + usize::from(i < rem))
}

/// Builds a fold plan over indices `0..n`.
///
/// Test sets always partition `0..n`. For `ContiguousTrimmed`, every training
/// index within `trim_trs` of its fold's test block is dropped, so training
/// samples sit strictly more than `trim_trs` steps from any test sample.
pub fn make_folds(
    n: usize,
    scheme: FoldScheme,
    k_folds: usize,
    trim_trs: usize,
    seed: u64,
) -> Result<FoldPlan> {
    ensure!(
        k_folds >= 2,
        Validation,
        "k_folds must be >= 2, got {k_folds}"
    );
    ensure!(
        k_folds <= n,
        Validation,
        "k_folds ({k_folds}) exceeds number of samples ({n})"
    );
    let order: Vec<usize> = match scheme {
        FoldScheme::Shuffled => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            perm
        }
        _ => (0..n).collect(),
    };
    let mut folds = Vec::with_capacity(k_folds);
    let mut start = 0;
    for size in block_sizes(n, k_folds) {
        let mut test = order[start..start + size].to_vec();
        test.sort_unstable();
        let train = match scheme {
            FoldScheme::ContiguousTrimmed => {
                // test is the block [start, start + size)
                let lo = start.saturating_sub(trim_trs);
                let hi = start + size + trim_trs;
                (0..n).filter(|&i| i < lo || i >= hi).collect()
            }
            _ => {
                let held: BTreeSet<usize> = test.iter().copied().collect();
                (0..n).filter(|i| !held.contains(i)).collect()
            }
        };
        folds.push(Fold { train, test });
        start += size;
    }
    Ok(FoldPlan {
        scheme,
        n,
        k_folds,
        trim_trs,
        seed,
        folds,
    })
}

impl FoldPlan {
    /// Removes `indices` from every training set (test sets are untouched).
    pub fn without_train_indices(mut self, indices: &BTreeSet<usize>) -> Self {
        for f in &mut self.folds {
            f.train.retain(|i| !indices.contains(i));
        }
        self
    }
}
