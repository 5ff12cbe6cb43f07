use serde::{Deserialize, Serialize};

use super::SegError;
use crate::rng::{purpose, Stream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Index of the fold whose test set holds `id`.
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.test.iter().any(|t| t == id))
    }
}

/// Shuffles subjects with `seed`, cuts them into `k` equal test groups and
/// rotates: fold `i` tests group `i`, validates on the first
/// `max(1, g - 1)` members of group `i + 1` (mod `k`), trains on the rest.
/// With 24 subjects and 8 folds this yields 19 / 2 / 3.
pub fn make_folds(subject_ids: &[String], k: usize, seed: u64) -> Result<FoldPlan, SegError> {
    let n = subject_ids.len();
    if k < 2 {
        return Err(SegError::Folds(format!("need at least 2 folds, got {k}")));
    }
    if !n.is_multiple_of(k) {
        return Err(SegError::Folds(format!(
            "{n} subjects do not split into {k} equal test groups"
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(dup) = subject_ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(SegError::Folds(format!("duplicate subject id {dup:?}")));
    }
    let g = n / k;
    let mut ids = subject_ids.to_vec();
    Stream::new(seed, purpose::FOLDS, 0).shuffle(&mut ids);
    let groups: Vec<&[String]> = ids.chunks(g).collect();
    let n_val = g.saturating_sub(1).max(1);
    let folds = (0..k)
        .map(|i| {
            let test = groups[i].to_vec();
            let val = groups[(i + 1) % k][..n_val].to_vec();
            let train = ids
                .iter()
                .filter(|id| !test.contains(id) && !val.contains(id))
                .cloned()
                .collect();
            Fold { train, val, test }
        })
        .collect();
    Ok(FoldPlan { seed, folds })
}
