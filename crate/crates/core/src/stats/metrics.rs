use serde::{Deserialize, Serialize};

use super::StatsError;
use crate::relaxometry::phantom::NUCLEUS_VOLUME_PERCENT;
use crate::volume::{SparseLabelVolume, NUM_NUCLEI, UNLABELED};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassTpr {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `None` when the class has no labeled voxel; distinct from a TPR of 0.
    pub tpr: Option<f64>,
}

impl ClassTpr {
    pub fn labeled(&self) -> usize {
        self.tp + self.fn_
    }
}

/// Per-label recall over labeled voxels, indexed by label value (0 is background).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TprResult {
    pub classes: Vec<ClassTpr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VwaWeights {
    /// Each subject's own labeled voxel count per nucleus.
    #[default]
    LabeledCounts,
    /// Fixed atlas volume fractions of the nuclei.
    AtlasFractions,
}

impl TprResult {
    /// TPRs of the nuclei (labels 1..=13).
    pub fn nuclei(&self) -> Vec<Option<f64>> {
        (1..=NUM_NUCLEI)
            .map(|c| self.classes.get(c).and_then(|t| t.tpr))
            .collect()
    }

    /// Volume-weighted average over the nuclei.
    pub fn vwa(&self, weights: VwaWeights) -> Result<f64, StatsError> {
        let w: Vec<f64> = match weights {
            VwaWeights::LabeledCounts => (1..=NUM_NUCLEI)
                .map(|c| self.classes.get(c).map_or(0.0, |t| t.labeled() as f64))
                .collect(),
            VwaWeights::AtlasFractions => NUCLEUS_VOLUME_PERCENT.to_vec(),
        };
        volume_weighted_average(&self.nuclei(), &w)
    }
}

/// Counts only voxels whose ground truth is labeled; the prediction is taken
/// as dense.
pub fn tpr_per_class(pred: &SparseLabelVolume, gt: &SparseLabelVolume) -> Result<TprResult, StatsError> {
    if pred.dims() != gt.dims() {
        return Err(StatsError::DimMismatch {
            pred: pred.dims(),
            gt: gt.dims(),
        });
    }
    let mut tp = [0usize; NUM_NUCLEI + 1];
    let mut total = [0usize; NUM_NUCLEI + 1];
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if g == UNLABELED {
            continue;
        }
        total[g as usize] += 1;
        if p == g {
            tp[g as usize] += 1;
        }
    }
    let classes = (0..=NUM_NUCLEI)
        .map(|c| ClassTpr {
            tp: tp[c],
            fn_: total[c] - tp[c],
            tpr: (total[c] > 0).then(|| tp[c] as f64 / total[c] as f64),
        })
        .collect();
    Ok(TprResult { classes })
}

/// `sum w_c tpr_c / sum w_c` over the defined entries; undefined entries drop
/// out together with their weight.
pub fn volume_weighted_average(tprs: &[Option<f64>], weights: &[f64]) -> Result<f64, StatsError> {
    if tprs.len() != weights.len() {
        return Err(StatsError::Invalid(format!(
            "{} values but {} weights",
            tprs.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(StatsError::Invalid(format!("weight {w}")));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (t, &w) in tprs.iter().zip(weights) {
        if let Some(t) = t {
            num += w * t;
            den += w;
        }
    }
    if den == 0.0 {
        return Err(StatsError::ZeroWeights);
    }
    Ok(num / den)
}
