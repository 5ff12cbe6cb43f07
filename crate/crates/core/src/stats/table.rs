//! Per-configuration result tables: mean ± SD per nucleus plus VWA, and
//! significance marks against a reference configuration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::hypothesis::{holm_bonferroni, wilcoxon_signed_rank};
use super::metrics::{TprResult, VwaWeights};
use super::StatsError;
use crate::volume::NUCLEUS_NAMES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScores {
    pub subject: String,
    pub tpr: TprResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigResults {
    pub name: String,
    pub subjects: Vec<SubjectScores>,
}

pub fn columns() -> Vec<String> {
    NUCLEUS_NAMES
        .iter()
        .map(|s| s.to_string())
        .chain(["VWA".to_string()])
        .collect()
}

/// One value per column (13 nuclei then VWA) for each subject, keyed by id.
fn subject_values(cfg: &ConfigResults, weights: VwaWeights) -> Result<BTreeMap<&str, Vec<Option<f64>>>, StatsError> {
    let mut out = BTreeMap::new();
    for s in &cfg.subjects {
        let mut v = s.tpr.nuclei();
        v.push(match s.tpr.vwa(weights) {
            Ok(x) => Some(x),
            Err(StatsError::ZeroWeights) => None,
            Err(e) => return Err(e),
        });
        if out.insert(s.subject.as_str(), v).is_some() {
            return Err(StatsError::Invalid(format!(
                "subject {} listed twice in {}",
                s.subject, cfg.name
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    pub n: usize,
}

fn mean_sd(values: &[f64]) -> Option<MeanSd> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanSd { mean, sd, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<MeanSd>>)>,
}

impl SummaryTable {
    /// Cells are `mean ± sd` in percent; empty when no subject defines the column.
    pub fn to_csv(&self) -> String {
        let mut s = format!("config,{}\n", self.columns.join(","));
        for (name, cells) in &self.rows {
            s.push_str(name);
            for c in cells {
                s.push(',');
                if let Some(c) = c {
                    s.push_str(&format!("{:.2} ± {:.2}", 100.0 * c.mean, 100.0 * c.sd));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Mean ± SD across subjects; undefined TPRs are left out of their column.
pub fn summary_table(configs: &[ConfigResults], weights: VwaWeights) -> Result<SummaryTable, StatsError> {
    let cols = columns();
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let vals = subject_values(cfg, weights)?;
        let cells = (0..cols.len())
            .map(|k| mean_sd(&vals.values().filter_map(|v| v[k]).collect::<Vec<_>>()))
            .collect();
        rows.push((cfg.name.clone(), cells));
    }
    Ok(SummaryTable { columns: cols, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mark {
    Up,
    Down,
    None,
    Reference,
}

impl Mark {
    pub fn tag(self) -> &'static str {
        match self {
            Mark::Up => "up",
            Mark::Down => "down",
            Mark::None => "none",
            Mark::Reference => "ref",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigCell {
    pub mark: Mark,
    pub p_value: Option<f64>,
    pub adjusted: Option<f64>,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceTable {
    pub reference: String,
    pub alpha: f64,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<SigCell>)>,
}

impl SignificanceTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("config,{}\n", self.columns.join(","));
        for (name, cells) in &self.rows {
            s.push_str(name);
            for c in cells {
                s.push(',');
                s.push_str(c.mark.tag());
            }
            s.push('\n');
        }
        s
    }

    /// Holm-adjusted p-values in the same layout; empty where no test ran.
    pub fn to_pvalue_csv(&self) -> String {
        let mut s = format!("config,{}\n", self.columns.join(","));
        for (name, cells) in &self.rows {
            s.push_str(name);
            for c in cells {
                s.push(',');
                if let Some(p) = c.adjusted {
                    s.push_str(&format!("{p:.6e}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Wilcoxon signed-rank of every configuration against `reference`, paired
/// by subject id over subjects where both define the column. Holm correction
/// runs per column across the compared configurations. A rejected test is
/// `Up` when the positive-difference rank sum exceeds its null mean.
pub fn significance_table(
    configs: &[ConfigResults],
    reference: &str,
    alpha: f64,
    weights: VwaWeights,
) -> Result<SignificanceTable, StatsError> {
    let ref_idx = configs
        .iter()
        .position(|c| c.name == reference)
        .ok_or_else(|| StatsError::Invalid(format!("reference configuration {reference} not found")))?;
    let cols = columns();
    let values: Vec<_> = configs
        .iter()
        .map(|c| subject_values(c, weights))
        .collect::<Result<_, _>>()?;
    let blank = SigCell {
        mark: Mark::None,
        p_value: None,
        adjusted: None,
        n_pairs: 0,
    };
    let mut rows: Vec<(String, Vec<SigCell>)> = configs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cell = if i == ref_idx {
                SigCell {
                    mark: Mark::Reference,
                    ..blank.clone()
                }
            } else {
                blank.clone()
            };
            (c.name.clone(), vec![cell; cols.len()])
        })
        .collect();

    for k in 0..cols.len() {
        let mut tested = Vec::new();
        for (i, vals) in values.iter().enumerate() {
            if i == ref_idx {
                continue;
            }
            let (mut x, mut y) = (Vec::new(), Vec::new());
            for (id, v) in vals {
                if let (Some(a), Some(b)) = (v[k], values[ref_idx].get(id).and_then(|r| r[k])) {
                    x.push(a);
                    y.push(b);
                }
            }
            rows[i].1[k].n_pairs = x.len();
            if x.is_empty() {
                continue;
            }
            match wilcoxon_signed_rank(&x, &y) {
                Ok(t) => {
                    let n = t.n_effective as f64;
                    tested.push((i, t.p_value, t.statistic > n * (n + 1.0) / 4.0));
                }
                Err(StatsError::NoNonzeroPairs) => {}
                Err(e) => return Err(e),
            }
        }
        if tested.is_empty() {
            continue;
        }
        let p: Vec<f64> = tested.iter().map(|t| t.1).collect();
        let holm = holm_bonferroni(&p, alpha)?;
        for (j, &(i, pv, up)) in tested.iter().enumerate() {
            let cell = &mut rows[i].1[k];
            cell.p_value = Some(pv);
            cell.adjusted = Some(holm.adjusted[j]);
            if holm.reject[j] {
                cell.mark = if up { Mark::Up } else { Mark::Down };
            }
        }
    }
    Ok(SignificanceTable {
        reference: reference.to_string(),
        alpha,
        columns: cols,
        rows,
    })
}
