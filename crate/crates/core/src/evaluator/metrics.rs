use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 5] = [1, 3, 5, 10, 20];

/// Ranking quality over a set of mentions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    /// k → fraction of mentions whose ground truth ranks within the top k.
    pub hits: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub mr: f64,
    #[serde(default)]
    pub checkpoint: String,
    /// The 1-based ranks the report was computed from.
    #[serde(skip)]
    pub ranks: Vec<usize>,
}

impl MetricsReport {
    pub fn hit(&self, k: usize) -> Option<f64> {
        self.hits.get(&k).copied()
    }
}

/// H@k counts `rank ≤ k`; MRR and MR average `1/rank` and `rank`.
pub fn compute_metrics(ranks: &[usize], ks: &[usize]) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no ranks to evaluate".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidArgument("ranks are 1-based; found 0".into()));
    }
    let n = ranks.len() as f64;
    let hits = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    Ok(MetricsReport {
        n: ranks.len(),
        hits,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        mr: ranks.iter().map(|&r| r as f64).sum::<f64>() / n,
        checkpoint: String::new(),
        ranks: ranks.to_vec(),
    })
}
