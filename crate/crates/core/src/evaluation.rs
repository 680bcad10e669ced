//! Blended-target metrics: weighted accuracy over hidden sub-targets, the
//! signed transfer gain against a source-only model (negative transfer when
//! below zero), the drop relative to per-sub-target adaptation, their
//! equal-weight versions, and a partition-quality diagnostic.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BlendedDataset, Split};
use crate::error::{Error, Result};
use crate::meta::split_targets;
use crate::networks::ModelBundle;

/// Sub-target proportions of the benchmark test sets.
pub const DIGIT_FIVE_WEIGHTS: [f64; 5] = [0.236, 0.236, 0.236, 0.236, 0.056];
pub const OFFICE31_WEIGHTS: [f64; 3] = [0.686, 0.121, 0.193];
pub const OFFICE_HOME_WEIGHTS: [f64; 4] = [0.155, 0.280, 0.285, 0.280];

pub const SIMPLEX_TOL: f64 = 1e-9;

pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() || weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::contract(format!("weights {weights:?} must lie in [0, 1]")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::contract(format!("weights sum to {total}, not 1")));
    }
    Ok(())
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

/// `sum_j w_j acc_j`.
pub fn acc_btda(per_subtarget: &[f64], weights: &[f64]) -> Result<f64> {
    same_len(per_subtarget, weights)?;
    validate_weights(weights)?;
    Ok(dot(per_subtarget, weights))
}

/// Signed difference to the source-only accuracy; negative transfer when
/// below zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gain {
    pub gain: f64,
    pub negative: bool,
}

pub fn ant(acc_btda: f64, acc_source_only: f64) -> Gain {
    let gain = acc_btda - acc_source_only;
    Gain { gain, negative: gain < 0.0 }
}

/// `acc_btda - sum_j w_j acc_mtda_j`.
pub fn rnt(acc_btda: f64, mtda_accs: &[f64], weights: &[f64]) -> Result<f64> {
    same_len(mtda_accs, weights)?;
    validate_weights(weights)?;
    Ok(acc_btda - dot(mtda_accs, weights))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualWeight {
    pub acc: f64,
    pub gain: Gain,
    pub rnt: f64,
}

pub fn equal_weight_metrics(per_subtarget: &[f64], source_only: &[f64], mtda_accs: &[f64]) -> Result<EqualWeight> {
    same_len(per_subtarget, source_only)?;
    same_len(per_subtarget, mtda_accs)?;
    if per_subtarget.is_empty() {
        return Err(Error::contract("no sub-targets"));
    }
    let acc = mean(per_subtarget);
    Ok(EqualWeight { acc, gain: ant(acc, mean(source_only)), rnt: acc - mean(mtda_accs) })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("labelings of {} and {} items", a.len(), b.len())));
    }
    let ka = a.iter().max().map_or(0, |v| v + 1);
    let kb = b.iter().max().map_or(0, |v| v + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&i, &j) in a.iter().zip(b) {
        table[i][j] += 1;
    }
    let pairs = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&n| pairs(n)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| pairs(table.iter().map(|r| r[j]).sum())).sum();
    let total = pairs(a.len() as u64);
    let expected = if total > 0.0 { rows * cols / total } else { 0.0 };
    let max = (rows + cols) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Accuracies of one bundle on one split of the target set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub per_subtarget: Vec<f64>,
    pub counts: Vec<usize>,
    /// Fraction of all correct rows in the split.
    pub pooled: f64,
}

impl SplitAccuracy {
    /// Empirical sub-target proportions of the split.
    pub fn weights(&self) -> Vec<f64> {
        let n: usize = self.counts.iter().sum();
        self.counts.iter().map(|&c| c as f64 / n as f64).collect()
    }
}

pub fn split_accuracy(bundle: &ModelBundle, ds: &BlendedDataset, split: Split) -> Result<SplitAccuracy> {
    let o = ds.oracle();
    let rows = o.rows_in(split);
    if rows.is_empty() {
        return Err(Error::config("split has no target rows"));
    }
    let pred = bundle.predict(&o.target_x().select_rows(&rows))?.argmax_rows();
    let k = ds.k();
    let (mut correct, mut counts) = (vec![0usize; k], vec![0usize; k]);
    for (p, &i) in pred.iter().zip(&rows) {
        let j = o.target_subtargets()[i];
        counts[j] += 1;
        if *p == o.target_classes()[i] {
            correct[j] += 1;
        }
    }
    let per_subtarget = correct.iter().zip(&counts).map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect();
    let pooled = correct.iter().sum::<usize>() as f64 / rows.len() as f64;
    Ok(SplitAccuracy { per_subtarget, counts, pooled })
}

/// Accuracy on the rows of sub-target `j` in `split`.
pub fn subtarget_accuracy(bundle: &ModelBundle, ds: &BlendedDataset, split: Split, j: usize) -> Result<f64> {
    let acc = split_accuracy(bundle, ds, split)?;
    acc.per_subtarget.get(j).copied().ok_or_else(|| Error::config(format!("no sub-target {j}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub variant: String,
    pub per_subtarget: Vec<f64>,
    pub weights: Vec<f64>,
    pub acc_btda: f64,
    /// Correct fraction of the pooled test set; equals `acc_btda`.
    pub acc_pooled: f64,
    pub acc_source_only: Option<f64>,
    pub source_only_per_subtarget: Option<Vec<f64>>,
    pub gain: Option<Gain>,
    /// Per-sub-target accuracies of single-target adaptation.
    pub mtda_accs: Option<Vec<f64>>,
    pub acc_mtda: Option<f64>,
    pub rnt: Option<f64>,
    pub acc_ew: f64,
    pub gain_ew: Option<Gain>,
    pub rnt_ew: Option<f64>,
    /// Agreement of the meta-learner's split of the training targets with
    /// the hidden sub-targets; diagnostic only.
    pub partition_ari: Option<f64>,
}

/// Metrics of `bundle` on `split`. The partition diagnostic re-splits the
/// training targets with the bundle's own meta-learner when it holds one.
pub fn evaluate_bundle(bundle: &ModelBundle, ds: &BlendedDataset, split: Split, dof: f64, seed: u64, variant: &str) -> Result<MetricsReport> {
    let acc = split_accuracy(bundle, ds, split)?;
    let weights = acc.weights();
    let acc_btda = acc_btda(&acc.per_subtarget, &weights)?;
    let partition_ari = if bundle.meta_fitted {
        let part = split_targets(bundle, &ds.train_view().target_x(), dof)?;
        Some(adjusted_rand_index(&part.assignment, &ds.oracle().train_subtargets())?)
    } else {
        None
    };
    Ok(MetricsReport {
        seed,
        variant: variant.to_string(),
        acc_ew: mean(&acc.per_subtarget),
        per_subtarget: acc.per_subtarget,
        weights,
        acc_btda,
        acc_pooled: acc.pooled,
        acc_source_only: None,
        source_only_per_subtarget: None,
        gain: None,
        mtda_accs: None,
        acc_mtda: None,
        rnt: None,
        gain_ew: None,
        rnt_ew: None,
        partition_ari,
    })
}

impl MetricsReport {
    /// Fills the gain fields from a source-only report on the same split.
    pub fn with_source_only(mut self, source_only: &MetricsReport) -> Result<Self> {
        same_len(&self.per_subtarget, &source_only.per_subtarget)?;
        self.acc_source_only = Some(source_only.acc_btda);
        self.source_only_per_subtarget = Some(source_only.per_subtarget.clone());
        self.gain = Some(ant(self.acc_btda, source_only.acc_btda));
        self.gain_ew = Some(ant(self.acc_ew, mean(&source_only.per_subtarget)));
        Ok(self)
    }

    /// Fills the relative-transfer fields from single-target accuracies.
    pub fn with_mtda(mut self, mtda_accs: Vec<f64>) -> Result<Self> {
        same_len(&self.per_subtarget, &mtda_accs)?;
        self.rnt = Some(rnt(self.acc_btda, &mtda_accs, &self.weights)?);
        self.acc_mtda = Some(dot(&mtda_accs, &self.weights));
        self.rnt_ew = Some(self.acc_ew - mean(&mtda_accs));
        self.mtda_accs = Some(mtda_accs);
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// CSV of `index,class,subtarget,f_1..f_h` for every target test row.
pub fn embeddings_csv(bundle: &ModelBundle, ds: &BlendedDataset) -> Result<String> {
    let o = ds.oracle();
    let rows = o.rows_in(Split::Test);
    let feats = bundle.feature_matrix(&o.target_x().select_rows(&rows))?;
    let mut out = String::from("index,class,subtarget");
    for j in 1..=feats.cols() {
        let _ = write!(out, ",f_{j}");
    }
    out.push('\n');
    for (r, &i) in rows.iter().enumerate() {
        let _ = write!(out, "{i},{},{}", o.target_classes()[i], o.target_subtargets()[i]);
        for v in feats.row(r) {
            let _ = write!(out, ",{v:.16e}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(bundle: &ModelBundle, ds: &BlendedDataset, path: &Path) -> Result<()> {
    std::fs::write(path, embeddings_csv(bundle, ds)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ari_extremes() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!(v < 0.0);
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(acc_btda(&[1.0, 1.0], &[0.5, 0.6]).is_err());
        assert!(acc_btda(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn equal_weight_length_mismatch() {
        assert!(equal_weight_metrics(&[0.5, 0.5], &[0.5], &[0.5, 0.5]).is_err());
    }
}
