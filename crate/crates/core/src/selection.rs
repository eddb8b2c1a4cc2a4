//! Correlation-driven choice of which features feed the meta-model.
//!
//! A combination scores well when its members correlate strongly with
//! performance and weakly with each other. Scores use correlation
//! magnitudes: lower-is-better features (NLL, PPL, MaxEnt) correlate
//! negatively with F1 and are informative all the same.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::task_performance;
use crate::features::{extract_task_features, FeatureKind};
use crate::records::RecordStore;

/// Row/column label of a correlation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Feature(FeatureKind),
    Performance,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Feature(k) => write!(f, "{k}"),
            Label::Performance => f.write_str("F1"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<Label>,
    pub values: Vec<Vec<f64>>,
}

impl CorrelationMatrix {
    /// Builds a matrix from the upper-triangle entries; unspecified
    /// off-diagonal pairs are an error.
    pub fn from_pairs(features: &[FeatureKind], pairs: &[(Label, Label, f64)]) -> Result<Self> {
        let mut labels: Vec<Label> = features.iter().copied().map(Label::Feature).collect();
        labels.push(Label::Performance);
        let n = labels.len();
        let mut values = vec![vec![f64::NAN; n]; n];
        for (i, row) in values.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for &(a, b, v) in pairs {
            let i = position(&labels, a)?;
            let j = position(&labels, b)?;
            values[i][j] = v;
            values[j][i] = v;
        }
        let m = CorrelationMatrix { labels, values };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.values.len() != n || self.values.iter().any(|r| r.len() != n) {
            return Err(Error::Shape(format!("correlation matrix must be {n}x{n}")));
        }
        for i in 0..n {
            if self.values[i][i] != 1.0 {
                return Err(Error::invalid("values", format!("diagonal entry {i} is not 1")));
            }
            for j in 0..n {
                let v = self.values[i][j];
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::invalid(
                        "values",
                        format!("entry ({}, {}) = {v} outside [-1, 1]", self.labels[i], self.labels[j]),
                    ));
                }
                if v != self.values[j][i] {
                    return Err(Error::invalid("values", "matrix is not symmetric"));
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, a: Label, b: Label) -> Result<f64> {
        let i = position(&self.labels, a)?;
        let j = position(&self.labels, b)?;
        Ok(self.values[i][j])
    }

    pub fn features(&self) -> Vec<FeatureKind> {
        self.labels
            .iter()
            .filter_map(|l| match l {
                Label::Feature(k) => Some(*k),
                Label::Performance => None,
            })
            .collect()
    }

    pub fn absolute(&self) -> Self {
        CorrelationMatrix {
            labels: self.labels.clone(),
            values: self
                .values
                .iter()
                .map(|r| r.iter().map(|v| v.abs()).collect())
                .collect(),
        }
    }
}

fn position(labels: &[Label], l: Label) -> Result<usize> {
    labels
        .iter()
        .position(|x| *x == l)
        .ok_or_else(|| Error::Lookup(format!("`{l}` is not in the correlation matrix")))
}

/// Sample Pearson correlation. Constant inputs are an error, not zero.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!(
            "pearson needs equal lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::InsufficientData("pearson needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the inputs is constant".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Signed correlations between every feature column and performance.
pub fn correlation_matrix(
    table: &BTreeMap<FeatureKind, Vec<f64>>,
    performance: &[f64],
) -> Result<CorrelationMatrix> {
    let features: Vec<FeatureKind> = table.keys().copied().collect();
    let mut labels: Vec<Label> = features.iter().copied().map(Label::Feature).collect();
    labels.push(Label::Performance);
    let column = |l: Label| -> &[f64] {
        match l {
            Label::Feature(k) => &table[&k],
            Label::Performance => performance,
        }
    };
    let n = labels.len();
    let mut values = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let r = pearson(column(labels[i]), column(labels[j]))?;
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix { labels, values })
}

/// Relevance minus redundancy: the sum of each member's correlation with
/// performance, minus the correlation of every unordered member pair.
pub fn combination_score(set: &[FeatureKind], corr: &CorrelationMatrix) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::InsufficientData("combination must be non-empty".into()));
    }
    let mut score = 0.0;
    for (i, &a) in set.iter().enumerate() {
        score += corr.get(Label::Feature(a), Label::Performance)?;
        for &b in &set[i + 1..] {
            score -= corr.get(Label::Feature(a), Label::Feature(b))?;
        }
    }
    Ok(score)
}

/// Every non-empty subset of `features`, smallest first, then
/// lexicographic by feature order.
pub fn subsets(features: &[FeatureKind]) -> Vec<Vec<FeatureKind>> {
    let mut sorted = features.to_vec();
    sorted.sort();
    sorted.dedup();
    let n = sorted.len();
    let mut out: Vec<Vec<FeatureKind>> = (1u32..(1 << n))
        .map(|mask| {
            (0..n)
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| sorted[i])
                .collect()
        })
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub features: Vec<FeatureKind>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Signed correlations as measured.
    pub correlations: CorrelationMatrix,
    /// All subsets, best first. Ties keep the canonical subset order.
    pub ranked: Vec<SubsetScore>,
}

impl SelectionReport {
    pub fn best(&self) -> &[FeatureKind] {
        &self.ranked[0].features
    }
}

pub fn select_features(
    table: &BTreeMap<FeatureKind, Vec<f64>>,
    performance: &[f64],
) -> Result<SelectionReport> {
    if table.is_empty() {
        return Err(Error::InsufficientData("feature table is empty".into()));
    }
    if let Some((k, v)) = table.iter().find(|(_, v)| v.len() != performance.len()) {
        return Err(Error::Shape(format!(
            "{k} has {} values but there are {} performance values",
            v.len(),
            performance.len()
        )));
    }
    let correlations = correlation_matrix(table, performance)?;
    let magnitudes = correlations.absolute();
    let mut ranked = subsets(&correlations.features())
        .into_iter()
        .map(|features| {
            let score = combination_score(&features, &magnitudes)?;
            Ok(SubsetScore { features, score })
        })
        .collect::<Result<Vec<_>>>()?;
    // Stable sort preserves the canonical order among equal scores.
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(SelectionReport {
        correlations,
        ranked,
    })
}

/// The highest-scoring feature combination.
pub fn select_best_combination(
    table: &BTreeMap<FeatureKind, Vec<f64>>,
    performance: &[f64],
) -> Result<Vec<FeatureKind>> {
    Ok(select_features(table, performance)?.best().to_vec())
}

/// Feature values by kind, aligned with a performance vector.
pub type FeatureTable = BTreeMap<FeatureKind, Vec<f64>>;

/// Per-setting mean of each feature next to the setting's true F1, so
/// correlations are measured per task setting rather than per sample.
pub fn setting_table(
    store: &RecordStore,
    kinds: &[FeatureKind],
) -> Result<(FeatureTable, Vec<f64>)> {
    let mut table: BTreeMap<FeatureKind, Vec<f64>> =
        kinds.iter().map(|k| (*k, Vec::new())).collect();
    let mut performance = Vec::new();
    for (_, records) in store.groups() {
        let feats = extract_task_features(records, kinds)?;
        for (k, values) in feats {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            table.get_mut(&k).expect("kind requested").push(mean);
        }
        performance.push(task_performance(records)?);
    }
    Ok((table, performance))
}
