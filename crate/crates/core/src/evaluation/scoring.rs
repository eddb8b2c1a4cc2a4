use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::records::InvocationRecord;

/// Lowercase, drop punctuation, split on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{3001}'..='\u{3003}' | '\u{00A1}' | '\u{00BF}' | '\u{00AB}' | '\u{00BB}'
    )
}

/// Token-overlap F1 with bag-of-words (multiset) overlap.
pub fn f1_score(prediction: &str, reference: &str) -> f64 {
    let pred = normalize_tokens(prediction);
    let gold = normalize_tokens(reference);
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Per-sample F1 of a record against its reference.
pub fn sample_f1(record: &InvocationRecord) -> Result<f64> {
    let reference = record.reference.as_deref().ok_or_else(|| {
        Error::Labeling(format!(
            "record `{}` in {} has no reference answer",
            record.sample_id,
            record.setting()
        ))
    })?;
    Ok(f1_score(&record.generated_text, reference))
}

/// True performance of one setting: mean per-sample F1.
pub fn task_performance(records: &[InvocationRecord]) -> Result<f64> {
    let first = records
        .first()
        .ok_or_else(|| Error::InsufficientData("no records to score".into()))?;
    let mut total = 0.0;
    for r in records {
        if !r.same_setting(first) {
            return Err(Error::Grouping(format!(
                "{} and {} are different settings",
                first.setting(),
                r.setting()
            )));
        }
        total += sample_f1(r)?;
    }
    Ok(total / records.len() as f64)
}

/// Mean absolute error and population standard deviation of the errors.
pub fn mae(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::InsufficientData("mae of zero pairs".into()));
    }
    let errors: Vec<f64> = pairs.iter().map(|(e, t)| (e - t).abs()).collect();
    Ok(mean_sd(&errors))
}

pub(crate) fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
