//! Per-sequence token-probability features.
//!
//! All four features read only what a black-box service returns: the top-k
//! candidate probabilities of each generated token and, for perplexity, the
//! per-token probabilities of the input under teacher forcing.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{InvocationRecord, TokenStep};

/// Probabilities below this are treated as upstream bugs, never floored.
pub const MIN_PROBABILITY: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    #[serde(rename = "NLL")]
    Nll,
    #[serde(rename = "PPL")]
    Ppl,
    #[serde(rename = "GAP")]
    Gap,
    #[serde(rename = "MAXENT")]
    MaxEnt,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [
        FeatureKind::Nll,
        FeatureKind::Ppl,
        FeatureKind::Gap,
        FeatureKind::MaxEnt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Nll => "NLL",
            FeatureKind::Ppl => "PPL",
            FeatureKind::Gap => "GAP",
            FeatureKind::MaxEnt => "MAXENT",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NLL" => Ok(FeatureKind::Nll),
            "PPL" => Ok(FeatureKind::Ppl),
            "GAP" => Ok(FeatureKind::Gap),
            "MAXENT" | "MAX_ENT" => Ok(FeatureKind::MaxEnt),
            other => Err(Error::Config(format!("unknown feature kind `{other}`"))),
        }
    }
}

/// How input reconstruction log-probabilities are aggregated into PPL.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PplMode {
    /// exp of the mean negative log-probability (conventional perplexity).
    #[default]
    LengthNormalized,
    /// exp of the summed negative log-probability, no division by length.
    Summed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFeatures {
    pub sample_id: String,
    pub values: BTreeMap<FeatureKind, f64>,
}

fn steps(record: &InvocationRecord) -> Result<&[TokenStep]> {
    if record.output_steps.is_empty() {
        return Err(Error::invalid(
            "output_steps",
            format!("record `{}` has no generated tokens", record.sample_id),
        ));
    }
    Ok(&record.output_steps)
}

fn checked_ln(p: f64, what: impl FnOnce() -> String) -> Result<f64> {
    // Also rejects NaN.
    if p.is_nan() || p < MIN_PROBABILITY {
        return Err(Error::DegenerateProbability {
            what: what(),
            value: p,
        });
    }
    Ok(p.ln())
}

/// Negative log-likelihood of the generated sequence: minus the summed log
/// of the top candidate probability at every step.
pub fn nll(record: &InvocationRecord) -> Result<f64> {
    let mut total = 0.0;
    for (t, step) in steps(record)?.iter().enumerate() {
        total -= checked_ln(step.top1(), || {
            format!("top probability of step {t} of `{}`", record.sample_id)
        })?;
    }
    Ok(total)
}

pub fn ppl(record: &InvocationRecord) -> Result<f64> {
    ppl_with(record, PplMode::default())
}

/// Perplexity of the input under teacher forcing. Requires a service that
/// scores its input.
pub fn ppl_with(record: &InvocationRecord, mode: PplMode) -> Result<f64> {
    let scores = record.input_scores.as_deref().ok_or_else(|| {
        Error::Capability(format!(
            "record `{}` has no input_scores; use a service with input scoring to compute PPL",
            record.sample_id
        ))
    })?;
    if scores.is_empty() {
        return Err(Error::Capability(format!(
            "record `{}` has empty input_scores",
            record.sample_id
        )));
    }
    let mut total = 0.0;
    for (t, s) in scores.iter().enumerate() {
        total -= checked_ln(*s, || format!("input score {t} of `{}`", record.sample_id))?;
    }
    Ok(match mode {
        PplMode::LengthNormalized => (total / scores.len() as f64).exp(),
        PplMode::Summed => total.exp(),
    })
}

/// Summed margin between the first- and second-ranked candidates.
pub fn gap(record: &InvocationRecord) -> Result<f64> {
    Ok(steps(record)?.iter().map(|s| s.top1() - s.top2()).sum())
}

/// Entropy (nats) of one step's top-k candidates, renormalized to mass 1.
pub fn step_entropy(step: &TokenStep) -> Result<f64> {
    let mass: f64 = step.top_probs.iter().map(|(_, p)| p).sum();
    if mass.is_nan() || mass < MIN_PROBABILITY {
        return Err(Error::DegenerateProbability {
            what: format!("candidate mass of token `{}`", step.token),
            value: mass,
        });
    }
    let mut h = 0.0;
    for (_, p) in &step.top_probs {
        let q = p / mass;
        if q > 0.0 {
            h -= q * q.ln();
        }
    }
    // Rounding can leave -0.0 or a negative ulp for certain steps.
    Ok(h.max(0.0))
}

/// Largest per-token entropy across the generation.
pub fn max_ent(record: &InvocationRecord) -> Result<f64> {
    let mut best = 0.0f64;
    for step in steps(record)? {
        best = best.max(step_entropy(step)?);
    }
    Ok(best)
}

pub fn feature(record: &InvocationRecord, kind: FeatureKind, mode: PplMode) -> Result<f64> {
    match kind {
        FeatureKind::Nll => nll(record),
        FeatureKind::Ppl => ppl_with(record, mode),
        FeatureKind::Gap => gap(record),
        FeatureKind::MaxEnt => max_ent(record),
    }
}

pub fn sample_features(
    record: &InvocationRecord,
    kinds: &[FeatureKind],
    mode: PplMode,
) -> Result<SampleFeatures> {
    let mut values = BTreeMap::new();
    for &k in kinds {
        values.insert(k, feature(record, k, mode)?);
    }
    Ok(SampleFeatures {
        sample_id: record.sample_id.clone(),
        values,
    })
}

pub fn extract_task_features(
    records: &[InvocationRecord],
    kinds: &[FeatureKind],
) -> Result<BTreeMap<FeatureKind, Vec<f64>>> {
    extract_task_features_with(records, kinds, PplMode::default())
}

/// Per-kind feature lists for records of a single setting, in record order.
pub fn extract_task_features_with(
    records: &[InvocationRecord],
    kinds: &[FeatureKind],
    mode: PplMode,
) -> Result<BTreeMap<FeatureKind, Vec<f64>>> {
    let first = records
        .first()
        .ok_or_else(|| Error::InsufficientData("no records to extract features from".into()))?;
    if let Some(other) = records.iter().find(|r| !r.same_setting(first)) {
        return Err(Error::Grouping(format!(
            "{} and {} are different settings",
            first.setting(),
            other.setting()
        )));
    }
    let mut out = BTreeMap::new();
    for &k in kinds {
        let values = records
            .iter()
            .map(|r| feature(r, k, mode))
            .collect::<Result<Vec<_>>>()?;
        out.insert(k, values);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn rec(steps: Vec<TokenStep>, scores: Option<Vec<f64>>) -> InvocationRecord {
        InvocationRecord {
            service_id: "s".into(),
            task_id: "t".into(),
            context_id: "c".into(),
            sample_id: "x".into(),
            input_text: String::new(),
            generated_text: String::new(),
            output_steps: steps,
            input_scores: scores,
            reference: None,
        }
    }

    fn top(p: f64) -> TokenStep {
        TokenStep::new("a", vec![("a".into(), p)])
    }

    fn probs(ps: &[f64]) -> TokenStep {
        TokenStep::new(
            "t0",
            ps.iter().enumerate().map(|(i, p)| (format!("t{i}"), *p)).collect(),
        )
    }

    #[test]
    fn nll_examples() {
        assert_eq!(nll(&rec(vec![top(1.0); 3], None)).unwrap(), 0.0);
        let v = nll(&rec(vec![top(0.5), top(0.25), top(0.125)], None)).unwrap();
        assert!((v - 4.158_883_083_359_672).abs() < 1e-12);
        let v = nll(&rec(vec![top((-1.0f64).exp())], None)).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nll_rejects_zero_probability() {
        let r = rec(vec![top(0.5), top(0.0)], None);
        assert!(matches!(nll(&r), Err(Error::DegenerateProbability { .. })));
        let r = rec(vec![top(1e-13)], None);
        assert!(matches!(nll(&r), Err(Error::DegenerateProbability { .. })));
    }

    #[test]
    fn ppl_examples() {
        let certain = rec(vec![top(1.0)], Some(vec![1.0; 7]));
        assert_eq!(ppl_with(&certain, PplMode::LengthNormalized).unwrap(), 1.0);
        assert_eq!(ppl_with(&certain, PplMode::Summed).unwrap(), 1.0);

        let r = rec(vec![top(1.0)], Some(vec![E.recip(), E.recip()]));
        assert!((ppl_with(&r, PplMode::LengthNormalized).unwrap() - E).abs() < 1e-12);
        assert!((ppl_with(&r, PplMode::Summed).unwrap() - 7.389_056_098_930_65).abs() < 1e-12);

        let r = rec(vec![top(1.0)], Some(vec![0.5]));
        assert!((ppl_with(&r, PplMode::LengthNormalized).unwrap() - 2.0).abs() < 1e-15);
        assert!((ppl_with(&r, PplMode::Summed).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn ppl_requires_input_scores() {
        let r = rec(vec![top(1.0)], None);
        assert!(matches!(ppl(&r), Err(Error::Capability(_))));
        let r = rec(vec![top(1.0)], Some(vec![]));
        assert!(matches!(ppl(&r), Err(Error::Capability(_))));
        let r = rec(vec![top(1.0)], Some(vec![0.0]));
        assert!(matches!(ppl(&r), Err(Error::DegenerateProbability { .. })));
    }

    #[test]
    fn gap_examples() {
        assert_eq!(gap(&rec(vec![top(1.0); 5], None)).unwrap(), 5.0);
        let v = gap(&rec(vec![probs(&[0.9, 0.05])], None)).unwrap();
        assert!((v - 0.85).abs() < 1e-15);
        assert_eq!(gap(&rec(vec![probs(&[0.5, 0.5]); 2], None)).unwrap(), 0.0);
    }

    #[test]
    fn max_ent_examples() {
        assert_eq!(max_ent(&rec(vec![top(1.0); 4], None)).unwrap(), 0.0);

        let r = rec(vec![top(1.0), probs(&[0.25; 4]), top(1.0)], None);
        assert!((max_ent(&r).unwrap() - 1.386_294_361_119_890_6).abs() < 1e-12);

        // [0.3, 0.3] renormalizes to a fair coin, [0.2; 3] to a fair die.
        let r = rec(vec![probs(&[0.3, 0.3]), probs(&[0.2, 0.2, 0.2])], None);
        assert!((max_ent(&r).unwrap() - 1.098_612_288_668_109_8).abs() < 1e-12);
    }

    #[test]
    fn empty_generation_is_rejected() {
        let r = rec(vec![], None);
        assert!(nll(&r).is_err());
        assert!(gap(&r).is_err());
        assert!(max_ent(&r).is_err());
    }

    #[test]
    fn task_features_in_record_order() {
        let a = rec(vec![top(0.5)], Some(vec![0.5]));
        let mut b = rec(vec![top(0.25)], Some(vec![0.25]));
        b.sample_id = "y".into();
        let mut c = rec(vec![top(0.125)], Some(vec![0.125, 1.0]));
        c.sample_id = "z".into();
        let recs = vec![a, b, c];

        let one = extract_task_features(&recs[..1], &[FeatureKind::Nll]).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[&FeatureKind::Nll], vec![nll(&recs[0]).unwrap()]);

        let map = extract_task_features(&recs, &[FeatureKind::Nll, FeatureKind::Ppl]).unwrap();
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(map[&FeatureKind::Nll][i], nll(r).unwrap());
            assert_eq!(map[&FeatureKind::Ppl][i], ppl(r).unwrap());
        }
    }

    #[test]
    fn task_features_reject_mixed_settings() {
        let a = rec(vec![top(0.5)], None);
        let mut b = a.clone();
        b.context_id = "other".into();
        assert!(matches!(
            extract_task_features(&[a.clone(), b], &[FeatureKind::Nll]),
            Err(Error::Grouping(_))
        ));
        assert!(matches!(
            extract_task_features(&[a], &[FeatureKind::Ppl]),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn kinds_parse() {
        for k in FeatureKind::ALL {
            assert_eq!(k.as_str().parse::<FeatureKind>().unwrap(), k);
        }
        assert!("entropy".parse::<FeatureKind>().is_err());
    }
}
