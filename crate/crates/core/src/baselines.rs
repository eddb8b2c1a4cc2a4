//! Label-using baselines: Sample^n, AvgTrain and average thresholded
//! confidence (ATC).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::nll;
use crate::records::InvocationRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtcCalibration {
    pub source_task_id: String,
    pub context_id: String,
    pub threshold: f64,
    pub source_accuracy: f64,
}

impl AtcCalibration {
    pub fn for_source(mut self, task_id: impl Into<String>, context_id: impl Into<String>) -> Self {
        self.source_task_id = task_id.into();
        self.context_id = context_id.into();
        self
    }
}

/// Mean per-sample performance over the first `n` labeled samples of each
/// context in `contexts`, in list order.
pub fn sample_n_estimate(
    labeled: &[(&InvocationRecord, f64)],
    n: usize,
    contexts: &BTreeSet<String>,
) -> Result<f64> {
    if n == 0 || contexts.is_empty() {
        return Err(Error::InsufficientLabels {
            requested: n,
            available: 0,
        });
    }
    let mut total = 0.0;
    for ctx in contexts {
        let perfs: Vec<f64> = labeled
            .iter()
            .filter(|(r, _)| &r.context_id == ctx)
            .map(|(_, p)| *p)
            .take(n)
            .collect();
        if perfs.len() < n {
            return Err(Error::InsufficientLabels {
                requested: n,
                available: perfs.len(),
            });
        }
        total += perfs.iter().sum::<f64>();
    }
    Ok(total / (n * contexts.len()) as f64)
}

pub fn avg_train_estimate(training_performances: &[f64]) -> Result<f64> {
    if training_performances.is_empty() {
        return Err(Error::InsufficientData("AvgTrain needs at least one labeled setting".into()));
    }
    Ok(training_performances.iter().sum::<f64>() / training_performances.len() as f64)
}

/// Length-normalized sequence likelihood `exp(-nll / |x|)`.
pub fn confidence(record: &InvocationRecord) -> Result<f64> {
    let len = record.output_steps.len().max(1) as f64;
    Ok((-nll(record)? / len).exp())
}

fn fraction_above(confidences: &[f64], threshold: f64) -> f64 {
    confidences.iter().filter(|c| **c > threshold).count() as f64 / confidences.len() as f64
}

/// Threshold whose fraction-above best matches the mean correctness.
///
/// Candidates are one value below the minimum, the midpoints between
/// consecutive distinct confidences, and the maximum; together they realize
/// every achievable fraction. Ties go to the smallest threshold.
pub fn atc_calibrate(confidences: &[f64], correctness: &[f64]) -> Result<AtcCalibration> {
    if confidences.is_empty() {
        return Err(Error::InsufficientData("ATC calibration needs labeled samples".into()));
    }
    if confidences.len() != correctness.len() {
        return Err(Error::Shape(format!(
            "{} confidences but {} correctness values",
            confidences.len(),
            correctness.len()
        )));
    }
    if let Some(c) = correctness.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid("correctness", format!("{c} is outside [0, 1]")));
    }
    let accuracy = correctness.iter().sum::<f64>() / correctness.len() as f64;
    let mut unique = confidences.to_vec();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let mut candidates = vec![unique[0] - 1.0];
    candidates.extend(unique.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    candidates.push(unique[unique.len() - 1]);

    let mut best = (f64::INFINITY, candidates[0]);
    for t in candidates {
        let gap = (fraction_above(confidences, t) - accuracy).abs();
        if gap < best.0 {
            best = (gap, t);
        }
    }
    Ok(AtcCalibration {
        source_task_id: String::new(),
        context_id: String::new(),
        threshold: best.1,
        source_accuracy: accuracy,
    })
}

/// Mean over calibrations of the fraction of target confidences above each
/// calibration's threshold.
pub fn atc_estimate(calibrations: &[AtcCalibration], target_confidences: &[f64]) -> Result<f64> {
    if calibrations.is_empty() || target_confidences.is_empty() {
        return Err(Error::InsufficientData(
            "ATC needs calibrations and target confidences".into(),
        ));
    }
    let total: f64 = calibrations
        .iter()
        .map(|c| fraction_above(target_confidences, c.threshold))
        .sum();
    Ok(total / calibrations.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::TokenStep;

    fn rec(ctx: &str, i: usize) -> InvocationRecord {
        InvocationRecord {
            service_id: "s".into(),
            task_id: "t".into(),
            context_id: ctx.into(),
            sample_id: format!("{ctx}-{i}"),
            input_text: String::new(),
            generated_text: String::new(),
            output_steps: vec![TokenStep::certain("a")],
            input_scores: None,
            reference: None,
        }
    }

    fn ctxs(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn sample_n_examples() {
        let a = rec("c", 0);
        let b = rec("c", 1);
        assert_eq!(sample_n_estimate(&[(&a, 0.5)], 1, &ctxs(&["c"])).unwrap(), 0.5);
        assert_eq!(sample_n_estimate(&[(&a, 0.0), (&b, 1.0)], 2, &ctxs(&["c"])).unwrap(), 0.5);
    }

    #[test]
    fn sample_n_double_sum() {
        let recs: Vec<InvocationRecord> = (0..10)
            .map(|i| rec(if i % 2 == 0 { "x" } else { "y" }, i))
            .chain((0..4).map(|i| rec("z", i)))
            .collect();
        let vals = [0.1, 0.9, 0.2, 0.8, 0.3, 0.7, 0.4, 0.6, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0];
        let labeled: Vec<(&InvocationRecord, f64)> = recs.iter().zip(vals).collect();
        // first 4 of x: 0.1 0.2 0.3 0.4; first 4 of y: 0.9 0.8 0.7 0.6
        let got = sample_n_estimate(&labeled, 4, &ctxs(&["x", "y"])).unwrap();
        assert!((got - 4.0 / 8.0).abs() < 1e-12);
        let err = sample_n_estimate(&labeled, 6, &ctxs(&["x"])).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientLabels {
                requested: 6,
                available: 5
            }
        ));
    }

    #[test]
    fn sample_n_full_set_is_truth() {
        let recs: Vec<InvocationRecord> = (0..7).map(|i| rec("c", i)).collect();
        let vals = [0.2, 0.4, 1.0, 0.0, 0.3, 0.9, 0.55];
        let labeled: Vec<(&InvocationRecord, f64)> = recs.iter().zip(vals).collect();
        let truth = vals.iter().sum::<f64>() / 7.0;
        assert!((sample_n_estimate(&labeled, 7, &ctxs(&["c"])).unwrap() - truth).abs() < 1e-15);
    }

    #[test]
    fn avg_train_examples() {
        assert_eq!(avg_train_estimate(&[0.4]).unwrap(), 0.4);
        assert_eq!(avg_train_estimate(&[0.0, 1.0]).unwrap(), 0.5);
        assert!(avg_train_estimate(&[]).is_err());
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..650).map(|_| rng.random::<f64>()).collect();
        let oracle = vals.iter().fold(0.0, |a, v| a + v) / 650.0;
        assert!((avg_train_estimate(&vals).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn atc_calibrate_examples() {
        let c = atc_calibrate(&[0.1, 0.9], &[0.0, 1.0]).unwrap();
        assert_eq!(c.threshold, 0.5);
        assert_eq!(fraction_above(&[0.1, 0.9], c.threshold), 0.5);

        let all_right = atc_calibrate(&[0.3, 0.6, 0.8], &[1.0, 1.0, 1.0]).unwrap();
        assert!(all_right.threshold < 0.3);
        let all_wrong = atc_calibrate(&[0.3, 0.6, 0.8], &[0.0, 0.0, 0.0]).unwrap();
        assert!(all_wrong.threshold >= 0.8);
        assert!(atc_calibrate(&[], &[]).is_err());
        assert!(atc_calibrate(&[0.2], &[0.2, 0.3]).is_err());
    }

    fn cal(t: f64) -> AtcCalibration {
        AtcCalibration {
            source_task_id: "t".into(),
            context_id: "c".into(),
            threshold: t,
            source_accuracy: 0.0,
        }
    }

    #[test]
    fn atc_estimate_examples() {
        assert_eq!(atc_estimate(&[cal(0.0)], &[0.2, 0.5]).unwrap(), 1.0);
        let conf = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        // thresholds 0.85 -> 0.2, 0.45 -> 0.6
        let got = atc_estimate(&[cal(0.85), cal(0.45)], &conf).unwrap();
        assert!((got - 0.4).abs() < 1e-12);
        // 0.05 -> 1.0, 0.55 -> 0.5, 0.95 -> 0.1
        let got = atc_estimate(&[cal(0.05), cal(0.55), cal(0.95)], &conf).unwrap();
        assert!((got - 1.6 / 3.0).abs() < 1e-12);
        assert!(atc_estimate(&[], &conf).is_err());
        assert!(atc_estimate(&[cal(0.1)], &[]).is_err());
    }

    #[test]
    fn confidence_is_geometric_mean_of_top1() {
        let mut r = rec("c", 0);
        r.output_steps = vec![
            TokenStep::new("a", vec![("a".into(), 0.5)]),
            TokenStep::new("b", vec![("b".into(), 0.8)]),
        ];
        assert!((confidence(&r).unwrap() - (0.4f64).sqrt()).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn atc_monotone_in_threshold(
            conf in proptest::collection::vec(0.0f64..1.0, 1..30),
            t in 0.0f64..1.0,
            dt in 0.0f64..0.5,
        ) {
            let lo = atc_estimate(&[cal(t)], &conf).unwrap();
            let hi = atc_estimate(&[cal(t + dt)], &conf).unwrap();
            proptest::prop_assert!(hi <= lo);
            proptest::prop_assert!((0.0..=1.0).contains(&lo));
        }

        #[test]
        fn calibration_is_optimal(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..=1.0), 1..25),
        ) {
            let (conf, corr): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let c = atc_calibrate(&conf, &corr).unwrap();
            let acc = corr.iter().sum::<f64>() / corr.len() as f64;
            let best = (fraction_above(&conf, c.threshold) - acc).abs();
            for &t in conf.iter().chain(std::iter::once(&-1.0)) {
                proptest::prop_assert!(best <= (fraction_above(&conf, t) - acc).abs() + 1e-15);
            }
        }
    }
}
