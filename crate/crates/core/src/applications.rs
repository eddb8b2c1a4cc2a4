//! Downstream uses of the estimates: picking a (service, context) for a
//! task, and ranking services as fine-tuning targets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::profile::FeatureProfile;

#[derive(Clone, Debug, PartialEq)]
pub struct SettingCandidate {
    pub service_id: String,
    pub context_id: String,
    pub profile: FeatureProfile,
    pub estimate: f64,
}

/// Highest estimate wins; ties go to the lexicographically first
/// `(service_id, context_id)`.
pub fn select_setting(candidates: &[SettingCandidate]) -> Result<&SettingCandidate> {
    candidates
        .iter()
        .reduce(|best, c| {
            let better = c.estimate > best.estimate
                || (c.estimate == best.estimate
                    && (&c.service_id, &c.context_id) < (&best.service_id, &best.context_id));
            if better {
                c
            } else {
                best
            }
        })
        .ok_or_else(|| Error::InsufficientData("no candidate settings".into()))
}

/// Services by estimated performance, best first; ties by id.
pub fn rank_finetune_targets(estimates: &BTreeMap<String, f64>) -> Vec<String> {
    let mut ranked: Vec<(&String, f64)> = estimates.iter().map(|(k, v)| (k, *v)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.into_iter().map(|(k, _)| k.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use proptest::prelude::*;

    fn cand(service: &str, ctx: &str, estimate: f64) -> SettingCandidate {
        SettingCandidate {
            service_id: service.into(),
            context_id: ctx.into(),
            profile: FeatureProfile {
                service_id: service.into(),
                task_id: "t".into(),
                context_id: ctx.into(),
                kinds: vec![FeatureKind::Nll],
                dims: 1,
                vector: vec![0.0],
            },
            estimate,
        }
    }

    #[test]
    fn selection_examples() {
        let one = [cand("a", "c", 0.3)];
        assert_eq!(select_setting(&one).unwrap(), &one[0]);
        let three = [cand("a", "c", 0.2), cand("b", "c", 0.9), cand("c", "c", 0.5)];
        assert_eq!(select_setting(&three).unwrap().service_id, "b");
        assert!(select_setting(&[]).is_err());
        let tied = [cand("b", "c1", 0.5), cand("a", "c2", 0.5), cand("a", "c1", 0.5)];
        let pick = select_setting(&tied).unwrap();
        assert_eq!((pick.service_id.as_str(), pick.context_id.as_str()), ("a", "c1"));
    }

    #[test]
    fn ranking_examples() {
        let m = |pairs: &[(&str, f64)]| pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        assert_eq!(rank_finetune_targets(&m(&[("A", 0.1)])), ["A"]);
        assert_eq!(rank_finetune_targets(&m(&[("A", 0.3), ("B", 0.7)])), ["B", "A"]);
        assert_eq!(rank_finetune_targets(&m(&[("B", 0.5), ("A", 0.5)])), ["A", "B"]);
    }

    proptest! {
        #[test]
        fn selection_invariant_under_increasing_transform(
            ests in proptest::collection::vec(0.0f64..1.0, 1..20),
        ) {
            let cands: Vec<_> = ests.iter().enumerate().map(|(i, e)| cand(&format!("s{i:02}"), "c", *e)).collect();
            let squashed: Vec<_> = cands
                .iter()
                .map(|c| SettingCandidate { estimate: (3.0 * c.estimate).exp() / 10.0, ..c.clone() })
                .collect();
            prop_assert_eq!(
                &select_setting(&cands).unwrap().service_id,
                &select_setting(&squashed).unwrap().service_id
            );
        }

        #[test]
        fn ranking_is_permutation(
            ests in proptest::collection::btree_map("[a-e]{1,3}", 0.0f64..1.0, 1..10),
        ) {
            let mut ranked = rank_finetune_targets(&ests);
            for w in ranked.windows(2) {
                prop_assert!(ests[&w[0]] >= ests[&w[1]]);
            }
            ranked.sort();
            prop_assert_eq!(ranked, ests.keys().cloned().collect::<Vec<_>>());
        }
    }
}
