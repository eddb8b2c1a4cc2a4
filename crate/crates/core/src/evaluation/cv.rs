use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed::component_rng;

/// `(train_indices, test_indices)` for one fold, both ascending.
pub type Fold = (Vec<usize>, Vec<usize>);

fn deal(order: &[usize], folds: usize) -> Vec<Vec<usize>> {
    let mut buckets = vec![Vec::new(); folds];
    for (pos, &item) in order.iter().enumerate() {
        buckets[pos % folds].push(item);
    }
    buckets
}

fn check(folds: usize, units: usize, what: &str) -> Result<()> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if folds > units {
        return Err(Error::Config(format!(
            "{folds} folds requested but only {units} {what}"
        )));
    }
    Ok(())
}

/// Seeded shuffle of `0..n` dealt into `folds` test sets whose sizes
/// differ by at most one.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<Fold>> {
    check(folds, n, "rows")?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut component_rng(seed, "kfold"));
    Ok(assemble(n, deal(&order, folds)))
}

/// Like [`kfold_split`] but every row sharing a group key lands in the
/// same fold. The number of groups per fold differs by at most one.
pub fn kfold_split_grouped<K: Ord + Clone>(groups: &[K], folds: usize, seed: u64) -> Result<Vec<Fold>> {
    let mut keys: Vec<K> = groups.to_vec();
    keys.sort();
    keys.dedup();
    check(folds, keys.len(), "groups")?;
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.shuffle(&mut component_rng(seed, "kfold-grouped"));
    let dealt = deal(&order, folds);
    let mut fold_of_key = vec![0usize; keys.len()];
    for (f, bucket) in dealt.iter().enumerate() {
        for &k in bucket {
            fold_of_key[k] = f;
        }
    }
    let mut tests = vec![Vec::new(); folds];
    for (i, g) in groups.iter().enumerate() {
        let k = keys.binary_search(g).expect("key collected above");
        tests[fold_of_key[k]].push(i);
    }
    Ok(assemble(groups.len(), tests))
}

fn assemble(n: usize, mut tests: Vec<Vec<usize>>) -> Vec<Fold> {
    let mut fold_of = vec![0usize; n];
    for (f, t) in tests.iter_mut().enumerate() {
        t.sort_unstable();
        for &i in t.iter() {
            fold_of[i] = f;
        }
    }
    tests
        .into_iter()
        .enumerate()
        .map(|(f, test)| {
            let train = (0..n).filter(|&i| fold_of[i] != f).collect();
            (train, test)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_rows_five_folds() {
        let folds = kfold_split(10, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = [false; 10];
        for (train, test) in &folds {
            assert_eq!(test.len(), 2);
            assert_eq!(train.len(), 8);
            for &i in test {
                assert!(!seen[i]);
                seen[i] = true;
                assert!(!train.contains(&i));
            }
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(kfold_split(23, 4, 9).unwrap(), kfold_split(23, 4, 9).unwrap());
        assert_ne!(kfold_split(23, 4, 9).unwrap(), kfold_split(23, 4, 10).unwrap());
    }

    #[test]
    fn sizes_differ_by_at_most_one() {
        for n in 5..40 {
            let folds = kfold_split(n, 5, n as u64).unwrap();
            let sizes: Vec<usize> = folds.iter().map(|(_, t)| t.len()).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            assert_eq!(sizes.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn groups_never_straddle_folds() {
        let groups: Vec<String> = (0..130).map(|i| format!("task{}", i % 13)).collect();
        for seed in 0..10 {
            let folds = kfold_split_grouped(&groups, 5, seed).unwrap();
            for (_, test) in &folds {
                for (train, _) in &folds {
                    let _ = train;
                }
                let in_test: std::collections::BTreeSet<&String> =
                    test.iter().map(|&i| &groups[i]).collect();
                for (i, g) in groups.iter().enumerate() {
                    if in_test.contains(g) {
                        assert!(test.contains(&i));
                    }
                }
            }
            let per_fold: Vec<usize> = folds
                .iter()
                .map(|(_, t)| {
                    let s: std::collections::BTreeSet<&String> = t.iter().map(|&i| &groups[i]).collect();
                    s.len()
                })
                .collect();
            assert_eq!(per_fold.iter().sum::<usize>(), 13);
            assert!(per_fold.iter().max().unwrap() - per_fold.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn too_many_folds() {
        assert!(matches!(kfold_split(3, 4, 0), Err(Error::Config(_))));
        assert!(matches!(kfold_split(10, 1, 0), Err(Error::Config(_))));
        assert!(kfold_split_grouped(&["a", "a", "b"], 3, 0).is_err());
    }
}
