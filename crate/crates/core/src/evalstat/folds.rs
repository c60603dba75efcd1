use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldMode {
    /// Volumes are dealt out independently; sizes differ by at most one.
    #[default]
    ByVolume,
    /// All volumes of a patient land in the same fold.
    ByPatient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub n_folds: usize,
    pub mode: FoldMode,
    /// case_id → fold index.
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.assignment.get(case_id).copied()
    }

    /// Case ids of `fold`, sorted.
    pub fn members(&self, fold: usize) -> Vec<String> {
        self.assignment.iter().filter(|&(_, &f)| f == fold).map(|(id, _)| id.clone()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded assignment of `(case_id, patient_id)` pairs to `n_folds` folds.
pub fn make_folds(
    cases: &[(String, String)],
    n_folds: usize,
    mode: FoldMode,
    seed: u64,
) -> Result<FoldSplit, EvalError> {
    let unique: BTreeSet<&str> = cases.iter().map(|(c, _)| c.as_str()).collect();
    if unique.len() != cases.len() {
        return Err(EvalError::UnpairedRecords("duplicate case ids".into()));
    }
    if n_folds == 0 || n_folds > cases.len() {
        return Err(EvalError::TooFewCases { needed: n_folds.max(1), got: cases.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    match mode {
        FoldMode::ByVolume => {
            let mut order: Vec<&String> = cases.iter().map(|(c, _)| c).collect();
            order.shuffle(&mut rng);
            for (i, id) in order.into_iter().enumerate() {
                assignment.insert(id.clone(), i % n_folds);
            }
        }
        FoldMode::ByPatient => {
            let mut groups: BTreeMap<&str, Vec<&String>> = BTreeMap::new();
            for (c, p) in cases {
                groups.entry(p.as_str()).or_default().push(c);
            }
            if groups.len() < n_folds {
                return Err(EvalError::TooFewCases { needed: n_folds, got: groups.len() });
            }
            let mut patients: Vec<Vec<&String>> = groups.into_values().collect();
            patients.shuffle(&mut rng);
            // stable: equal-size patients keep their shuffled order
            patients.sort_by_key(|g| std::cmp::Reverse(g.len()));
            let mut sizes = vec![0usize; n_folds];
            for group in patients {
                let fold = (0..n_folds).min_by_key(|&f| (sizes[f], f)).expect("n_folds >= 1");
                sizes[fold] += group.len();
                for id in group {
                    assignment.insert(id.clone(), fold);
                }
            }
        }
    }
    Ok(FoldSplit { n_folds, mode, assignment })
}

/// Seeded split into training and validation items with
/// `max(1, round(0.2 n))` validation items. Both lists keep input order.
pub fn train_val_split<T: Clone>(items: &[T], seed: u64) -> Result<(Vec<T>, Vec<T>), EvalError> {
    let n = items.len();
    if n < 2 {
        return Err(EvalError::TooFewCases { needed: 2, got: n });
    }
    let n_val = ((0.2 * n as f64).round() as usize).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (item, v) in items.iter().zip(is_val) {
        if v {
            val.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, val))
}
