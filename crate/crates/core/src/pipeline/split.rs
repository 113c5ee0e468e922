//! Grade-stratified five-fold split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, NUM_FOLDS};
use crate::datamodel::Grade;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Cases of each grade are shuffled with `seed` and dealt round-robin into
/// five folds; fold `k` validates on its own share and trains on the rest.
/// Every grade present needs at least five cases.
pub fn five_fold_split(cases: &[(String, Grade)], seed: u64) -> Result<Vec<Fold>, PipelineError> {
    let mut buckets: Vec<Vec<String>> = vec![Vec::new(); NUM_FOLDS];
    for grade in [Grade::Hgg, Grade::Lgg] {
        let mut ids: Vec<String> = cases.iter().filter(|(_, g)| *g == grade).map(|(id, _)| id.clone()).collect();
        if ids.is_empty() {
            continue;
        }
        if ids.len() < NUM_FOLDS {
            return Err(PipelineError::Split(format!(
                "{} {grade} cases; stratified {NUM_FOLDS}-fold split needs at least {NUM_FOLDS} per grade",
                ids.len()
            )));
        }
        ids.sort();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ grade.index() as u64));
        for (i, id) in ids.into_iter().enumerate() {
            buckets[i % NUM_FOLDS].push(id);
        }
    }
    if buckets.iter().all(Vec::is_empty) {
        return Err(PipelineError::Split("no cases to split".into()));
    }
    Ok((0..NUM_FOLDS)
        .map(|k| {
            let mut val = buckets[k].clone();
            val.sort();
            let mut train: Vec<String> = (0..NUM_FOLDS).filter(|&j| j != k).flat_map(|j| buckets[j].clone()).collect();
            train.sort();
            Fold { train, val }
        })
        .collect())
}
