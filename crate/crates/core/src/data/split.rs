use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use crate::data::synth::stream;
use crate::error::{Error, Result};

/// Train/validation partition of item indices, disjoint by patient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub train_patients: BTreeSet<u32>,
    pub val_patients: BTreeSet<u32>,
}

/// Shuffles the distinct patients with `seed`, assigns the first
/// `ceil(train_ratio * P)` to training and the rest to validation. Item
/// order within each side follows the input order.
pub fn split_by_patient(patient_ids: &[u32], train_ratio: f64, seed: u64) -> Result<PatientSplit> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::Split(format!("train_ratio must lie in (0, 1), got {train_ratio}")));
    }
    let mut patients: Vec<u32> = patient_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let total = patients.len();
    let n_train = (train_ratio * total as f64 - 1e-9).ceil() as usize;
    if n_train == 0 || n_train >= total {
        return Err(Error::Split(format!(
            "ratio {train_ratio} over {total} patients leaves an empty side ({n_train} train)"
        )));
    }
    let mut rng = stream(&[seed, 0x5917]);
    patients.shuffle(&mut rng);
    let train_patients: BTreeSet<u32> = patients[..n_train].iter().copied().collect();
    let val_patients: BTreeSet<u32> = patients[n_train..].iter().copied().collect();
    let (train, val): (Vec<usize>, Vec<usize>) =
        (0..patient_ids.len()).partition(|&i| train_patients.contains(&patient_ids[i]));
    Ok(PatientSplit {
        train,
        val,
        train_patients,
        val_patients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn half_split_of_ten_patients() {
        let ids: Vec<u32> = (0..10).flat_map(|p| [p, p, p]).collect();
        let s = split_by_patient(&ids, 0.5, 3).unwrap();
        assert_eq!(s.train_patients.len(), 5);
        assert_eq!(s.train.len(), 15);
        for &i in &s.train {
            assert!(s.train_patients.contains(&ids[i]));
        }
    }

    #[test]
    fn experiment_grid_ratios_are_supported() {
        let ids: Vec<u32> = (0..10).collect();
        for (ratio, expect) in [(0.1, 1), (0.3, 3), (0.5, 5), (0.7, 7), (0.9, 9)] {
            assert_eq!(split_by_patient(&ids, ratio, 0).unwrap().train_patients.len(), expect);
        }
    }

    #[test]
    fn empty_side_is_rejected() {
        assert!(split_by_patient(&[1, 1, 1], 0.5, 0).is_err());
        assert!(split_by_patient(&[1, 2, 3], 0.0, 0).is_err());
        assert!(split_by_patient(&[1, 2, 3], 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn sides_are_disjoint_and_cover(ids in proptest::collection::vec(0u32..30, 2..200), ratio in 0.05f64..0.95, seed in any::<u64>()) {
            if let Ok(s) = split_by_patient(&ids, ratio, seed) {
                prop_assert!(s.train_patients.is_disjoint(&s.val_patients));
                let mut all: Vec<usize> = s.train.iter().chain(&s.val).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..ids.len()).collect::<Vec<_>>());
                prop_assert_eq!(split_by_patient(&ids, ratio, seed).unwrap(), s);
            }
        }
    }
}
