use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Split, TripletSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.valid, self.test];
        if all.iter().any(|r| !r.is_finite() || *r < 0.0) || self.train <= 0.0 {
            return Err(Error::Config(format!(
                "split ratios must be non-negative with train > 0: {self:?}"
            )));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-user stratified random split.
///
/// Each user's records are shuffled and cut into train/valid/test. Valid
/// and test counts are `floor(n·ratio + carry)` with the fractional part
/// carried to the next user, so every user is within one record of its
/// target and the global totals are within one record of theirs. Users
/// with at least three records always keep one in train.
pub fn split_triplets(set: &TripletSet, ratios: SplitRatios, seed: u64) -> Result<TripletSet> {
    ratios.validate()?;
    if set.is_empty() {
        return Err(Error::Empty("triplet set to split"));
    }
    let mut by_user: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in set.records.iter().enumerate() {
        by_user.entry(t.user).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = set.records.clone();
    let (mut carry_valid, mut carry_test) = (0.0f64, 0.0f64);
    for positions in by_user.values_mut() {
        positions.shuffle(&mut rng);
        let n = positions.len();
        let want_valid = n as f64 * ratios.valid + carry_valid;
        let want_test = n as f64 * ratios.test + carry_test;
        let mut n_valid = (want_valid + 1e-9).floor() as usize;
        let mut n_test = (want_test + 1e-9).floor() as usize;
        carry_valid = want_valid - n_valid as f64;
        carry_test = want_test - n_test as f64;
        while n_valid + n_test > n {
            if n_test > 0 {
                n_test -= 1;
            } else {
                n_valid -= 1;
            }
        }
        if n >= 3 && n_valid + n_test == n {
            if n_test >= n_valid {
                n_test -= 1;
            } else {
                n_valid -= 1;
            }
        }
        for (k, &pos) in positions.iter().enumerate() {
            records[pos].split = if k < n_valid {
                Split::Valid
            } else if k < n_valid + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    TripletSet::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Triplet;

    fn records(per_user: &[usize]) -> TripletSet {
        let mut out = Vec::new();
        for (u, &n) in per_user.iter().enumerate() {
            for k in 0..n {
                out.push(Triplet {
                    user: u,
                    given: k,
                    matcher: k,
                    split: Split::Train,
                });
            }
        }
        TripletSet::new(out).unwrap()
    }

    #[test]
    fn hundred_records_eighty_ten_ten() {
        let set = records(&[10; 10]);
        let out = split_triplets(&set, SplitRatios::default(), 3).unwrap();
        let (tr, va, te) = (
            out.count(Split::Train),
            out.count(Split::Valid),
            out.count(Split::Test),
        );
        assert_eq!(tr + va + te, 100);
        assert!((78..=82).contains(&tr), "{tr}");
        assert!(
            (8..=12).contains(&va) && (8..=12).contains(&te),
            "{va} {te}"
        );
    }

    #[test]
    fn all_train_ratio() {
        let set = records(&[5, 7, 1]);
        let out = split_triplets(
            &set,
            SplitRatios {
                train: 1.0,
                valid: 0.0,
                test: 0.0,
            },
            1,
        )
        .unwrap();
        assert_eq!(out.count(Split::Train), 13);
    }

    #[test]
    fn same_seed_same_assignment() {
        let set = records(&[9, 4, 12, 3]);
        let a = split_triplets(&set, SplitRatios::default(), 42).unwrap();
        let b = split_triplets(&set, SplitRatios::default(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(split_triplets(&TripletSet::default(), SplitRatios::default(), 0).is_err());
    }

    #[test]
    fn bad_ratios_rejected() {
        let set = records(&[3]);
        assert!(split_triplets(
            &set,
            SplitRatios {
                train: 0.5,
                valid: 0.1,
                test: 0.1
            },
            0
        )
        .is_err());
        assert!(split_triplets(
            &set,
            SplitRatios {
                train: 0.0,
                valid: 0.5,
                test: 0.5
            },
            0
        )
        .is_err());
    }

    #[test]
    fn users_with_three_records_keep_train() {
        let set = records(&[3; 40]);
        let out = split_triplets(
            &set,
            SplitRatios {
                train: 0.2,
                valid: 0.4,
                test: 0.4,
            },
            9,
        )
        .unwrap();
        for u in 0..40 {
            assert!(out
                .records
                .iter()
                .any(|t| t.user == u && t.split == Split::Train));
        }
    }
}
