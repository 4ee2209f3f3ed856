//! Combining per-essay predictions from several trained models.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

use super::model::Model;
use super::schedule::mean_round;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EnsembleMode {
    /// Mean of member labels, rounded half away from zero.
    #[default]
    MeanRound,
    /// Most frequent label; ties go to the best member's label.
    Majority,
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnsembleMode::MeanRound => "mean-round",
            EnsembleMode::Majority => "majority",
        })
    }
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-round" => Ok(EnsembleMode::MeanRound),
            "majority" => Ok(EnsembleMode::Majority),
            _ => Err(Error::Config(format!("unknown ensemble mode `{s}` (mean-round | majority)"))),
        }
    }
}

/// Combines one label per member. `best` indexes the member with the
/// highest development QWK.
pub fn ensemble_combine(labels: &[usize], k: usize, mode: EnsembleMode, best: usize) -> Result<usize> {
    if best >= labels.len() {
        return Err(Error::OutOfRange(format!("best member {best} of {}", labels.len())));
    }
    match mode {
        EnsembleMode::MeanRound => mean_round(labels, k),
        EnsembleMode::Majority => {
            let mut counts = vec![0usize; k];
            for &l in labels {
                *counts.get_mut(l).ok_or_else(|| Error::OutOfRange(format!("label {l} with {k} labels")))? += 1;
            }
            let top = *counts.iter().max().expect("k > 0");
            let winners: Vec<usize> = (0..k).filter(|&l| counts[l] == top).collect();
            Ok(if winners.len() == 1 { winners[0] } else { labels[best] })
        }
    }
}

pub struct Ensemble {
    pub members: Vec<Model>,
    pub mode: EnsembleMode,
    pub best: usize,
}

impl Ensemble {
    pub fn new(members: Vec<Model>, mode: EnsembleMode, best: usize) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Config("an ensemble needs at least two members".into()));
        }
        let k = members[0].num_labels();
        if members.iter().any(|m| m.num_labels() != k) {
            return Err(Error::Consistency("ensemble members disagree on the label count".into()));
        }
        if best >= members.len() {
            return Err(Error::OutOfRange(format!("best member {best} of {}", members.len())));
        }
        Ok(Ensemble { members, mode, best })
    }

    pub fn num_labels(&self) -> usize {
        self.members[0].num_labels()
    }

    pub fn predict(&self, text: &str) -> Result<usize> {
        let labels = self.members.iter().map(|m| m.predict(text)).collect::<Result<Vec<_>>>()?;
        ensemble_combine(&labels, self.num_labels(), self.mode, self.best)
    }
}

/// Column-wise combination of per-member prediction vectors.
pub fn combine_columns(per_member: &[Vec<usize>], k: usize, mode: EnsembleMode, best: usize) -> Result<Vec<usize>> {
    let n = per_member.first().map_or(0, Vec::len);
    if per_member.iter().any(|p| p.len() != n) {
        return Err(Error::Consistency("members predicted different essay counts".into()));
    }
    (0..n)
        .map(|i| {
            let col: Vec<usize> = per_member.iter().map(|p| p[i]).collect();
            ensemble_combine(&col, k, mode, best)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_round_rule() {
        assert_eq!(ensemble_combine(&[2, 3], 4, EnsembleMode::MeanRound, 0).unwrap(), 3);
        assert_eq!(ensemble_combine(&[0, 1, 1, 3], 4, EnsembleMode::MeanRound, 0).unwrap(), 1);
    }

    #[test]
    fn majority_and_ties() {
        assert_eq!(ensemble_combine(&[1, 2, 2], 4, EnsembleMode::Majority, 0).unwrap(), 2);
        assert_eq!(ensemble_combine(&[1, 2, 3, 0], 4, EnsembleMode::Majority, 2).unwrap(), 3);
        assert_eq!(ensemble_combine(&[1, 1, 3, 3], 4, EnsembleMode::Majority, 0).unwrap(), 1);
        assert!(ensemble_combine(&[1, 7], 4, EnsembleMode::Majority, 0).is_err());
        assert!(ensemble_combine(&[1, 2], 4, EnsembleMode::Majority, 5).is_err());
    }

    #[test]
    fn modes_parse() {
        for m in [EnsembleMode::MeanRound, EnsembleMode::Majority] {
            assert_eq!(m.to_string().parse::<EnsembleMode>().unwrap(), m);
        }
        assert!("vote".parse::<EnsembleMode>().is_err());
    }

    #[test]
    fn columns() {
        let p = vec![vec![0, 2], vec![1, 2], vec![1, 1]];
        assert_eq!(combine_columns(&p, 3, EnsembleMode::Majority, 0).unwrap(), vec![1, 2]);
        assert!(combine_columns(&[vec![0], vec![]], 3, EnsembleMode::Majority, 0).is_err());
    }
}
