use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compatibility scores, one row per method and one column per outfit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scoreboard {
    pub methods: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl Scoreboard {
    pub fn new(methods: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        if methods.len() != scores.len() {
            return Err(Error::DimensionMismatch { expected: methods.len(), actual: scores.len() });
        }
        if methods.len() < 2 {
            return Err(Error::InvalidArgument("a scoreboard needs at least 2 methods".into()));
        }
        let k = scores[0].len();
        if k == 0 {
            return Err(Error::InvalidArgument("a scoreboard needs at least 1 outfit".into()));
        }
        if let Some(row) = scores.iter().find(|r| r.len() != k) {
            return Err(Error::DimensionMismatch { expected: k, actual: row.len() });
        }
        if scores.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("scoreboard entries must be finite".into()));
        }
        Ok(Self { methods, scores })
    }

    pub fn outfits(&self) -> usize {
        self.scores[0].len()
    }
}

/// Percentage of outfits on which each method's score is strictly greater than
/// every other method's. Ties give no winner.
pub fn f2bt(board: &Scoreboard) -> Vec<f64> {
    let k = board.outfits();
    let mut wins = vec![0usize; board.methods.len()];
    for col in 0..k {
        let mut best = 0;
        let mut unique = true;
        for m in 1..board.scores.len() {
            let (v, b) = (board.scores[m][col], board.scores[best][col]);
            if v > b {
                best = m;
                unique = true;
            } else if v == b {
                unique = false;
            }
        }
        if unique {
            wins[best] += 1;
        }
    }
    wins.into_iter().map(|w| 100.0 * w as f64 / k as f64).collect()
}

pub fn f2bt_table(board: &Scoreboard) -> BTreeMap<String, f64> {
    board.methods.iter().cloned().zip(f2bt(board)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn board(rows: Vec<Vec<f64>>) -> Scoreboard {
        let names = (0..rows.len()).map(|i| format!("m{i}")).collect();
        Scoreboard::new(names, rows).unwrap()
    }

    #[test]
    fn seven_of_ten() {
        let a: Vec<f64> = (0..10).map(|i| if i < 7 { 1.0 } else { 0.0 }).collect();
        let b: Vec<f64> = (0..10).map(|i| if i < 7 { 0.0 } else { 1.0 }).collect();
        assert_eq!(f2bt(&board(vec![a, b])), vec![70.0, 30.0]);
    }

    #[test]
    fn all_ties() {
        assert_eq!(f2bt(&board(vec![vec![0.5; 4]; 3])), vec![0.0; 3]);
    }

    #[test]
    fn tie_for_first_gives_no_winner_even_with_a_lower_third() {
        assert_eq!(f2bt(&board(vec![vec![2.0], vec![2.0], vec![1.0]])), vec![0.0; 3]);
        assert_eq!(f2bt(&board(vec![vec![1.0], vec![1.0], vec![2.0]])), vec![0.0, 0.0, 100.0]);
    }

    #[test]
    fn validation() {
        assert!(Scoreboard::new(vec!["a".into()], vec![vec![1.0]]).is_err());
        assert!(Scoreboard::new(vec!["a".into(), "b".into()], vec![vec![], vec![]]).is_err());
        assert!(Scoreboard::new(vec!["a".into(), "b".into()], vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(Scoreboard::new(vec!["a".into(), "b".into()], vec![vec![f64::NAN], vec![1.0]]).is_err());
    }

    #[test]
    fn monotone_transform_of_a_column_is_invariant() {
        let b = board(vec![vec![0.1, 0.9, 0.3], vec![0.5, 0.2, 0.3], vec![0.4, 0.4, 0.8]]);
        let mut t = b.clone();
        for row in &mut t.scores {
            row[1] = row[1].powi(3) * 5.0 + 2.0;
        }
        assert_eq!(f2bt(&b), f2bt(&t));
    }
}
