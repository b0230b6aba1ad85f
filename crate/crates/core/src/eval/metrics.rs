//! Metric arithmetic, independent of any model.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `exp` of the mean negative log-likelihood.
pub fn perplexity_from_nll(nll: &[f64]) -> Result<f64> {
    if nll.is_empty() {
        return Err(Error::Invalid("perplexity over zero masked positions".into()));
    }
    Ok((nll.iter().sum::<f64>() / nll.len() as f64).exp())
}

/// 1-based rank of `gold` when `scores` are sorted descending. Ties are
/// broken by index, so an equal score at a lower index ranks first.
pub fn rank_of(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > g || (s == g && j < gold))
        .count()
}

/// How per-piece reciprocal ranks of one filler combine into an instance score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankAggregation {
    #[default]
    Mean,
    Min,
}

pub fn instance_reciprocal_rank(ranks: &[usize], agg: RankAggregation) -> f64 {
    let rr = ranks.iter().map(|&r| 1.0 / r as f64);
    match agg {
        RankAggregation::Mean => rr.sum::<f64>() / ranks.len() as f64,
        RankAggregation::Min => rr.fold(f64::INFINITY, f64::min),
    }
}

/// A predicted or gold link in a given sentence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub doc: usize,
    pub start: usize,
    pub end: usize,
    pub entity: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let precision = if predicted == 0 { 0.0 } else { correct as f64 / predicted as f64 };
        let recall = if gold == 0 { 0.0 } else { correct as f64 / gold as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            correct,
            predicted,
            gold,
        }
    }
}

/// Strong-match micro precision/recall/F1: a prediction counts only when
/// its sentence, span boundaries and entity all equal a gold link.
pub fn strong_match_prf(predictions: &[Link], gold: &[Link]) -> Prf {
    let key = |l: &Link| (l.doc, l.start, l.end, l.entity);
    let gold_set: HashSet<_> = gold.iter().map(key).collect();
    let correct = predictions.iter().filter(|p| gold_set.contains(&key(p))).count();
    Prf::from_counts(correct, predictions.len(), gold_set.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_hand_cases() {
        let p = perplexity_from_nll(&[2f64.ln(), 8f64.ln()]).unwrap();
        assert!((p - 4.0).abs() < 1e-12);
        assert!(perplexity_from_nll(&[]).is_err());
        assert!((perplexity_from_nll(&[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ranks_and_ties() {
        let s = [0.1, 0.5, 0.3, 0.5];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 3), 2);
        assert_eq!(rank_of(&s, 0), 4);
        assert_eq!(instance_reciprocal_rank(&[4], RankAggregation::Mean), 0.25);
        assert!((instance_reciprocal_rank(&[2, 5], RankAggregation::Mean) - 0.35).abs() < 1e-15);
        assert_eq!(instance_reciprocal_rank(&[2, 5], RankAggregation::Min), 0.2);
    }

    #[test]
    fn prf_hand_cases() {
        let g: Vec<Link> = (0..4)
            .map(|i| Link {
                doc: i,
                start: 1,
                end: 1,
                entity: 7,
            })
            .collect();
        let p = vec![
            g[0],
            Link {
                entity: 8,
                ..g[1]
            },
        ];
        let r = strong_match_prf(&p, &g);
        assert_eq!((r.precision, r.recall), (0.5, 0.25));
        assert!((r.f1 - 1.0 / 3.0).abs() < 1e-15);
        let none = strong_match_prf(&[], &g);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        let all = strong_match_prf(&g, &g);
        assert_eq!((all.precision, all.recall, all.f1), (1.0, 1.0, 1.0));
    }
}
