//! Evaluation metrics: hit rate and NDCG for leave-one-out ranking, mean
//! average accuracy for sequential prediction, persistence baselines and
//! attribution histograms.

use alloc::vec;
use alloc::vec::Vec;

use core::fmt;

use crate::mixture::{Attributed, MixturePrediction};
use crate::scheme::InterpretationScheme;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    /// The observed first half of a session must be non-empty.
    ContractError(&'static str),
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::ContractError(msg) => write!(f, "contract violation: {msg}"),
        }
    }
}

impl core::error::Error for MetricError {}

/// 1-based rank of the positive item among candidates scored by the
/// model; ties are broken by item id ascending.
pub fn rank_of_positive(scored: &[(usize, f64)], positive_item: usize) -> usize {
    let pos_score = scored
        .iter()
        .find(|(item, _)| *item == positive_item)
        .map(|&(_, s)| s)
        .expect("positive item must be among candidates");
    let mut rank = 1;
    for &(item, score) in scored {
        if item == positive_item {
            continue;
        }
        if score > pos_score || (score == pos_score && item < positive_item) {
            rank += 1;
        }
    }
    rank
}

/// HR@k: 1 when the positive ranks within the top k.
pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

/// NDCG@k for a single relevant item: 1 / log₂(rank + 1) within the top
/// k, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0 / libm::log2((rank + 1) as f64)
    } else {
        0.0
    }
}

/// Plain classification accuracy of thresholded probabilities.
pub fn accuracy(y_hat: &[f64], labels: &[f64]) -> f64 {
    debug_assert_eq!(y_hat.len(), labels.len());
    if y_hat.is_empty() {
        return 0.0;
    }
    let correct = y_hat
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (if p > 0.5 { 1.0 } else { 0.0 }) == l)
        .count();
    correct as f64 / y_hat.len() as f64
}

/// Predicted and true labels over the second half of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionPrediction {
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
}

impl SessionPrediction {
    pub fn len(&self) -> usize {
        self.actual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actual.is_empty()
    }
}

/// Average accuracy of one session: Σ_j acc(j)·L(j)/T where acc(j) is the
/// accuracy over the first j positions and L(j) flags a correct position.
pub fn average_accuracy(session: &SessionPrediction) -> f64 {
    debug_assert!(!session.is_empty());
    debug_assert_eq!(session.predicted.len(), session.actual.len());
    let t = session.len();
    let mut correct_so_far = 0usize;
    let mut total = 0.0;
    for j in 1..=t {
        let hit = session.predicted[j - 1] == session.actual[j - 1];
        if hit {
            correct_so_far += 1;
            total += correct_so_far as f64 / j as f64;
        }
    }
    total / t as f64
}

/// Mean average accuracy over sessions.
pub fn maa(sessions: &[SessionPrediction]) -> f64 {
    if sessions.is_empty() {
        return 0.0;
    }
    sessions.iter().map(average_accuracy).sum::<f64>() / sessions.len() as f64
}

/// Persistence baseline: repeat the last observed skip over the second
/// half.
pub fn baseline_last(first_half: &[f64], second_len: usize) -> Result<Vec<f64>, MetricError> {
    let last = *first_half
        .last()
        .ok_or(MetricError::ContractError("first half is empty"))?;
    Ok(vec![last; second_len])
}

/// Mean baseline: predict 1 iff the mean skip rate of the first half is
/// ≥ 0.5 (ties predict 1).
pub fn baseline_mean(first_half: &[f64], second_len: usize) -> Result<Vec<f64>, MetricError> {
    if first_half.is_empty() {
        return Err(MetricError::ContractError("first half is empty"));
    }
    let mean = first_half.iter().sum::<f64>() / first_half.len() as f64;
    let predicted = if mean >= 0.5 { 1.0 } else { 0.0 };
    Ok(vec![predicted; second_len])
}

/// Histogram of attributed experts plus mean attribution values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionHistogram {
    /// Fraction of samples whose argmax-α is expert i.
    pub argmax_fractions: Vec<f64>,
    /// Fraction of samples with no selection at all (Σα ≈ 0); kept in a
    /// separate bucket rather than defaulting to an expert.
    pub no_selection_fraction: f64,
    /// Mean α per expert over all samples.
    pub mean_alpha: Vec<f64>,
    pub samples: usize,
}

pub fn attribution_histogram(
    predictions: &[MixturePrediction],
    scheme: &InterpretationScheme,
    epsilon: f64,
) -> AttributionHistogram {
    let h = scheme.num_subsets();
    let mut counts = vec![0usize; h];
    let mut none = 0usize;
    let mut mean_alpha = vec![0.0; h];
    let mut samples = 0usize;
    for pred in predictions {
        for row in 0..pred.batch_len() {
            samples += 1;
            match pred.attributed(row, scheme, epsilon) {
                Attributed::Expert(i) => counts[i] += 1,
                Attributed::NoSelection => none += 1,
            }
            for c in 0..h {
                mean_alpha[c] += pred.alpha.at(row, c);
            }
        }
    }
    let denom = samples.max(1) as f64;
    AttributionHistogram {
        argmax_fractions: counts.iter().map(|&c| c as f64 / denom).collect(),
        no_selection_fraction: none as f64 / denom,
        mean_alpha: mean_alpha.into_iter().map(|v| v / denom).collect(),
        samples,
    }
}
